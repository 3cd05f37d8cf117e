"""Independent reference computations used by the tests.

Everything here is written with plain loops over numpy float64 (or exact
fractions) and never calls into the package code it is checking.
"""
import itertools
import math
from fractions import Fraction

import numpy as np
import torch


def as_np(t):
    return t.detach().to(torch.float64).numpy()


def linear(x, lin):
    w = as_np(lin.weight)
    b = as_np(lin.bias) if lin.bias is not None else 0.0
    return x @ w.T + b


def layer_norm(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * as_np(ln.weight) + as_np(ln.bias)


def gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def dense_attention(query, key, mha, mask=None):
    """One batch element: ``query (Nq, C)``, ``key (Nk, C)`` -> ``(Nq, C)`` via explicit loops."""
    q = linear(query, mha.q_proj)
    k = linear(key, mha.k_proj)
    v = linear(key, mha.v_proj)
    h = mha.num_heads
    d = q.shape[1] // h
    out = np.zeros_like(q)
    for head in range(h):
        sl = slice(head * d, (head + 1) * d)
        for i in range(q.shape[0]):
            scores = []
            for j in range(k.shape[0]):
                if mask is not None and mask[i, j]:
                    scores.append(-np.inf)
                else:
                    scores.append(sum(q[i, sl][c] * k[j, sl][c] for c in range(d)) / math.sqrt(d))
            scores = np.array(scores)
            e = np.exp(scores - scores.max())
            p = e / e.sum()
            for j in range(k.shape[0]):
                out[i, sl] += p[j] * v[j, sl]
    return linear(out, mha.out_proj)


def attention_pool_reference(x5, pool):
    """``x5 (C, H, W)`` -> normalized ``(1 + H*W, C)`` tokens."""
    c = x5.shape[0]
    tokens = x5.reshape(c, -1).T
    t = np.concatenate([tokens.mean(0, keepdims=True), tokens])
    y = t + dense_attention(t, t, pool.attn)
    return y / np.linalg.norm(y, axis=1, keepdims=True)


def cross_block_reference(x, memory, block):
    x = x + dense_attention(layer_norm(x, block.norm1), memory, block.attn)
    hidden = gelu(linear(layer_norm(x, block.norm2), block.ffn.fc1))
    return x + linear(hidden, block.ffn.fc2)


def self_block_reference(x, block, mask=None):
    y = layer_norm(x, block.norm1)
    x = x + dense_attention(y, y, block.attn, mask)
    hidden = gelu(linear(layer_norm(x, block.norm2), block.ffn.fc1))
    return x + linear(hidden, block.ffn.fc2)


def text_encoder_reference(encoder, token_ids):
    x = as_np(encoder.token_embedding.weight)[token_ids] + as_np(encoder.positional_embedding)[: len(token_ids)]
    n = len(token_ids)
    mask = np.triu(np.ones((n, n), dtype=bool), 1)
    for block in encoder.blocks:
        x = self_block_reference(x, block, mask)
    x = layer_norm(x, encoder.ln_final)
    return x[-1] @ as_np(encoder.projection.weight).T


# gradients


def finite_difference_check(loss_fn, params, n_probes, rng, eps=1e-5, floor=1e-6):
    """Compare autograd against central differences on random scalar entries.

    Returns a list of ``(param_index, flat_index, analytic, numeric, rel_err)``.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    out = []
    for _ in range(n_probes):
        i = int(rng.choice(len(params), p=np.sqrt(sizes) / np.sqrt(sizes).sum()))
        flat = int(rng.integers(params[i].numel()))
        p = params[i]
        with torch.no_grad():
            orig = p.view(-1)[flat].item()
            p.view(-1)[flat] = orig + eps
            up = loss_fn().item()
            p.view(-1)[flat] = orig - eps
            down = loss_fn().item()
            p.view(-1)[flat] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[i].reshape(-1)[flat].item()
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        out.append((i, flat, analytic, numeric, rel))
    return out


def random_functional(outputs, seed=0):
    """Fixed random linear functional of a list of tensors (a smooth scalar loss)."""
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    for t in outputs:
        w = torch.randn(t.shape, generator=g, dtype=t.dtype)
        total = total + (w * t).sum()
    return total


# losses


def brute_force_assignment_cost(cost):
    """Minimum total cost over all injective maps from the smaller side to the larger."""
    cost = np.asarray(cost, dtype=np.float64)
    r, g = cost.shape
    if g > r:
        cost = cost.T
        r, g = g, r
    best = np.inf
    for rows in itertools.permutations(range(r), g):
        best = min(best, sum(cost[rows[j], j] for j in range(g)))
    return best


def seg_loss_reference(class_logits, mask_logits, target, ignore_index=255):
    """Loop over pixels: -log normalized mixture mass of the target class.

    ``class_logits (Q, K+1)``, ``mask_logits (Q, h, w)``, ``target (h, w)``.
    """
    q, k1 = class_logits.shape
    cls = np.exp(class_logits - class_logits.max(1, keepdims=True))
    cls = cls / cls.sum(1, keepdims=True)
    total, count = 0.0, 0
    for y in range(target.shape[0]):
        for x in range(target.shape[1]):
            t = int(target[y, x])
            if t == ignore_index:
                continue
            mass = np.zeros(k1 - 1)
            for qi in range(q):
                m = 1.0 / (1.0 + math.exp(-mask_logits[qi, y, x]))
                mass += cls[qi, :-1] * m
            total += -math.log(mass[t] / mass.sum())
            count += 1
    return total / count if count else 0.0


# detection metrics


def _iou_exact(a, b):
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = Fraction(ix * iy)
    area = lambda r: Fraction((r[2] - r[0]) * (r[3] - r[1]))  # noqa: E731
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else Fraction(0)


def greedy_matches(preds, gts, cls, threshold):
    """Per image: list of (score, is_tp, matched_gt_index) with integer boxes and exact IoU."""
    result = []
    for p, g in zip(preds, gts):
        p = [row for row in p if int(row[5]) == cls]
        g = [row for row in g if int(row[4]) == cls]
        p = sorted(p, key=lambda r: -r[4])  # python sort is stable
        used = [False] * len(g)
        per_image = []
        for row in p:
            best, best_j = Fraction(-1), -1
            for j, gt in enumerate(g):
                if used[j]:
                    continue
                iou = _iou_exact([int(v) for v in row[:4]], [int(v) for v in gt[:4]])
                if iou > best:
                    best, best_j = iou, j
            tp = best_j >= 0 and best >= threshold
            if tp:
                used[best_j] = True
            per_image.append((row[4], tp, best_j if tp else -1))
        result.append(per_image)
    return result


def brute_force_ap(preds, gts, cls, threshold):
    """101-point AP from the precision/recall at every score cutoff, recomputed from scratch."""
    n_gt = sum(1 for g in gts for row in g if int(row[4]) == cls)
    scores = sorted({row[4] for p in preds for row in p if int(row[5]) == cls}, reverse=True)
    pr = []
    for s in scores:
        kept = [[row for row in p if row[4] >= s] for p in preds]
        hits = [h for img in greedy_matches(kept, gts, cls, threshold) for h in img]
        tp = sum(1 for h in hits if h[1])
        pr.append((Fraction(tp, len(hits)), Fraction(tp, n_gt)))
    total = Fraction(0)
    for k in range(101):
        r = Fraction(k, 100)
        cands = [p for p, rec in pr if rec >= r]
        total += max(cands) if cands else Fraction(0)
    return total / 101


# synthetic world


def connected_boxes(binary):
    """Bounding boxes ``(x1, y1, x2, y2)`` of 4-connected components, by flood fill."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    boxes = []
    for y0 in range(h):
        for x0 in range(w):
            if not binary[y0, x0] or seen[y0, x0]:
                continue
            stack = [(y0, x0)]
            seen[y0, x0] = True
            ys, xs = [], []
            while stack:
                y, x = stack.pop()
                ys.append(y)
                xs.append(x)
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            boxes.append((min(xs), min(ys), max(xs) + 1, max(ys) + 1, ys, xs))
    return boxes


def random_detection_instance(rng, max_images=2, max_preds=4, max_gts=3, num_classes=2, size=10):
    """Small random AP instance with integer boxes and tied scores drawn from a coarse grid."""
    def box():
        x1, y1 = rng.integers(0, size - 1, size=2)
        x2 = rng.integers(x1 + 1, size + 1)
        y2 = rng.integers(y1 + 1, size + 1)
        return [int(x1), int(y1), int(x2), int(y2)]

    preds, gts = [], []
    for _ in range(int(rng.integers(1, max_images + 1))):
        g = [box() + [int(rng.integers(num_classes))] for _ in range(int(rng.integers(0, max_gts + 1)))]
        p = []
        for _ in range(int(rng.integers(0, max_preds + 1))):
            if g and rng.random() < 0.5:
                # jitter a ground-truth box so true positives are common
                src = g[int(rng.integers(len(g)))]
                b = [min(max(v + int(rng.integers(-1, 2)), 0), size) for v in src[:4]]
                if b[2] <= b[0] or b[3] <= b[1]:
                    b = src[:4]
                cls = src[4] if rng.random() < 0.8 else int(rng.integers(num_classes))
            else:
                b, cls = box(), int(rng.integers(num_classes))
            p.append(b + [int(rng.integers(1, 5)) / 4, cls])
        preds.append(p)
        gts.append(g)
    return preds, gts
