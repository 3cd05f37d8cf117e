"""Toy pretraining registry producing backbone-only checkpoints."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..data import SceneSpec, generate_scenes
from ..exceptions import ConfigurationError
from ..io.checkpoint import Checkpoint
from ..models import AttentionPool, ToyResNet

PRETRAIN_KINDS = ("random", "supervised_toy", "contrastive_toy")
CROP = 32


def _scene_bank(spec, n_images, seed):
    spec = SceneSpec(**{**spec.to_dict(), "rng_seed": seed})
    scenes = generate_scenes(spec, n_images)
    images = np.stack([s.image for s in scenes]).transpose(0, 3, 1, 2)
    return torch.as_tensor(images), np.stack([s.semantic_mask for s in scenes])


def _crop_positions(rng, n, h, w):
    ys = rng.integers(0, h - CROP + 1, size=n)
    xs = rng.integers(0, w - CROP + 1, size=n)
    return ys, xs


def _crops(images, idx, ys, xs):
    return torch.stack([images[i, :, y:y + CROP, x:x + CROP] for i, y, x in zip(idx, ys, xs)])


def info_nce(a, b, temperature=0.2):
    """Symmetric InfoNCE between two batches of unit-norm embeddings."""
    logits = a @ b.t() / temperature
    target = torch.arange(a.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def resized_crop_view(images, idx, rng, min_side=40):
    """Random square crop of side in [min_side, min(H, W)], resized back to (H, W), brightness-jittered."""
    h, w = images.shape[-2:]
    out = []
    for i in idx:
        side = int(rng.integers(min_side, min(h, w) + 1))
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        crop = images[i:i + 1, :, y:y + side, x:x + side]
        out.append(F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False))
    jitter = rng.uniform(0.8, 1.2, size=(len(idx), 1, 1, 1))
    return (torch.cat(out) * torch.as_tensor(jitter, dtype=images.dtype)).clamp(0, 1)


def _contrastive(backbone, images, rng, steps, batch_size, lr):
    pool = AttentionPool(backbone.channels[-1])
    opt = torch.optim.Adam(list(backbone.parameters()) + list(pool.parameters()), lr=lr)
    n = images.shape[0]
    batch_size = min(batch_size, n)
    losses = []
    for _ in range(steps):
        idx = rng.choice(n, size=batch_size, replace=False)
        za = pool(backbone(resized_crop_view(images, idx, rng)).x5).global_
        zb = pool(backbone(resized_crop_view(images, idx, rng)).x5).global_
        loss = info_nce(za, zb)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def _supervised(backbone, images, masks, num_classes, rng, steps, batch_size, lr):
    classifier = nn.Linear(backbone.channels[-1], num_classes)
    opt = torch.optim.Adam(list(backbone.parameters()) + list(classifier.parameters()), lr=lr)
    n, _, h, w = images.shape
    batch_size = min(batch_size, n)
    losses = []
    for _ in range(steps):
        idx = rng.choice(n, size=batch_size, replace=False)
        ys, xs = _crop_positions(rng, batch_size, h, w)
        patches = _crops(images, idx, ys, xs)
        labels = torch.as_tensor(masks[idx, ys + CROP // 2, xs + CROP // 2])
        logits = classifier(backbone(patches).x5.mean(dim=(2, 3)))
        loss = F.cross_entropy(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def toy_pretrain(kind, seed=0, spec: SceneSpec | None = None, steps=200, batch_size=16, n_images=64,
                 lr=1e-3, base_width=16, blocks_per_stage=2) -> Checkpoint:
    """Pretrain a backbone and return a checkpoint holding only ``backbone.*`` tensors.

    ``random`` is the seeded initialization; ``supervised_toy`` classifies the
    semantic class at the centre of random patches; ``contrastive_toy``
    minimizes InfoNCE between two resized random crops of the same scene.
    """
    if kind not in PRETRAIN_KINDS:
        raise ConfigurationError(f"unknown pretraining kind {kind!r}; expected {PRETRAIN_KINDS}")
    spec = spec or SceneSpec()
    losses = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = ToyResNet(base_width, blocks_per_stage)
        if kind != "random":
            rng = np.random.default_rng([seed, 99])
            images, masks = _scene_bank(spec, n_images, seed + 10_000)
            if kind == "contrastive_toy":
                losses = _contrastive(backbone, images, rng, steps, batch_size, lr)
            else:
                losses = _supervised(backbone, images, masks, len(spec.semantic_classes), rng, steps,
                                     batch_size, lr)
    ckpt = Checkpoint.from_model(backbone, stage=f"pretrain:{kind}", prefix="backbone.")
    ckpt.meta.update({"kind": kind, "seed": int(seed), "steps": int(steps if kind != "random" else 0),
                      "loss_history": losses})
    return ckpt
