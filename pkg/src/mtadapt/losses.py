"""Per-task losses, set matching for detection, and the weighted multi-task total."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch.nn import functional as F

from .exceptions import ConfigurationError, TrainingAbortError
from .models.heads import DetPrediction, SegPrediction, box_cxcywh_to_xyxy, box_xyxy_to_cxcywh
from .tasks import IGNORE_INDEX

L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
# unmatched proposals outnumber objects ~10:1; without this the class scores stay near uniform
NO_OBJECT_WEIGHT = 0.1


@dataclass(frozen=True)
class LossWeights:
    alpha_det: float = 1.0
    alpha_sem: float = 0.7
    alpha_driv: float = 0.7

    def __post_init__(self):
        for name in ("alpha_det", "alpha_sem", "alpha_driv"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")

    def as_dict(self):
        return {"det": self.alpha_det, "sem": self.alpha_sem, "driv": self.alpha_driv}


# segmentation


def downsample_mask(mask, size):
    """Nearest-neighbour subsampling of integer masks (..., H, W) to ``size``."""
    h, w = mask.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return mask
    if h % th or w % tw:
        raise ConfigurationError(f"mask {(h, w)} not an integer multiple of {size}")
    return mask[..., :: h // th, :: w // tw]


def seg_log_posterior(pred: SegPrediction):
    """Per-pixel log class distribution ``(B, K, h, w)``.

    Class ``c`` gets mass ``sum_q softmax(class_logits_q)[c] * sigmoid(mask_logits_q)``
    (no-object slot excluded); masses are normalized over classes.
    """
    log_cls = F.log_softmax(pred.class_logits, dim=-1)[..., :-1]  # (B, Q, K)
    log_mask = F.logsigmoid(pred.mask_logits)  # (B, Q, h, w)
    joint = log_cls.unsqueeze(-1).unsqueeze(-1) + log_mask.unsqueeze(2)  # (B, Q, K, h, w)
    log_mass = torch.logsumexp(joint, dim=1)
    return log_mass - torch.logsumexp(log_mass, dim=1, keepdim=True)


def seg_loss(pred: SegPrediction, mask, ignore_index=IGNORE_INDEX, reduction="mean"):
    """Mean pixel NLL of the mixture posterior, ignoring ``ignore_index`` pixels.

    ``mask`` is ``(B, H, W)`` at full or stride-4 resolution. With
    ``reduction="none"`` a per-image vector is returned; images without valid
    pixels contribute 0. ``"mean"`` averages over images that have valid pixels.
    """
    logp = seg_log_posterior(pred)
    mask = torch.as_tensor(mask, device=logp.device)
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    mask = downsample_mask(mask, logp.shape[-2:]).long()
    valid = mask != ignore_index
    target = torch.where(valid, mask, torch.zeros_like(mask))
    nll = -logp.gather(1, target.unsqueeze(1)).squeeze(1)
    nll = torch.where(valid, nll, torch.zeros_like(nll))
    counts = valid.flatten(1).sum(dim=1)
    per_image = nll.flatten(1).sum(dim=1) / counts.clamp_min(1).to(nll.dtype)
    if reduction == "none":
        return per_image
    has = counts > 0
    if not bool(has.any()):
        return per_image.sum() * 0.0
    return per_image[has].mean()


# detection


def generalized_box_iou(a, b):
    """Pairwise gIoU between xyxy boxes ``a`` (N, 4) and ``b`` (M, 4)."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp_min(0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union
    lt_c = torch.minimum(a[:, None, :2], b[None, :, :2])
    rb_c = torch.maximum(a[:, None, 2:], b[None, :, 2:])
    wh_c = (rb_c - lt_c).clamp_min(0)
    area_c = wh_c[..., 0] * wh_c[..., 1]
    return iou - (area_c - union) / area_c


def normalize_gt_boxes(boxes, image_size, dtype=torch.float32, device=None):
    """Pixel ``(n, 5)`` annotations -> (normalized cxcywh ``(n, 4)``, labels ``(n,)``)."""
    h, w = image_size
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    xyxy = torch.as_tensor(arr[:, :4] / np.array([w, h, w, h]), dtype=dtype, device=device)
    labels = torch.as_tensor(arr[:, 4].astype(np.int64), device=device)
    return box_xyxy_to_cxcywh(xyxy), labels


def match_cost(class_logits, boxes, gt_labels, gt_boxes):
    """``(R, G)`` matching cost: -log p(class) + 5 L1 + 2 (1 - gIoU)."""
    logp = F.log_softmax(class_logits, dim=-1)
    cost_cls = -logp[:, gt_labels]
    cost_l1 = torch.cdist(boxes, gt_boxes, p=1)
    cost_giou = 1.0 - generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    return cost_cls + L1_WEIGHT * cost_l1 + GIOU_WEIGHT * cost_giou


def hungarian_match(cost):
    """Optimal one-to-one assignment; returns (proposal indices, gt indices)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    return rows.astype(np.int64), cols.astype(np.int64)


def _single_det_loss(class_logits, boxes, gt_labels, gt_boxes):
    num_classes = class_logits.shape[-1] - 1
    target = torch.full((class_logits.shape[0],), num_classes, dtype=torch.long, device=class_logits.device)
    if len(gt_labels) == 0:
        return F.cross_entropy(class_logits, target)
    weight = class_logits.new_ones(num_classes + 1)
    weight[-1] = NO_OBJECT_WEIGHT
    with torch.no_grad():
        cost = match_cost(class_logits, boxes, gt_labels, gt_boxes)
    rows, cols = hungarian_match(cost.cpu().numpy())
    rows_t = torch.as_tensor(rows, device=class_logits.device)
    cols_t = torch.as_tensor(cols, device=class_logits.device)
    target[rows_t] = gt_labels[cols_t]
    loss_cls = F.cross_entropy(class_logits, target, weight=weight)
    pb, gb = boxes[rows_t], gt_boxes[cols_t]
    l1 = (pb - gb).abs().sum()
    giou = torch.diagonal(generalized_box_iou(box_cxcywh_to_xyxy(pb), box_cxcywh_to_xyxy(gb)))
    n = len(gt_labels)
    return loss_cls + (L1_WEIGHT * l1 + GIOU_WEIGHT * (1.0 - giou).sum()) / n


def det_loss(pred: DetPrediction, gt_boxes, image_size, reduction="mean", deep_supervision=True):
    """Set-prediction loss against per-image pixel box annotations.

    ``gt_boxes`` is a list (one per image) of ``(n, 5)`` arrays. When the
    prediction carries every cascade stage and ``deep_supervision`` is on, the
    loss is averaged over stages.
    """
    stages = pred.stages if (deep_supervision and pred.stages) else ((pred.boxes, pred.class_logits),)
    per_image = []
    for i, gt in enumerate(gt_boxes):
        gb, gl = normalize_gt_boxes(gt, image_size, dtype=pred.boxes.dtype, device=pred.boxes.device)
        terms = [_single_det_loss(logits[i], boxes[i], gl, gb) for boxes, logits in stages]
        per_image.append(torch.stack(terms).mean())
    per_image = torch.stack(per_image)
    if reduction == "none":
        return per_image
    return per_image.mean()


# multi-task total


def total_loss(l_det, l_sem, l_driv, weights: LossWeights = LossWeights()):
    """Weighted sum ``alpha_det*l_det + alpha_sem*l_sem + alpha_driv*l_driv``."""
    terms = {"det": l_det, "sem": l_sem, "driv": l_driv}
    for name, value in terms.items():
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise TrainingAbortError(f"non-finite {name} loss: {float(torch.as_tensor(value).detach())}")
    return weights.alpha_det * l_det + weights.alpha_sem * l_sem + weights.alpha_driv * l_driv
