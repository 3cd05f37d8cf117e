"""Segmentation and detection metrics computed in exact rational arithmetic.

Results are :class:`fractions.Fraction` values (or ``None`` when undefined) so
small hand-checked cases compare exactly; call ``float()`` for reporting.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import ConfigurationError
from .tasks import IGNORE_INDEX

IOU_THRESHOLDS = tuple(Fraction(50 + 5 * k, 100) for k in range(10))
RECALL_POINTS = tuple(Fraction(k, 100) for k in range(101))


# segmentation


class SegMetrics(NamedTuple):
    miou: Optional[Fraction]
    pacc: Optional[Fraction]
    per_class_iou: tuple

    def as_floats(self):
        f = lambda v: None if v is None else float(v)  # noqa: E731
        return {"miou": f(self.miou), "pacc": f(self.pacc), "per_class_iou": [f(v) for v in self.per_class_iou]}


@dataclass
class ConfusionMatrix:
    """``counts[g, p]`` = pixels with ground truth ``g`` predicted as ``p``."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def accumulate(self, pred, gt, ignore_index=IGNORE_INDEX):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ConfigurationError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
        valid = gt != ignore_index
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        k = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
            raise ConfigurationError(f"class index outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix"):
        if other.num_classes != self.num_classes:
            raise ConfigurationError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def metrics(self) -> SegMetrics:
        c = self.counts
        tp = np.diag(c)
        union = c.sum(0) + c.sum(1) - tp
        per_class = tuple(Fraction(int(t), int(u)) if u else None for t, u in zip(tp, union))
        defined = [v for v in per_class if v is not None]
        if not self.total:
            return SegMetrics(None, None, per_class)
        miou = sum(defined, Fraction(0)) / len(defined)
        return SegMetrics(miou, Fraction(int(tp.sum()), self.total), per_class)


def confusion_accumulate(pred, gt, ignore_index=IGNORE_INDEX, num_classes=None):
    if num_classes is None:
        both = np.concatenate([np.ravel(pred), np.ravel(gt)[np.ravel(gt) != ignore_index]])
        num_classes = int(both.max()) + 1 if both.size else 1
    return ConfusionMatrix(num_classes).accumulate(pred, gt, ignore_index)


# detection


def box_iou(a, b):
    """Pairwise IoU of xyxy boxes, ``(n, 4) x (m, 4) -> (n, m)`` in float64."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(-1)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _as_preds(p):
    p = np.asarray(p, dtype=np.float64)
    return p.reshape(-1, 6)


def _as_gts(g):
    g = np.asarray(g, dtype=np.float64)
    return g.reshape(-1, 5)


def _class_hits(preds, gts, cls, threshold):
    """Per-prediction ``(score, is_tp)`` for one class plus its GT count.

    Within an image, predictions are visited by descending score (stable) and
    take the unmatched GT of highest IoU, if that IoU reaches ``threshold``.
    """
    hits, n_gt = [], 0
    for p, g in zip(preds, gts):
        p = p[p[:, 5] == cls]
        g = g[g[:, 4] == cls]
        n_gt += len(g)
        order = np.argsort(-p[:, 4], kind="stable")
        p = p[order]
        iou = box_iou(p[:, :4], g[:, :4]) if len(g) else np.zeros((len(p), 0))
        used = np.zeros(len(g), dtype=bool)
        for i in range(len(p)):
            cand = np.where(used, -1.0, iou[i]) if len(g) else np.zeros(0)
            j = int(np.argmax(cand)) if cand.size else -1
            tp = j >= 0 and cand[j] >= threshold
            if tp:
                used[j] = True
            hits.append((float(p[i, 4]), tp))
    return hits, n_gt


def precision_recall(hits, n_gt):
    """PR points taken at the end of each group of tied scores (order-independent)."""
    hits = sorted(hits, key=lambda h: -h[0])
    points, tp, k = [], 0, 0
    for idx, (score, is_tp) in enumerate(hits):
        tp += int(is_tp)
        k += 1
        if idx + 1 == len(hits) or hits[idx + 1][0] != score:
            points.append((Fraction(tp, k), Fraction(tp, n_gt)))
    return points


def interpolated_ap(points):
    """101-point interpolation: mean over recall levels r of max precision at recall >= r."""
    # recall is non-decreasing along the ranking, so the envelope is a suffix max
    envelope = [p for p, _ in points]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    recalls = [rec for _, rec in points]
    total = Fraction(0)
    for r in RECALL_POINTS:
        i = bisect.bisect_left(recalls, r)
        if i < len(recalls):
            total += envelope[i]
    return total / len(RECALL_POINTS)


def average_precision(preds, gts, iou_threshold=Fraction(1, 2), num_classes=None):
    """Per-class AP at one IoU threshold.

    ``preds[i]`` is an ``(n, 6)`` array ``(x1, y1, x2, y2, score, class)`` and
    ``gts[i]`` an ``(m, 5)`` array ``(x1, y1, x2, y2, class)`` for image ``i``.
    Returns ``{class: AP}`` over classes with at least one GT box.
    """
    preds = [_as_preds(p) for p in preds]
    gts = [_as_gts(g) for g in gts]
    if len(preds) != len(gts):
        raise ConfigurationError("need one prediction array per ground-truth image")
    classes = sorted({int(c) for g in gts for c in g[:, 4]})
    if num_classes is not None:
        classes = [c for c in classes if c < num_classes]
    thr = float(iou_threshold)
    out = {}
    for cls in classes:
        hits, n_gt = _class_hits(preds, gts, cls, thr)
        out[cls] = interpolated_ap(precision_recall(hits, n_gt))
    return out


def mean_ap(per_class: dict):
    return sum(per_class.values(), Fraction(0)) / len(per_class) if per_class else None


class DetMetrics(NamedTuple):
    map: Optional[Fraction]
    ap50: Optional[Fraction]
    ap75: Optional[Fraction]
    per_threshold: tuple

    def as_floats(self):
        f = lambda v: None if v is None else float(v)  # noqa: E731
        return {"map": f(self.map), "ap50": f(self.ap50), "ap75": f(self.ap75)}


def detection_metrics(preds, gts, num_classes=None) -> DetMetrics:
    per = tuple(mean_ap(average_precision(preds, gts, t, num_classes)) for t in IOU_THRESHOLDS)
    if per[0] is None:
        return DetMetrics(None, None, None, per)
    return DetMetrics(sum(per, Fraction(0)) / len(per), per[0], per[5], per)


@dataclass
class DetAccumulator:
    """Mergeable store of per-image predictions and ground truth."""

    preds: list = field(default_factory=list)
    gts: list = field(default_factory=list)

    def add(self, pred, gt):
        self.preds.append(_as_preds(pred))
        self.gts.append(_as_gts(gt))
        return self

    def merge(self, other: "DetAccumulator"):
        return DetAccumulator(self.preds + other.preds, self.gts + other.gts)

    def metrics(self, num_classes=None) -> DetMetrics:
        return detection_metrics(self.preds, self.gts, num_classes)
