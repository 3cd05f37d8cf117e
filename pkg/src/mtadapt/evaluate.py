"""Run a trained model over fully labeled images and compute every task's metrics."""
from __future__ import annotations

import numpy as np
import torch

from .losses import seg_log_posterior
from .metrics import ConfusionMatrix, DetAccumulator
from .models import box_cxcywh_to_xyxy
from .tasks import DET, DRIV, SEM

METRIC_KEYS = ("miou_ss", "pacc_ss", "miou_da", "pacc_da", "map", "ap50", "ap75")
_SEG_KEYS = {SEM: ("miou_ss", "pacc_ss"), DRIV: ("miou_da", "pacc_da")}


@torch.no_grad()
def predict(model, images):
    """Per-task numpy predictions for a ``(B, H, W, 3)`` batch.

    Segmentation: full-resolution label maps. Detection: per image an
    ``(R, 6)`` array ``(x1, y1, x2, y2, score, class)`` in pixels.
    """
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(images, dtype=np.float32), dtype=dtype).permute(0, 3, 1, 2)
    h, w = x.shape[-2:]
    model.eval()
    outputs = model(x)
    out = {}
    for task, pred in outputs.items():
        if task == DET:
            probs = torch.softmax(pred.class_logits, dim=-1)[..., :-1]
            scores, classes = probs.max(dim=-1)
            boxes = box_cxcywh_to_xyxy(pred.boxes) * pred.boxes.new_tensor([w, h, w, h])
            boxes[..., 0::2] = boxes[..., 0::2].clamp(0, w)
            boxes[..., 1::2] = boxes[..., 1::2].clamp(0, h)
            dets = torch.cat([boxes, scores.unsqueeze(-1), classes.unsqueeze(-1).to(boxes.dtype)], dim=-1)
            out[task] = [d.double().numpy() for d in dets]
        else:
            labels = seg_log_posterior(pred).argmax(dim=1)
            sy, sx = h // labels.shape[-2], w // labels.shape[-1]
            out[task] = labels.repeat_interleave(sy, 1).repeat_interleave(sx, 2).numpy()
    return out


def evaluate_model(model, samples, batch_size=16):
    """Metrics dict over ``samples`` (which must carry ground truth for the model's tasks).

    Values are floats, or ``None`` when a metric is undefined.
    """
    samples = list(samples)
    spec_classes = {t: model.num_classes(t) for t in model.tasks}
    conf = {t: ConfusionMatrix(spec_classes[t]) for t in model.tasks if t != DET}
    det = DetAccumulator()
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        preds = predict(model, np.stack([s.image for s in chunk]))
        for k, s in enumerate(chunk):
            for task in conf:
                conf[task].accumulate(preds[task][k], s.annotation(task))
            if DET in preds:
                det.add(preds[DET][k], s.boxes)
    result = {key: None for key in METRIC_KEYS}
    for task, cm in conf.items():
        m = cm.metrics().as_floats()
        result[_SEG_KEYS[task][0]] = m["miou"]
        result[_SEG_KEYS[task][1]] = m["pacc"]
    if DET in model.tasks:
        result.update(det.metrics(spec_classes[DET]).as_floats())
    return result


def mean_task_score(metrics):
    """Mean of mIoU-SS, mIoU-DA and mAP over the defined entries."""
    vals = [metrics.get(k) for k in ("miou_ss", "miou_da", "map")]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None
