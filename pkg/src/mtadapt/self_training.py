"""Single-task teachers and pseudo labels that complete a partially labeled dataset."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .data import PSEUDO, PartialDataset
from .exceptions import ConfigurationError
from .io.checkpoint import Checkpoint, load_into_model
from .losses import seg_log_posterior
from .model import ModelConfig, MultiTaskModel
from .models import box_cxcywh_to_xyxy
from .tasks import DET, IGNORE_INDEX, SEG_TASKS, TASKS, check_task
from .training.schedules import ZEROING_LOSS
from .training.stage import FINETUNE, StageConfig, run_stage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoLabelConfig:
    box_score_threshold: float = 0.5
    mask_score_threshold: float = 0.3
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        # 0.0 is accepted as the degenerate "emit everything" threshold
        for name in ("box_score_threshold", "mask_score_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {v}")


@dataclass(frozen=True)
class TeacherConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage: StageConfig = field(default_factory=lambda: StageConfig(stage=FINETUNE, epochs=4, learning_rate=1e-3))
    seed: int = 0


@dataclass
class TeacherModel:
    task: str
    model: MultiTaskModel

    def __post_init__(self):
        if tuple(self.model.tasks) != (self.task,):
            raise ConfigurationError(f"teacher for {self.task!r} must hold exactly that head, has {self.model.tasks}")

    def checkpoint(self) -> Checkpoint:
        ckpt = Checkpoint.from_model(self.model, stage=f"teacher:{self.task}")
        ckpt.meta["task"] = self.task
        return ckpt

    @property
    def digest(self):
        return self.checkpoint().digest


def train_teacher(task, subset: PartialDataset, config: TeacherConfig | None = None,
                  init: Optional[Checkpoint] = None, log_path=None):
    """Train a single-task model on ``subset`` (every image must carry ``task`` labels).

    Returns ``(teacher, step_log)``.
    """
    check_task(task)
    config = config or TeacherConfig()
    if len(subset) == 0:
        raise ConfigurationError(f"cannot train a {task} teacher on an empty subset")
    if any(not s.has(task) for s in subset):
        raise ConfigurationError(f"teacher subset contains images without {task} labels")
    vocab = {t: subset.spec.vocabulary(t) for t in TASKS}
    model = MultiTaskModel(vocab, config.model, tasks=(task,), seed=config.seed)
    if init is not None:
        load_into_model(model, init)
    result = run_stage(model, subset, config.stage, ZEROING_LOSS, seed=config.seed, log_path=log_path)
    return TeacherModel(task, model), result.log


def _images_tensor(images, model):
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2)


@torch.no_grad()
def box_dump(teacher: TeacherModel, images):
    """Raw detector output for a batch: pixel xyxy boxes clipped to the image, scores, classes."""
    if teacher.task != DET:
        raise ConfigurationError("box pseudo labels need a det teacher")
    x = _images_tensor(images, teacher.model)
    h, w = x.shape[-2:]
    teacher.model.eval()
    pred = teacher.model(x)[DET]
    probs = torch.softmax(pred.class_logits, dim=-1)[..., :-1]
    scores, classes = probs.max(dim=-1)
    boxes = box_cxcywh_to_xyxy(pred.boxes) * pred.boxes.new_tensor([w, h, w, h])
    boxes[..., 0::2] = boxes[..., 0::2].clamp(0, w)
    boxes[..., 1::2] = boxes[..., 1::2].clamp(0, h)
    return [
        {"boxes": boxes[i].double().numpy(), "scores": scores[i].double().numpy(), "classes": classes[i].numpy()}
        for i in range(x.shape[0])
    ]


def filter_boxes(dump, threshold):
    """``(n, 5)`` float32 pseudo boxes with score >= ``threshold``; boxes clipped to nothing are dropped."""
    b = dump["boxes"]
    keep = (dump["scores"] >= threshold) & (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
    out = np.concatenate([b[keep], dump["classes"][keep, None].astype(np.float64)], axis=1)
    return out.astype(np.float32).reshape(-1, 5)


def pseudo_boxes(teacher: TeacherModel, image, cfg: PseudoLabelConfig | None = None):
    cfg = cfg or PseudoLabelConfig()
    return filter_boxes(box_dump(teacher, image)[0], cfg.box_score_threshold)


@torch.no_grad()
def mask_dump(teacher: TeacherModel, images):
    """Per-pixel winning class and posterior score at full resolution, ``(B, H, W)`` each."""
    if teacher.task not in SEG_TASKS:
        raise ConfigurationError("mask pseudo labels need a sem or driv teacher")
    x = _images_tensor(images, teacher.model)
    h, w = x.shape[-2:]
    teacher.model.eval()
    pred = teacher.model(x)[teacher.task]
    scores, classes = seg_log_posterior(pred).exp().max(dim=1)
    sy, sx = h // scores.shape[-2], w // scores.shape[-1]
    up = lambda t: t.repeat_interleave(sy, dim=-2).repeat_interleave(sx, dim=-1)  # noqa: E731
    return up(scores).double().numpy(), up(classes).numpy()


def threshold_mask(scores, classes, threshold, ignore_index=IGNORE_INDEX):
    return np.where(scores < threshold, ignore_index, classes).astype(np.int64)


def pseudo_mask(teacher: TeacherModel, image, cfg: PseudoLabelConfig | None = None):
    cfg = cfg or PseudoLabelConfig()
    scores, classes = mask_dump(teacher, image)
    return threshold_mask(scores[0], classes[0], cfg.mask_score_threshold, cfg.ignore_index)


def merge_labels(dataset: PartialDataset, teachers: dict, cfg: PseudoLabelConfig | None = None, batch_size=16):
    """Fill every missing annotation with a teacher's pseudo label.

    Ground truth always wins; filled slots get provenance ``pseudo`` and the
    teacher checkpoint digest as their source.
    """
    cfg = cfg or PseudoLabelConfig()
    missing = [t for t in TASKS if t not in teachers]
    if missing:
        raise ConfigurationError(f"missing teacher for tasks {missing}")
    samples = list(dataset.samples)
    for task in TASKS:
        teacher = teachers[task]
        if teacher.task != task:
            raise ConfigurationError(f"teacher registered for {task!r} was trained for {teacher.task!r}")
        todo = [i for i, s in enumerate(samples) if not s.has(task)]
        if not todo:
            continue
        source = f"sha256:{teacher.digest}"
        for start in range(0, len(todo), batch_size):
            chunk = todo[start:start + batch_size]
            images = np.stack([samples[i].image for i in chunk])
            if task == DET:
                labels = [filter_boxes(d, cfg.box_score_threshold) for d in box_dump(teacher, images)]
            else:
                scores, classes = mask_dump(teacher, images)
                labels = [threshold_mask(s, c, cfg.mask_score_threshold, cfg.ignore_index)
                          for s, c in zip(scores, classes)]
            for i, lab in zip(chunk, labels):
                samples[i] = samples[i].with_annotation(task, lab, provenance=PSEUDO, source=source)
        log.info("merged %d %s pseudo labels from teacher %s", len(todo), task, source[:19])
    return PartialDataset(samples, dataset.spec, dataset.setting)
