"""Batch composition for the multi-task schedules on partially labeled data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..data import PartialDataset
from ..exceptions import ConfigurationError
from ..tasks import DET, IGNORE_INDEX, SEM, TASKS

SELF_TRAINING = "self_training"
ZEROING_LOSS = "zeroing_loss"
ROUND_ROBIN = "round_robin"
UNIFORM_SAMPLE = "uniform_sample"
WEIGHTED_SAMPLE = "weighted_sample"
SCHEDULES = (SELF_TRAINING, ZEROING_LOSS, ROUND_ROBIN, UNIFORM_SAMPLE, WEIGHTED_SAMPLE)


def check_schedule(kind):
    if kind not in SCHEDULES:
        raise ConfigurationError(f"unknown schedule {kind!r}; expected one of {SCHEDULES}")
    return kind


@dataclass
class Batch:
    """Indices into a dataset plus a per-image, per-task loss mask ``(B, 3)``."""

    indices: np.ndarray
    loss_mask: np.ndarray
    task: str | None = None

    def active_tasks(self):
        return [t for j, t in enumerate(TASKS) if self.loss_mask[:, j].any()]


def task_probabilities(schedule, dataset: PartialDataset):
    counts = np.array([len(dataset.task_indices(t)) for t in TASKS], dtype=np.float64)
    if schedule == UNIFORM_SAMPLE:
        p = (counts > 0).astype(np.float64)
    elif schedule == WEIGHTED_SAMPLE:
        p = counts
    else:
        raise ConfigurationError(f"{schedule} does not sample tasks")
    if p.sum() == 0:
        raise ConfigurationError("no labeled images for any task")
    return p / p.sum()


def round_robin_task(step):
    return TASKS[step % len(TASKS)]


def _draw(rng, pool, batch_size):
    pool = np.asarray(pool)
    return rng.choice(pool, size=batch_size, replace=len(pool) < batch_size)


def compose_batch(schedule, dataset: PartialDataset, rng, step=0, batch_size=8, pools=None, probs=None) -> Batch:
    """Choose images and the loss mask for one optimizer step.

    ``pools``/``probs`` may be passed in to avoid recomputing per-task index
    lists and sampling probabilities on every call.
    """
    check_schedule(schedule)
    avail = dataset.availability_matrix()
    if schedule in (SELF_TRAINING, ZEROING_LOSS):
        if schedule == SELF_TRAINING and not avail.all():
            raise ConfigurationError("self_training needs a fully labeled (pseudo-merged) dataset")
        idx = np.sort(rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False))
        return Batch(idx, avail[idx].copy())
    pools = pools if pools is not None else {t: dataset.task_indices(t) for t in TASKS}
    if schedule == ROUND_ROBIN:
        task = round_robin_task(step)
        if not pools[task]:
            raise ConfigurationError(f"round_robin: no labeled images for task {task!r}")
    else:
        p = probs if probs is not None else task_probabilities(schedule, dataset)
        task = TASKS[int(rng.choice(len(TASKS), p=p))]
    idx = np.sort(_draw(rng, pools[task], batch_size))
    mask = np.zeros((len(idx), len(TASKS)), dtype=bool)
    mask[:, TASKS.index(task)] = True
    return Batch(idx, mask, task)


class BatchComposer:
    """Stateful iterator over batches for one training stage."""

    def __init__(self, dataset: PartialDataset, schedule, batch_size=8, rng=None):
        self.dataset = dataset
        self.schedule = check_schedule(schedule)
        self.batch_size = batch_size
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.pools = {t: dataset.task_indices(t) for t in TASKS}
        self.probs = None
        if schedule in (UNIFORM_SAMPLE, WEIGHTED_SAMPLE):
            self.probs = task_probabilities(schedule, dataset)
        if schedule == ROUND_ROBIN:
            empty = [t for t in TASKS if not self.pools[t]]
            if empty:
                raise ConfigurationError(f"round_robin: empty task pools {empty}")
        self.step = 0

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        batch = compose_batch(self.schedule, self.dataset, self.rng, self.step, self.batch_size,
                              self.pools, self.probs)
        self.step += 1
        return batch


def collate(dataset: PartialDataset, batch: Batch, dtype=torch.float32):
    """Tensors for a batch: images ``(B, 3, H, W)``, masks ``(B, H, W)``, box lists."""
    samples = [dataset[i] for i in batch.indices]
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype).permute(0, 3, 1, 2)
    h, w = images.shape[-2:]
    masks = {}
    for task in (SEM, "driv"):
        j = TASKS.index(task)
        arr = np.full((len(samples), h, w), IGNORE_INDEX, dtype=np.int64)
        for k, s in enumerate(samples):
            if batch.loss_mask[k, j]:
                arr[k] = s.annotation(task)
        masks[task] = torch.as_tensor(arr)
    j = TASKS.index(DET)
    boxes = [s.boxes if batch.loss_mask[k, j] else np.zeros((0, 5), np.float32) for k, s in enumerate(samples)]
    return images, masks, boxes
