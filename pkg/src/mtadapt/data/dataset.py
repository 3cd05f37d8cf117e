"""Partially labeled datasets: label-scarcity settings and on-disk persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..exceptions import ConfigurationError
from ..io.tensorfile import atomic_write_text, load_tensors, save_tensors
from ..tasks import DET, DRIV, SEM, TASKS
from .synthetic import ImageSample, SceneSpec

DISJOINT_NORMAL = "disjoint_normal"
DISJOINT_BALANCE = "disjoint_balance"
FULL = "full"
SETTING_KINDS = (DISJOINT_NORMAL, DISJOINT_BALANCE, FULL)

#: driv : det : sem labeled-image ratio of the normal disjoint setting (20k/10k/7k).
NORMAL_RATIO = {DRIV: 20, DET: 10, SEM: 7}


@dataclass(frozen=True)
class DatasetSetting:
    kind: str
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "counts", {t: int(self.counts[t]) for t in TASKS if t in self.counts})
        self.validate()

    def validate(self):
        if self.kind not in SETTING_KINDS:
            raise ConfigurationError(f"unknown dataset setting {self.kind!r}")
        if set(self.counts) != set(TASKS):
            raise ConfigurationError(f"counts must cover {TASKS}, got {sorted(self.counts)}")
        if any(c < 0 for c in self.counts.values()):
            raise ConfigurationError("counts must be non-negative")
        c = self.counts
        if self.kind in (DISJOINT_BALANCE, FULL) and len(set(c.values())) != 1:
            raise ConfigurationError(f"{self.kind} requires equal per-task counts, got {c}")
        if self.kind == DISJOINT_NORMAL:
            unit = c[DRIV] / NORMAL_RATIO[DRIV]
            for t in (DET, SEM):
                if abs(c[t] - unit * NORMAL_RATIO[t]) > 1.0:
                    raise ConfigurationError(
                        f"disjoint_normal counts {c} do not follow the 20:10:7 driv:det:sem ratio"
                    )

    @classmethod
    def disjoint_normal(cls, scale: int):
        """Counts ``scale * (20, 10, 7)`` for (driv, det, sem)."""
        return cls(DISJOINT_NORMAL, {t: scale * NORMAL_RATIO[t] for t in TASKS})

    @classmethod
    def disjoint_balance(cls, per_task: int):
        return cls(DISJOINT_BALANCE, {t: per_task for t in TASKS})

    @classmethod
    def full(cls, n: int):
        return cls(FULL, {t: n for t in TASKS})

    @property
    def num_images(self):
        if self.kind == FULL:
            return self.counts[DET]
        return sum(self.counts.values())

    def to_dict(self):
        return {"kind": self.kind, "counts": dict(self.counts)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["counts"])


@dataclass
class PartialDataset:
    samples: list
    spec: SceneSpec
    setting: DatasetSetting | None = None

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def task_indices(self, task):
        return [i for i, s in enumerate(self.samples) if s.has(task)]

    def labeled_counts(self):
        return {t: len(self.task_indices(t)) for t in TASKS}

    def availability_matrix(self):
        return np.array([s.availability for s in self.samples], dtype=bool).reshape(-1, 3)

    def subset(self, indices):
        return PartialDataset([self.samples[i] for i in indices], self.spec, self.setting)

    def only_task(self, task):
        """Images labeled for ``task`` with every other annotation stripped."""
        out = []
        for i in self.task_indices(task):
            s = self.samples[i]
            for other in TASKS:
                if other != task:
                    s = s.with_annotation(other, None)
            out.append(s)
        return PartialDataset(out, self.spec, self.setting)


def split_setting(samples, setting: DatasetSetting, seed: int, spec: SceneSpec | None = None):
    """Carve fully annotated ``samples`` into a partially labeled dataset.

    Disjoint settings keep exactly one task's annotation per selected image;
    ``full`` keeps everything. Selection and task assignment depend only on
    ``seed``.
    """
    samples = list(samples)
    need = setting.num_images
    if need > len(samples):
        raise ConfigurationError(f"setting {setting.kind} needs {need} samples, only {len(samples)} given")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))[:need]
    if setting.kind == FULL:
        chosen = [samples[i] for i in sorted(order)]
        return PartialDataset(chosen, spec or SceneSpec(), setting)
    assignment = []
    for t in TASKS:
        assignment += [t] * setting.counts[t]
    out = []
    for idx, task in sorted(zip(order.tolist(), assignment)):
        s = samples[idx]
        if not all(s.availability):
            raise ConfigurationError("split_setting expects fully annotated input samples")
        for other in TASKS:
            if other != task:
                s = s.with_annotation(other, None)
        out.append(s)
    return PartialDataset(out, spec or SceneSpec(), setting)


# persistence

_TENSOR_KEYS = {DET: "boxes", SEM: "semantic_mask", DRIV: "drivable_mask"}


def save_dataset(dataset: PartialDataset, root):
    """Write ``manifest.json`` plus one tensor file per image under ``root``."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for pos, s in enumerate(dataset.samples):
        rel = f"samples/{pos:06d}.tensors"
        tensors = {"image": s.image}
        for t in TASKS:
            ann = s.annotation(t)
            if ann is not None:
                tensors[_TENSOR_KEYS[t]] = ann
        save_tensors(root / rel, tensors, meta={"index": s.index})
        records.append({
            "index": int(s.index),
            "file": rel,
            "availability": {t: bool(a) for t, a in zip(TASKS, s.availability)},
            "provenance": {t: s.provenance.get(t) for t in TASKS},
            "annotations": {t: (f"{rel}#{_TENSOR_KEYS[t]}" if s.has(t) else None) for t in TASKS},
            "pseudo_source": {t: s.pseudo_source[t] for t in sorted(s.pseudo_source)},
        })
    manifest = {
        "spec": dataset.spec.to_dict(),
        "setting": dataset.setting.to_dict() if dataset.setting else None,
        "records": records,
    }
    atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return root / "manifest.json"


def load_dataset(root) -> PartialDataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    spec = SceneSpec.from_dict(manifest["spec"])
    setting = DatasetSetting.from_dict(manifest["setting"]) if manifest.get("setting") else None
    samples = []
    for rec in manifest["records"]:
        tensors, _ = load_tensors(root / rec["file"])
        kw = {}
        for t in TASKS:
            key = _TENSOR_KEYS[t]
            if rec["availability"][t]:
                arr = tensors[key]
                kw[key] = arr.astype(np.int64) if t != DET else arr.astype(np.float32)
        samples.append(ImageSample(
            image=tensors["image"],
            provenance={t: p for t, p in rec["provenance"].items() if p is not None},
            index=rec["index"],
            pseudo_source=dict(rec.get("pseudo_source", {})),
            **kw,
        ))
    return PartialDataset(samples, spec, setting)


class ExternalDatasetLoader:
    """Interface for real-dataset readers (BDD100K, nuImages, ...).

    Subclasses yield :class:`ImageSample` objects with class indices mapped onto
    a :class:`SceneSpec` vocabulary. No parser ships with this package.
    """

    def __init__(self, root, spec: SceneSpec):
        self.root = Path(root)
        self.spec = spec

    def __iter__(self):
        raise NotImplementedError("no external dataset parser is bundled")

    def load(self) -> PartialDataset:
        return PartialDataset(list(self), self.spec)
