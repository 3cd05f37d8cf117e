"""Model checkpoints on top of the named-tensor container."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .tensorfile import load_tensors, save_tensors, tensor_digest

log = logging.getLogger(__name__)


def native_digest(t) -> str:
    """SHA-256 of a tensor's exact in-memory bytes (dtype and shape included)."""
    arr = t.detach().cpu().contiguous().numpy()
    h = hashlib.sha256(f"{arr.dtype}:{arr.shape}".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def state_digests(model, names=None) -> dict:
    """``{name: digest}`` for parameters and buffers, optionally restricted to ``names``."""
    out = {}
    for name, t in list(model.named_parameters()) + list(model.named_buffers()):
        if names is None or name in names:
            out[name] = native_digest(t)
    return out


def combined_digest(digests: dict) -> str:
    return hashlib.sha256(json.dumps(digests, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, stage="unknown", config_digest=None, frozen_names=(), prefix=""):
        tensors = {prefix + k: v.detach().clone() for k, v in model.state_dict().items()}
        frozen = {n: tensor_digest(tensors[n]) for n in sorted(frozen_names) if n in tensors}
        meta = {
            "stage": stage,
            "config_digest": config_digest,
            "frozen_set_digest": combined_digest(frozen) if frozen else None,
        }
        return cls(tensors, meta)

    @property
    def digest(self) -> str:
        return combined_digest({k: tensor_digest(v) for k, v in self.tensors.items()})

    def names(self):
        return sorted(self.tensors)


@dataclass
class LoadReport:
    loaded: list
    initialized_fresh: list
    unknown: list
    shape_mismatch: list

    def lines(self):
        out = [f"loaded {len(self.loaded)} tensors"]
        out += [f"initialized fresh: {n}" for n in self.initialized_fresh]
        out += [f"unknown tensor (ignored): {n}" for n in self.unknown]
        out += [f"shape mismatch (kept fresh): {n}" for n in self.shape_mismatch]
        return out


def save_checkpoint(ckpt_or_model, path, **meta):
    """Persist a :class:`Checkpoint` (or a model's full state) to ``path``."""
    ckpt = ckpt_or_model if isinstance(ckpt_or_model, Checkpoint) else Checkpoint.from_model(ckpt_or_model)
    merged = dict(ckpt.meta)
    merged.update(meta)
    save_tensors(path, ckpt.tensors, meta=merged)
    return Path(path)


def read_checkpoint(path) -> Checkpoint:
    """Load and verify; raises :class:`~mtadapt.exceptions.CorruptCheckpointError`."""
    arrays, meta = load_tensors(path)
    return Checkpoint({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}, meta)


def load_into_model(model, ckpt: Checkpoint) -> LoadReport:
    """Copy matching tensors into ``model``; everything else keeps its seeded init."""
    state = model.state_dict()
    loaded, mismatch = [], []
    with torch.no_grad():
        for name, value in ckpt.tensors.items():
            if name not in state:
                continue
            if tuple(state[name].shape) != tuple(value.shape):
                mismatch.append(name)
                continue
            state[name].copy_(value.to(state[name].dtype))
            loaded.append(name)
    unknown = sorted(set(ckpt.tensors) - set(state))
    fresh = sorted(set(state) - set(loaded))
    report = LoadReport(sorted(loaded), fresh, unknown, sorted(mismatch))
    for line in report.lines():
        log.info(line)
    return report


def load_checkpoint(path, model=None):
    """Read ``path``; with ``model`` given, load into it and return ``(model, report)``."""
    ckpt = read_checkpoint(path)
    if model is None:
        return ckpt
    return model, load_into_model(model, ckpt)
