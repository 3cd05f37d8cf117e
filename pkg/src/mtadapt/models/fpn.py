"""Feature pyramid neck used as the multi-scale adapter, plus its extra-layer variants."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from ..exceptions import ModelConstructionError
from .backbone import FeatureHierarchy

VARIANTS = ("fpn", "pre", "post", "pre_scalar", "pre_vector")


class PyramidFeatures(NamedTuple):
    p2: torch.Tensor
    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor


@dataclass(frozen=True)
class AdapterConfig:
    variant: str = "fpn"
    residual_init: float = 0.001

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelConstructionError(f"unknown adapter variant {self.variant!r}; expected {VARIANTS}")


def _two_convs(channels):
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(channels, channels, 3, padding=1),
    )


class FPN(nn.Module):
    """Top-down pyramid: 1x1 laterals, 2x nearest upsample-add, 3x3 smoothing.

    ``pre`` inserts two convolutions on each backbone level before the laterals,
    ``post`` after the smoothing. ``pre_scalar``/``pre_vector`` keep the input and
    add the extra branch scaled by a learnable scalar / per-channel vector.
    """

    def __init__(self, in_channels, out_channels=32, cfg: AdapterConfig | None = None):
        super().__init__()
        self.cfg = cfg or AdapterConfig()
        self.in_channels = tuple(in_channels)
        self.out_channels = out_channels
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in self.in_channels)
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in self.in_channels
        )
        variant = self.cfg.variant
        if variant.startswith("pre"):
            self.pre = nn.ModuleList(_two_convs(c) for c in self.in_channels)
        if variant == "post":
            self.post = nn.ModuleList(_two_convs(out_channels) for _ in self.in_channels)
        if variant == "pre_scalar":
            self.residual_scale = nn.Parameter(torch.tensor(float(self.cfg.residual_init)))
        if variant == "pre_vector":
            self.residual_scale = nn.ParameterList(
                nn.Parameter(torch.full((c,), float(self.cfg.residual_init))) for c in self.in_channels
            )

    def _scale(self, level):
        if self.cfg.variant == "pre_scalar":
            return self.residual_scale
        return self.residual_scale[level].view(1, -1, 1, 1)

    def forward(self, feats: FeatureHierarchy) -> PyramidFeatures:
        xs = list(feats)
        if len(xs) != len(self.in_channels):
            raise ModelConstructionError(f"expected {len(self.in_channels)} levels, got {len(xs)}")
        for i, (x, c) in enumerate(zip(xs, self.in_channels)):
            if x.shape[1] != c:
                raise ModelConstructionError(f"level {i} has {x.shape[1]} channels, expected {c}")
        variant = self.cfg.variant
        if variant == "pre":
            xs = [branch(x) for branch, x in zip(self.pre, xs)]
        elif variant in ("pre_scalar", "pre_vector"):
            xs = [x + self._scale(i) * branch(x) for i, (branch, x) in enumerate(zip(self.pre, xs))]

        laterals = [lat(x) for lat, x in zip(self.lateral, xs)]
        merged = [None] * len(laterals)
        merged[-1] = laterals[-1]
        for i in range(len(laterals) - 2, -1, -1):
            merged[i] = laterals[i] + F.interpolate(merged[i + 1], scale_factor=2, mode="nearest")
        outs = [smooth(m) for smooth, m in zip(self.smooth, merged)]
        if variant == "post":
            outs = [branch(p) for branch, p in zip(self.post, outs)]
        return PyramidFeatures(*outs)


def fpn_forward(h: FeatureHierarchy, params=None, cfg: AdapterConfig | None = None, fpn: FPN | None = None):
    """Functional entry point: build (or reuse) an FPN for ``h`` and run it."""
    if fpn is None:
        fpn = FPN([x.shape[1] for x in h], cfg=cfg).to(h.x5.dtype)
    elif cfg is not None and cfg != fpn.cfg:
        raise ModelConstructionError(f"adapter config {cfg} does not match module variant {fpn.cfg}")
    if params is None:
        return fpn(h)
    try:
        return torch.func.functional_call(fpn, params, (h,), strict=True)
    except (RuntimeError, KeyError) as exc:
        raise ModelConstructionError(f"parameters do not match variant {fpn.cfg.variant}: {exc}") from exc
