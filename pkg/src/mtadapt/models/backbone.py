"""Toy four-stage residual backbone producing strides 4, 8, 16 and 32."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from ..exceptions import ModelConstructionError

STRIDES = (4, 8, 16, 32)


class FeatureHierarchy(NamedTuple):
    x2: torch.Tensor
    x3: torch.Tensor
    x4: torch.Tensor
    x5: torch.Tensor


def _norm(channels):
    return nn.GroupNorm(min(4, channels), channels)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch)
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + identity)


class ToyResNet(nn.Module):
    """Stem at stride 2, then four stages of ``blocks_per_stage`` basic blocks.

    Stage widths are ``base_width * (1, 2, 4, 8)``; each stage halves resolution.
    """

    def __init__(self, base_width=16, blocks_per_stage=2, in_channels=3):
        super().__init__()
        self.channels = tuple(base_width * m for m in (1, 2, 4, 8))
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base_width, 3, stride=2, padding=1, bias=False),
            _norm(base_width),
            nn.ReLU(),
        )
        stages = []
        in_ch = base_width
        for ch in self.channels:
            blocks = [BasicBlock(in_ch, ch, stride=2)]
            blocks += [BasicBlock(ch, ch) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, image) -> FeatureHierarchy:
        if image.dim() != 4 or image.shape[1] != self.stem[0].in_channels:
            raise ModelConstructionError(f"expected (B, 3, H, W) input, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ModelConstructionError(f"input size {(h, w)} not divisible by 32")
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeatureHierarchy(*feats)


def backbone_forward(image, params=None, backbone=None):
    """Run ``backbone`` on ``image``, optionally with a substitute parameter map."""
    backbone = backbone if backbone is not None else ToyResNet()
    if params is None:
        return backbone(image)
    try:
        return torch.func.functional_call(backbone, params, (image,), strict=True)
    except RuntimeError as exc:
        raise ModelConstructionError(str(exc)) from exc
