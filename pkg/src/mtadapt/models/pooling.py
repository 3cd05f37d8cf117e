"""Attentional pooling of the coarsest feature map into global and spatial embeddings."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .attention import MultiHeadAttention


class PooledImageFeature(NamedTuple):
    global_: torch.Tensor  # (B, C5)
    spatial: torch.Tensor  # (B, H5*W5, C5)


class AttentionPool(nn.Module):
    """Prepend the spatial mean as token 0, self-attend (with residual), L2-normalize rows."""

    def __init__(self, channels, num_heads=4):
        super().__init__()
        self.attn = MultiHeadAttention(channels, num_heads)

    def tokens(self, x5):
        if x5.dim() == 4:
            x5 = x5.flatten(2).transpose(1, 2)
        return torch.cat([x5.mean(dim=1, keepdim=True), x5], dim=1)

    def pre_norm(self, x5):
        t = self.tokens(x5)
        return t + self.attn(t, t)

    def forward(self, x5) -> PooledImageFeature:
        """``x5`` is ``(B, C5, H5, W5)`` or already flattened to ``(B, H5*W5, C5)``."""
        out = F.normalize(self.pre_norm(x5), dim=-1, eps=1e-12)
        return PooledImageFeature(out[:, 0], out[:, 1:])


def attention_pool(x5, pool: AttentionPool | None = None) -> PooledImageFeature:
    channels = x5.shape[1] if x5.dim() == 4 else x5.shape[-1]
    pool = pool if pool is not None else AttentionPool(channels).to(x5.dtype)
    return pool(x5)
