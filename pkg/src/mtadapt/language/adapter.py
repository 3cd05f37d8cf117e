"""Language-to-vision adapter and the naive activation-map fusion baseline."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from ..models.attention import CrossAttentionBlock


def _batched(text, batch):
    if text.dim() == 2:
        text = text.unsqueeze(0).expand(batch, -1, -1)
    return text


class L2VAdapter(nn.Module):
    """Visual tokens (queries) cross-attend to projected class-text features.

    ``forward(text (N, D_text), z5 (B, H5*W5, C)) -> (B, H5*W5, C)``.
    """

    def __init__(self, channels, text_dim, num_layers=3, num_heads=4, ffn_mult=4):
        super().__init__()
        self.text_proj = nn.Linear(text_dim, channels)
        self.layers = nn.ModuleList(
            CrossAttentionBlock(channels, num_heads, ffn_mult) for _ in range(num_layers)
        )

    def forward(self, text, z5):
        memory = _batched(self.text_proj(text), z5.shape[0])
        x = z5
        for layer in self.layers:
            x = layer(x, memory)
        return x

    def zero_output_projections(self):
        for layer in self.layers:
            layer.zero_output_projections()


def l2v_adapt(text, z5, adapter: L2VAdapter | None = None):
    if adapter is None:
        adapter = L2VAdapter(z5.shape[-1], text.shape[-1]).to(z5.dtype)
    return adapter(text, z5)


def activation_maps(text, z5):
    """Cosine maps ``(B, H5*W5, N)`` between L2-normalized ``z5`` rows and ``text`` rows."""
    z_hat = F.normalize(z5, dim=-1)
    t_hat = F.normalize(_batched(text, z5.shape[0]), dim=-1)
    return z_hat @ t_hat.transpose(-2, -1)


class NaivePromptFusion(nn.Module):
    """Concatenate text/pixel cosine maps to ``z5`` and reduce back with a 1x1 convolution."""

    def __init__(self, channels, text_dim, num_classes):
        super().__init__()
        self.text_proj = nn.Linear(text_dim, channels)
        # a 1x1 convolution on flattened tokens is a per-token linear map
        self.reduce = nn.Linear(channels + num_classes, channels)

    def forward(self, text, z5):
        maps = activation_maps(self.text_proj(text), z5)
        return self.reduce(torch.cat([z5, maps], dim=-1))


def naive_prompt_fusion(text, z5, fusion: NaivePromptFusion | None = None):
    if fusion is None:
        fusion = NaivePromptFusion(z5.shape[-1], text.shape[-1], text.shape[0]).to(z5.dtype)
    return fusion(text, z5)
