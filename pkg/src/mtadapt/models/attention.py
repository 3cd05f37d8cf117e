"""Multi-head attention and the small pre-norm blocks built from it."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from ..exceptions import ModelConstructionError


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/output projections.

    Inputs are ``(B, Nq, C)`` queries and ``(B, Nk, C)`` keys/values.
    """

    def __init__(self, dim, num_heads, kv_dim=None):
        super().__init__()
        if dim % num_heads:
            raise ModelConstructionError(f"dim {dim} not divisible by {num_heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key, value=None, attn_mask=None, return_weights=False):
        value = key if value is None else value
        b, nq, _ = query.shape
        nk = key.shape[1]
        h, d = self.num_heads, self.dim // self.num_heads
        q = self.q_proj(query).view(b, nq, h, d).transpose(1, 2)
        k = self.k_proj(key).view(b, nk, h, d).transpose(1, 2)
        v = self.v_proj(value).view(b, nk, h, d).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d)
        if attn_mask is not None:
            scores = scores.masked_fill(attn_mask, float("-inf"))
        weights = scores.softmax(dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(b, nq, self.dim)
        out = self.out_proj(mixed)
        if return_weights:
            return out, weights
        return out

    def identity_init(self):
        """Set every projection to the identity map with zero bias."""
        with torch.no_grad():
            for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
                if lin.weight.shape[0] != lin.weight.shape[1]:
                    raise ModelConstructionError("identity init needs square projections")
                lin.weight.copy_(torch.eye(lin.weight.shape[0], dtype=lin.weight.dtype))
                lin.bias.zero_()
        return self


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual block: self-attention then feed-forward."""

    def __init__(self, dim, num_heads, ffn_mult=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim)

    def forward(self, x, attn_mask=None):
        y = self.norm1(x)
        x = x + self.attn(y, y, attn_mask=attn_mask)
        return x + self.ffn(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual block: queries attend to a memory, then feed-forward."""

    def __init__(self, dim, num_heads, ffn_mult=4, memory_dim=None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, kv_dim=memory_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim)

    def forward(self, x, memory):
        x = x + self.attn(self.norm1(x), memory)
        return x + self.ffn(self.norm2(x))

    def zero_output_projections(self):
        with torch.no_grad():
            for lin in (self.attn.out_proj, self.ffn.fc2):
                lin.weight.zero_()
                lin.bias.zero_()
