"""Query-based mask-classification segmentation head and sparse proposal detection head."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .attention import FeedForward, MultiHeadAttention
from .fpn import PyramidFeatures

# exp() guard for width/height deltas
_MAX_LOG_SCALE = math.log(1000.0 / 16)


class SegPrediction(NamedTuple):
    pixel_embeddings: torch.Tensor  # (B, C, H/4, W/4)
    mask_embeddings: torch.Tensor  # (B, Q, C)
    class_logits: torch.Tensor  # (B, Q, K + 1), last slot is "no object"
    mask_logits: torch.Tensor  # (B, Q, H/4, W/4)


class DetPrediction(NamedTuple):
    boxes: torch.Tensor  # (B, R, 4) normalized cx, cy, w, h
    class_logits: torch.Tensor  # (B, R, K + 1), last slot is "no object"
    stages: tuple = ()  # ((boxes, class_logits), ...) for every cascade stage


def mask_logits_from_embeddings(mask_embeddings, pixel_embeddings):
    return torch.einsum("bqc,bchw->bqhw", mask_embeddings, pixel_embeddings)


class QueryDecoderLayer(nn.Module):
    """Queries cross-attend to image tokens, then self-attend, then feed-forward (pre-norm)."""

    def __init__(self, dim, num_heads, ffn_mult=4):
        super().__init__()
        self.norm_cross = nn.LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, num_heads)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim)

    def forward(self, x, memory):
        x = x + self.cross(self.norm_cross(x), memory)
        y = self.norm_self(x)
        x = x + self.self_attn(y, y)
        return x + self.ffn(self.norm_ffn(x))


class SegHead(nn.Module):
    def __init__(self, channels, num_classes, num_queries=20, num_layers=2, num_heads=4):
        super().__init__()
        self.num_classes = num_classes
        self.num_queries = num_queries
        # pixel decoder, coarse to fine: P4, P3, P2
        self.fuse = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(3))
        self.fuse_norm = nn.ModuleList(nn.GroupNorm(4, channels) for _ in range(3))
        self.pixel_proj = nn.Conv2d(channels, channels, 1)

        self.queries = nn.Parameter(torch.randn(num_queries, channels) * 0.02)
        self.layers = nn.ModuleList(QueryDecoderLayer(channels, num_heads) for _ in range(num_layers))
        self.out_norm = nn.LayerNorm(channels)
        self.class_embed = nn.Linear(channels, num_classes + 1)
        self.mask_embed = nn.Sequential(
            nn.Linear(channels, channels), nn.ReLU(), nn.Linear(channels, channels)
        )

    def pixel_decoder(self, pyr: PyramidFeatures):
        y = pyr.p5
        for conv, norm, p in zip(self.fuse, self.fuse_norm, (pyr.p4, pyr.p3, pyr.p2)):
            y = F.relu(norm(conv(p + F.interpolate(y, scale_factor=2, mode="nearest"))))
        return self.pixel_proj(y)

    def forward(self, pyr: PyramidFeatures) -> SegPrediction:
        pixel = self.pixel_decoder(pyr)
        memory = pyr.p5.flatten(2).transpose(1, 2)
        x = self.queries.unsqueeze(0).expand(memory.shape[0], -1, -1)
        for layer in self.layers:
            x = layer(x, memory)
        x = self.out_norm(x)
        mask_emb = self.mask_embed(x)
        return SegPrediction(pixel, mask_emb, self.class_embed(x), mask_logits_from_embeddings(mask_emb, pixel))


def box_cxcywh_to_xyxy(b):
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b):
    x1, y1, x2, y2 = b.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def region_average_pool(feature, boxes):
    """Area-weighted mean of ``feature`` (B, C, h, w) over each box (B, R, 4, normalized cxcywh).

    Each cell's weight is its exact overlap area with the box (clipped to the
    image), so a constant field pools to that constant for any box geometry.
    """
    b, c, h, w = feature.shape
    xyxy = box_cxcywh_to_xyxy(boxes).clamp(0.0, 1.0)
    x1, y1, x2, y2 = (xyxy[..., i] for i in range(4))
    gx = torch.arange(w, dtype=feature.dtype, device=feature.device)
    gy = torch.arange(h, dtype=feature.dtype, device=feature.device)
    ox = (torch.minimum(x2.unsqueeze(-1) * w, gx + 1) - torch.maximum(x1.unsqueeze(-1) * w, gx)).clamp_min(0)
    oy = (torch.minimum(y2.unsqueeze(-1) * h, gy + 1) - torch.maximum(y1.unsqueeze(-1) * h, gy)).clamp_min(0)
    weights = oy.unsqueeze(-1) * ox.unsqueeze(-2)  # (B, R, h, w)
    total = weights.sum(dim=(-2, -1)).clamp_min(1e-12)
    return torch.einsum("brhw,bchw->brc", weights, feature) / total.unsqueeze(-1)


def apply_box_deltas(boxes, deltas):
    cx, cy, w, h = boxes.unbind(-1)
    dx, dy, dw, dh = deltas.unbind(-1)
    return torch.stack([
        cx + dx * w,
        cy + dy * h,
        w * torch.exp(dw.clamp(max=_MAX_LOG_SCALE)),
        h * torch.exp(dh.clamp(max=_MAX_LOG_SCALE)),
    ], dim=-1)


class DynamicInteraction(nn.Module):
    """A proposal's feature generates two small matrices applied to its pooled region feature."""

    def __init__(self, channels, dynamic_dim=16):
        super().__init__()
        self.channels = channels
        self.dynamic_dim = dynamic_dim
        self.param_gen = nn.Linear(channels, 2 * channels * dynamic_dim)
        self.norm1 = nn.LayerNorm(dynamic_dim)
        self.norm2 = nn.LayerNorm(channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, proposal_feat, region_feat):
        c, d = self.channels, self.dynamic_dim
        params = self.param_gen(proposal_feat)
        w1 = params[..., : c * d].reshape(*params.shape[:-1], c, d)
        w2 = params[..., c * d:].reshape(*params.shape[:-1], d, c)
        x = F.relu(self.norm1(torch.einsum("brc,brcd->brd", region_feat, w1)))
        x = F.relu(self.norm2(torch.einsum("brd,brdc->brc", x, w2)))
        return self.out(x)


class CascadeStage(nn.Module):
    def __init__(self, channels, num_classes, num_heads=4, dynamic_dim=16):
        super().__init__()
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = MultiHeadAttention(channels, num_heads)
        self.interact = DynamicInteraction(channels, dynamic_dim)
        self.norm_inter = nn.LayerNorm(channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels, 4 * channels)
        self.cls = nn.Linear(channels, num_classes + 1)
        self.delta = nn.Linear(channels, 4)
        with torch.no_grad():
            self.delta.weight.mul_(0.1)
            self.delta.bias.zero_()

    def forward(self, pyr: PyramidFeatures, boxes, feats, detach_boxes=True):
        y = self.norm_self(feats)
        feats = feats + self.self_attn(y, y)
        pool_boxes = boxes.detach() if detach_boxes else boxes
        region = torch.stack([region_average_pool(p, pool_boxes) for p in pyr]).mean(dim=0)
        feats = self.norm_inter(feats + self.interact(feats, region))
        feats = feats + self.ffn(self.norm_ffn(feats))
        new_boxes = apply_box_deltas(boxes, self.delta(feats))
        return new_boxes, self.cls(feats), feats


class DetHead(nn.Module):
    """Learnable proposal boxes refined by a cascade of dynamic-interaction stages.

    ``detach_boxes`` stops gradients through box coordinates used for pooling
    and between stages (the usual training setting); turning it off makes the
    autodiff gradient that of the plain composed function.
    """

    def __init__(self, channels, num_classes, num_proposals=50, num_stages=2, num_heads=4, dynamic_dim=16):
        super().__init__()
        self.num_classes = num_classes
        self.num_proposals = num_proposals
        init = torch.cat([
            torch.rand(num_proposals, 2) * 0.8 + 0.1,
            torch.rand(num_proposals, 2) * 0.3 + 0.1,
        ], dim=1)
        self.proposal_boxes = nn.Parameter(init)
        self.proposal_features = nn.Parameter(torch.randn(num_proposals, channels) * 0.02)
        self.stages = nn.ModuleList(
            CascadeStage(channels, num_classes, num_heads, dynamic_dim) for _ in range(num_stages)
        )
        self.detach_boxes = True

    def forward(self, pyr: PyramidFeatures) -> DetPrediction:
        b = pyr.p5.shape[0]
        boxes = self.proposal_boxes.unsqueeze(0).expand(b, -1, -1)
        feats = self.proposal_features.unsqueeze(0).expand(b, -1, -1)
        outputs = []
        logits = None
        for stage in self.stages:
            # boxes are re-detached between stages; only the deltas carry gradient
            boxes, logits, feats = stage(pyr, boxes, feats, self.detach_boxes)
            outputs.append((boxes, logits))
            if self.detach_boxes and stage is not self.stages[-1]:
                boxes = boxes.detach()
        return DetPrediction(boxes, logits, tuple(outputs))
