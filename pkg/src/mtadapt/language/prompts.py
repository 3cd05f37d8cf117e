"""Class-text feature generators: handcrafted templates, template ensembles, learned contexts."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from ..exceptions import PromptError
from .encoder import TextEncoder
from .tokenizer import bigram_ids

PLACEHOLDERS = ("[CLASS]", "[CLS]")
DEFAULT_TEMPLATE = "there is a [CLASS] in the scene."
DEFAULT_TEMPLATES = (
    "there is a [CLASS] in the scene.",
    "there is the [CLASS] in the scene.",
    "a photo of a [CLASS].",
    "a photo of the [CLASS] on the road.",
    "a driving scene with a [CLASS].",
)
DEFAULT_CONTEXT_LENGTH = 16


def _fill(template, name):
    for ph in PLACEHOLDERS:
        if ph in template:
            return template.replace(ph, name)
    raise PromptError(f"template {template!r} has no [CLASS] placeholder")


def handcrafted_prompt_features(encoder: TextEncoder, template, names):
    """Unit-norm ``(N, D)`` text features for ``template`` filled with each class name."""
    texts = [_fill(template, n) for n in names]
    return F.normalize(encoder.encode_text(texts), dim=-1)


def ensemble_prompt_features(encoder: TextEncoder, templates, names):
    templates = list(templates)
    if not templates:
        raise PromptError("at least one template is required")
    feats = torch.stack([handcrafted_prompt_features(encoder, t, names) for t in templates])
    return F.normalize(feats.mean(dim=0), dim=-1)


class PromptContext(nn.Module):
    """Learnable context vectors prepended to class-name embeddings for one task."""

    def __init__(self, task, length=DEFAULT_CONTEXT_LENGTH, dim=32, trainable=True):
        super().__init__()
        self.task = task
        self.vectors = nn.Parameter(torch.randn(length, dim) * 0.02, requires_grad=trainable)

    @property
    def length(self):
        return self.vectors.shape[0]


def prompt_sequences(encoder: TextEncoder, ctx: PromptContext, names):
    """Embedding sequences ``[SOT, v_1..v_L, name bigrams, EOT]`` padded to a batch.

    Returns ``(embeddings (N, T, D), last_index (N,))``.
    """
    sot, eot = encoder.sentinel_embeddings()
    rows, last = [], []
    for name in names:
        ids = torch.as_tensor(bigram_ids(name), dtype=torch.long)
        name_emb = encoder.token_embedding(ids)
        seq = torch.cat([sot[None], ctx.vectors.to(sot.dtype), name_emb, eot[None]], dim=0)
        if seq.shape[0] > encoder.max_len:
            raise PromptError(
                f"context length {ctx.length} + {len(ids)} name tokens exceeds max context {encoder.max_len}"
            )
        rows.append(seq)
        last.append(seq.shape[0] - 1)
    t = max(r.shape[0] for r in rows)
    batch = torch.stack([F.pad(r, (0, 0, 0, t - r.shape[0])) for r in rows])
    return batch, torch.tensor(last)


def task_prompt_features(encoder: TextEncoder, ctx: PromptContext, names):
    """Unit-norm ``(N, D)`` features of ``[v^t ; n_i]``, differentiable in ``ctx.vectors`` only."""
    seqs, last = prompt_sequences(encoder, ctx, names)
    return F.normalize(encoder.encode_embeddings(seqs, last), dim=-1)
