"""Small frozen causal transformer text encoder."""
from __future__ import annotations

import torch
from torch import nn

from ..exceptions import PromptError
from ..models.attention import SelfAttentionBlock
from .tokenizer import EOT, MAX_CONTEXT, PAD, SOT, VOCAB_SIZE, tokenize


class TextEncoder(nn.Module):
    """Token + position embeddings, causal pre-norm blocks, final-token readout.

    Weights are drawn from ``seed`` at construction and frozen by default.
    """

    def __init__(self, dim=32, num_layers=2, num_heads=4, max_len=MAX_CONTEXT, seed=0, frozen=True):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.token_embedding = nn.Embedding(VOCAB_SIZE, dim)
            nn.init.normal_(self.token_embedding.weight, std=0.02 * dim ** 0.5)
            self.positional_embedding = nn.Parameter(torch.randn(max_len, dim) * 0.01)
            self.blocks = nn.ModuleList(SelfAttentionBlock(dim, num_heads) for _ in range(num_layers))
            self.ln_final = nn.LayerNorm(dim)
            self.projection = nn.Linear(dim, dim, bias=False)
        if frozen:
            self.requires_grad_(False)

    @property
    def frozen(self):
        return not any(p.requires_grad for p in self.parameters())

    def causal_mask(self, n, device=None):
        return torch.triu(torch.ones(n, n, dtype=torch.bool, device=device), diagonal=1)

    def encode_embeddings(self, x, last_index):
        """Encode ``(B, T, D)`` input embeddings; read out position ``last_index`` (B,)."""
        t = x.shape[1]
        if t > self.max_len:
            raise PromptError(f"sequence of {t} tokens exceeds max context {self.max_len}")
        x = x + self.positional_embedding[:t]
        mask = self.causal_mask(t, x.device)
        for block in self.blocks:
            x = block(x, attn_mask=mask)
        x = self.ln_final(x)
        rows = x[torch.arange(x.shape[0], device=x.device), torch.as_tensor(last_index, device=x.device)]
        return self.projection(rows)

    def encode_token_ids(self, sequences):
        """Encode a list of token-id lists (each ending in EOT)."""
        for seq in sequences:
            if len(seq) > self.max_len:
                raise PromptError(f"sequence of {len(seq)} tokens exceeds max context {self.max_len}")
        t = max(len(s) for s in sequences)
        ids = torch.full((len(sequences), t), PAD, dtype=torch.long)
        for i, s in enumerate(sequences):
            ids[i, : len(s)] = torch.as_tensor(s)
        last = torch.tensor([len(s) - 1 for s in sequences])
        return self.encode_embeddings(self.token_embedding(ids), last)

    def forward(self, tokens):
        """Encode one token-id sequence to a ``(D,)`` vector."""
        return self.encode_token_ids([list(tokens)])[0]

    def encode_text(self, texts):
        return self.encode_token_ids([tokenize(t, self.max_len) for t in texts])

    def sentinel_embeddings(self):
        return self.token_embedding.weight[SOT], self.token_embedding.weight[EOT]

    def load_external(self, tensors: dict):
        """Load externally supplied weights (name -> array), keeping the freeze state."""
        frozen = self.frozen
        state = {k: torch.as_tensor(v) for k, v in tensors.items()}
        missing, unexpected = self.load_state_dict(state, strict=False)
        if frozen:
            self.requires_grad_(False)
        return list(missing), list(unexpected)


def text_encode(tokens, encoder: TextEncoder | None = None):
    encoder = encoder if encoder is not None else TextEncoder()
    return encoder(tokens)
