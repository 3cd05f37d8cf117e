"""Character-bigram tokenizer over a fixed alphabet."""
from __future__ import annotations

from ..exceptions import PromptError

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 .,'-"
PAD, SOT, EOT, UNK = 0, 1, 2, 3
_OFFSET = 4
MAX_CONTEXT = 77
VOCAB_SIZE = _OFFSET + len(ALPHABET) ** 2

_INDEX = {c: i for i, c in enumerate(ALPHABET)}


def bigram_ids(text: str):
    """Token ids of the overlapping character bigrams of ``text`` (no sentinels).

    Single-character strings are padded with a space; unknown characters map to UNK.
    """
    text = text.lower()
    if len(text) == 1:
        text += " "
    ids = []
    for a, b in zip(text, text[1:]):
        if a in _INDEX and b in _INDEX:
            ids.append(_OFFSET + _INDEX[a] * len(ALPHABET) + _INDEX[b])
        else:
            ids.append(UNK)
    return ids


def tokenize(text: str, max_len: int = MAX_CONTEXT):
    """``[SOT] + bigrams + [EOT]``; raises :class:`PromptError` when too long."""
    ids = [SOT] + bigram_ids(text) + [EOT]
    if len(ids) > max_len:
        raise PromptError(f"prompt {text!r} needs {len(ids)} tokens, max context is {max_len}")
    return ids
