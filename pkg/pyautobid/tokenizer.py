"""Small word-level tokenizer for reasoning text."""

from __future__ import annotations

import logging
import re
import string
from collections import Counter
from collections.abc import Iterable
from typing import Any

import numpy as np

_LOGGER = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
SPECIAL_TOKENS = ("<pad>", "<unk>")

# digits become one token each so any number is representable
TOKEN_RE = re.compile(r"\d|[A-Za-z_]+|[^\sA-Za-z_\d]")
BASE_CHARS = tuple(sorted(set(string.ascii_letters + string.digits + string.punctuation)))


def split_tokens(text: str) -> list[str]:
    """Split text into words, single digits and single punctuation marks."""
    return TOKEN_RE.findall(text)


class Tokenizer:
    """Maps text to ids over a fixed vocabulary; unknown words map to <unk>."""

    def __init__(self, vocab: Iterable[str]) -> None:
        self.vocab = list(vocab)
        if tuple(self.vocab[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        self._ids = {token: i for i, token in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    def __repr__(self) -> str:
        """Return representation of Tokenizer object."""
        return f"Tokenizer(vocab_size={len(self)})"

    @classmethod
    def fit(cls, corpus: Iterable[str], vocab_size: int = 2048) -> Tokenizer:
        """
        Build a vocabulary from a corpus.

        Special tokens and every ASCII letter, digit and punctuation mark are
        always present; the remaining slots go to the most frequent words
        (ties broken alphabetically).
        """
        base = [*SPECIAL_TOKENS, *BASE_CHARS]
        if vocab_size < len(base):
            raise ValueError(f"vocab_size must be at least {len(base)}, got {vocab_size}")
        counts: Counter[str] = Counter()
        for text in corpus:
            counts.update(token for token in split_tokens(text) if len(token) > 1)
        ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        words = [word for word, _ in ranked[: vocab_size - len(base)]]
        _LOGGER.debug("Tokenizer vocabulary: %s base tokens, %s words", len(base), len(words))
        return cls([*base, *words])

    def encode(self, text: str, max_len: int | None = None) -> np.ndarray:
        """Return token ids; when too long, only the last max_len ids are kept."""
        ids = [self._ids.get(token, UNK_ID) for token in split_tokens(text)]
        if max_len is not None and len(ids) > max_len:
            ids = ids[-max_len:]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        """Return the tokens of ids joined by spaces (for debugging)."""
        return " ".join(self.vocab[i] for i in ids if i != PAD_ID)

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-compatible dict."""
        return {"vocab": self.vocab}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Tokenizer:
        """Rebuild from to_dict() output."""
        return cls(data["vocab"])
