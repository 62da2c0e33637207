"""Tokenization, vocabulary, and answer normalization.

The tokenizer is deliberately simple and dependency-free: lowercase, then
take maximal alphanumeric runs (splitting on whitespace and punctuation).
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError

PAD, UNK, EOS = "<PAD>", "<UNK>", "<EOS>"
PAD_ID, UNK_ID, EOS_ID = 0, 1, 2
_RESERVED = (PAD, UNK, EOS)

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    """Dense token <-> id map with reserved <PAD>=0, <UNK>=1, <EOS>=2."""

    id_to_token: list[str] = field(default_factory=lambda: list(_RESERVED))
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:3]) != _RESERVED:
            raise DataError("vocab must start with the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate token in vocab")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Vocabulary from an iterable of texts, ids in first-appearance order.

        Identical input sequences produce identical id assignments.
        """
        tokens = list(_RESERVED)
        seen = set(_RESERVED)
        for text in texts:
            for tok in tokenize(text):
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    """SQuAD-style normalization: lowercase, strip punctuation and articles,
    collapse whitespace."""
    s = s.lower().translate(_PUNCT_TABLE)
    s = _ARTICLE_RE.sub(" ", s)
    return " ".join(s.split())
