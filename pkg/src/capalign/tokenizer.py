"""Word-level tokenizer with a fixed context-length contract.

Captions are lowercased and split on whitespace and punctuation boundaries
(each punctuation character is its own token), mapped through a vocabulary
with an unknown-token fallback, wrapped in start/end markers, then padded or
truncated to exactly ``context_length`` ids (default 77).  The end token is
always the last non-pad position, so truncation trims content, never the
markers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

DEFAULT_CONTEXT_LENGTH = 77

# Specials occupy the first four vocabulary lines, in this order.
START_TOKEN = "<|start|>"
END_TOKEN = "<|end|>"
PAD_TOKEN = "<|pad|>"
UNK_TOKEN = "<|unk|>"
SPECIAL_TOKENS = (START_TOKEN, END_TOKEN, PAD_TOKEN, UNK_TOKEN)

# A token is a maximal alphanumeric run, or a single non-alnum non-space char.
_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")


class EmptyInput(Exception):
    """Statistics were requested over an empty caption list."""


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token -> id map with four distinct special ids."""

    token_to_id: dict[str, int]
    start_id: int
    end_id: int
    pad_id: int
    unk_id: int

    def __post_init__(self):
        size = len(self.token_to_id)
        ids = sorted(self.token_to_id.values())
        if ids != list(range(size)):
            raise ValueError("vocabulary ids must be dense in [0, size)")
        specials = (self.start_id, self.end_id, self.pad_id, self.unk_id)
        if len(set(specials)) != 4:
            raise ValueError("special ids must be distinct")
        if any(i not in self.token_to_id.values() for i in specials):
            raise ValueError("special ids must be vocabulary members")

    def __len__(self) -> int:
        return len(self.token_to_id)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        """Build a vocabulary from content tokens, prepending the specials."""
        ordered = list(SPECIAL_TOKENS) + list(tokens)
        mapping: dict[str, int] = {}
        for i, token in enumerate(ordered):
            if token in mapping:
                raise ValueError(f"duplicate vocabulary token {token!r}")
            mapping[token] = i
        return cls(
            token_to_id=mapping, start_id=0, end_id=1, pad_id=2, unk_id=3
        )

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        """Load a vocabulary file: one token per line, line number = id, specials first."""
        with open(path, encoding="utf-8") as f:
            lines = [line.rstrip("\n") for line in f]
        while lines and lines[-1] == "":
            lines.pop()
        if lines[:4] != list(SPECIAL_TOKENS):
            raise ValueError(
                f"vocabulary file must begin with the specials {SPECIAL_TOKENS}"
            )
        return cls.from_tokens(lines[4:])

    def to_file(self, path) -> None:
        by_id = sorted(self.token_to_id, key=self.token_to_id.get)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(by_id) + "\n")


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id sequence: start, content, end, then padding."""

    ids: tuple[int, ...]
    true_length: int

    def __post_init__(self):
        if not 2 <= self.true_length <= len(self.ids):
            raise ValueError(
                f"true_length {self.true_length} out of range for {len(self.ids)} ids"
            )

    def content_ids(self) -> tuple[int, ...]:
        """Ids excluding padding (start and end markers included)."""
        return self.ids[: self.true_length]


@dataclass(frozen=True)
class LengthStats:
    mean: float
    std_dev: float
    minimum: float
    lower_quartile: float
    median: float
    upper_quartile: float
    maximum: float
    truncated_fraction: float

    def as_rows(self) -> list[tuple[str, float]]:
        return [
            ("mean", self.mean),
            ("std_dev", self.std_dev),
            ("minimum", self.minimum),
            ("lower_quartile", self.lower_quartile),
            ("median", self.median),
            ("upper_quartile", self.upper_quartile),
            ("maximum", self.maximum),
            ("truncated_fraction", self.truncated_fraction),
        ]


def split_words(text: str) -> list[str]:
    """Split into word and punctuation tokens; whitespace never survives."""
    return _TOKEN_RE.findall(text)


def truncate_words(text: str, max_tokens: int) -> str:
    """Cut text after its max_tokens-th token, preserving original spelling."""
    if max_tokens <= 0:
        return ""
    end = 0
    for count, match in enumerate(_TOKEN_RE.finditer(text), 1):
        end = match.end()
        if count == max_tokens:
            return text[:end]
    return text


def tokenize(
    caption: str, vocab: Vocabulary, context_length: int = DEFAULT_CONTEXT_LENGTH
) -> TokenSequence:
    """Tokenize a caption under the fixed context-length contract.

    Unknown words map to the unknown id.  An empty caption yields
    [start, end, pad, ...] with true_length 2.
    """
    if context_length < 3:
        raise ValueError(f"context_length must be >= 3, got {context_length}")
    words = split_words(caption.lower())
    content = [vocab.token_to_id.get(w, vocab.unk_id) for w in words]
    content = content[: context_length - 2]
    ids = [vocab.start_id, *content, vocab.end_id]
    true_length = len(ids)
    ids.extend([vocab.pad_id] * (context_length - true_length))
    return TokenSequence(ids=tuple(ids), true_length=true_length)


def _nearest_rank(sorted_values: list[int], fraction: float) -> float:
    """Nearest-rank quantile: the ceil(fraction * n)-th smallest value."""
    rank = max(1, math.ceil(fraction * len(sorted_values)))
    return float(sorted_values[rank - 1])


def length_stats(
    captions: list[str], vocab: Vocabulary, context_length: int = DEFAULT_CONTEXT_LENGTH
) -> LengthStats:
    """Summary statistics of tokenized true lengths across a caption corpus.

    Quartiles use the nearest-rank method; std_dev is the population standard
    deviation.  truncated_fraction is the share of captions whose tokenization
    hit the context length.
    """
    if not captions:
        raise EmptyInput("no captions to analyze")
    lengths = sorted(
        tokenize(c, vocab, context_length).true_length for c in captions
    )
    n = len(lengths)
    mean = sum(lengths) / n
    variance = sum((x - mean) ** 2 for x in lengths) / n
    return LengthStats(
        mean=mean,
        std_dev=math.sqrt(variance),
        minimum=float(lengths[0]),
        lower_quartile=_nearest_rank(lengths, 0.25),
        median=_nearest_rank(lengths, 0.50),
        upper_quartile=_nearest_rank(lengths, 0.75),
        maximum=float(lengths[-1]),
        truncated_fraction=sum(x == context_length for x in lengths) / n,
    )
