"""Corpus preprocessing: span records -> main text -> prompt-completion pairs.

The raw input is a flat list of text spans extracted from source documents,
each carrying font metadata.  Body text is isolated by keeping only spans in
the document's dominant (font, size) pair; the surviving text is segmented
into sentences and windowed into prompt-completion pairs (one prompt
sentence, four completion sentences).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field


class EmptyCorpus(Exception):
    """No spans survive page exclusion."""


@dataclass(frozen=True)
class DocumentSpan:
    """One extracted text run with font and position metadata."""

    doc_id: str
    page: int
    span_index: int
    text: str
    font_name: str
    font_size: float

    def __post_init__(self):
        if self.page < 1:
            raise ValueError(f"page must be >= 1, got {self.page}")
        if self.span_index < 0:
            raise ValueError(f"span_index must be >= 0, got {self.span_index}")
        if not self.text.strip():
            raise ValueError("span text is empty after trimming")
        if self.font_size <= 0:
            raise ValueError(f"font_size must be > 0, got {self.font_size}")


@dataclass(frozen=True)
class PageExclusionRule:
    """Inclusive page ranges to drop from one document before filtering."""

    doc_id: str
    page_ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for start, end in self.page_ranges:
            if start > end:
                raise ValueError(f"invalid page range ({start}, {end})")
        object.__setattr__(self, "page_ranges", _normalize_ranges(self.page_ranges))

    def excludes(self, page: int) -> bool:
        return any(start <= page <= end for start, end in self.page_ranges)


def _normalize_ranges(ranges) -> tuple[tuple[int, int], ...]:
    """Sort and merge overlapping or adjacent inclusive ranges."""
    merged: list[tuple[int, int]] = []
    for start, end in sorted(ranges):
        if merged and start <= merged[-1][1] + 1:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return tuple(merged)


@dataclass(frozen=True)
class PromptCompletionPair:
    """One prompt sentence plus its four following sentences."""

    doc_id: str
    prompt: str
    completion: str

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt is empty")
        if not self.completion:
            raise ValueError("completion is empty")


@dataclass
class CorpusStats:
    """Per-document pair counts plus the corpus total."""

    rows: list[tuple[str, int]] = field(default_factory=list)
    total: int = 0


_SENTENCE_TERMINATORS = ".!?"


def _excluded(span: DocumentSpan, exclusions: list[PageExclusionRule]) -> bool:
    return any(
        rule.doc_id == span.doc_id and rule.excludes(span.page) for rule in exclusions
    )


def filter_dominant_font(
    spans: list[DocumentSpan], exclusions: list[PageExclusionRule]
) -> list[DocumentSpan]:
    """Keep only spans set in the modal (font_name, font_size) pair.

    Spans on excluded pages are dropped before the mode is counted.  Ties on
    span count are broken toward the larger font_size, then the
    lexicographically smaller font_name, so output is deterministic.  Input
    order is preserved.

    Raises EmptyCorpus if no spans survive exclusion.
    """
    survivors = [s for s in spans if not _excluded(s, exclusions)]
    if not survivors:
        raise EmptyCorpus("no spans survive page exclusion")
    counts = Counter((s.font_name, s.font_size) for s in survivors)
    # min over (-count, -size, name): most frequent, then largest, then a-z.
    dominant = min(
        counts.items(), key=lambda kv: (-kv[1], -kv[0][1], kv[0][0])
    )[0]
    return [s for s in survivors if (s.font_name, s.font_size) == dominant]


def segment_sentences(text: str) -> list[str]:
    """Split text into sentences at '.', '!', '?' followed by whitespace or end.

    The terminator stays with its sentence; fragments are stripped and empty
    ones dropped.  Text with no terminator is returned as a single sentence.
    """
    sentences: list[str] = []
    start = 0
    n = len(text)
    for i, ch in enumerate(text):
        if ch in _SENTENCE_TERMINATORS and (i + 1 == n or text[i + 1].isspace()):
            piece = text[start : i + 1].strip()
            if piece:
                sentences.append(piece)
            start = i + 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def build_pairs(sentences: list[str], doc_id: str) -> list[PromptCompletionPair]:
    """Window sentences into disjoint groups of 5: prompt + 4-sentence completion.

    A trailing partial window yields no pair, so the count is always
    floor(len(sentences) / 5).
    """
    pairs = []
    for i in range(0, len(sentences) - 4, 5):
        pairs.append(
            PromptCompletionPair(
                doc_id=doc_id,
                prompt=sentences[i],
                completion=" ".join(sentences[i + 1 : i + 5]),
            )
        )
    return pairs


def corpus_stats(pairs: list[PromptCompletionPair]) -> CorpusStats:
    """Count pairs per document (rows in first-appearance order) plus a total."""
    counts: dict[str, int] = {}
    for pair in pairs:
        counts[pair.doc_id] = counts.get(pair.doc_id, 0) + 1
    return CorpusStats(rows=list(counts.items()), total=len(pairs))


def document_text(spans: list[DocumentSpan]) -> str:
    """Concatenate one document's span texts in (page, span_index) order.

    Sentences may flow across page boundaries; spans are joined with single
    spaces.
    """
    ordered = sorted(spans, key=lambda s: (s.page, s.span_index))
    return " ".join(s.text for s in ordered)


def extract_pairs(
    spans: list[DocumentSpan], exclusions: list[PageExclusionRule]
) -> list[PromptCompletionPair]:
    """Full corpus stage: per-document font filtering, segmentation, windowing.

    The dominant font is computed independently for each document (documents
    are typeset independently, so a global mode would let a large document's
    body font swallow a small one).  A document whose pages are all excluded
    contributes nothing; EmptyCorpus is raised only when that happens to
    every document.
    """
    by_doc: dict[str, list[DocumentSpan]] = {}
    for span in spans:
        by_doc.setdefault(span.doc_id, []).append(span)

    pairs: list[PromptCompletionPair] = []
    surviving_docs = 0
    for doc_id, doc_spans in by_doc.items():
        try:
            kept = filter_dominant_font(doc_spans, exclusions)
        except EmptyCorpus:
            continue
        surviving_docs += 1
        sentences = segment_sentences(document_text(kept))
        pairs.extend(build_pairs(sentences, doc_id))
    if by_doc and surviving_docs == 0:
        raise EmptyCorpus("every document was fully excluded")
    return pairs


# --- file formats ---------------------------------------------------------

_SPAN_FIELDS = ("doc_id", "page", "span_index", "text", "font_name", "font_size")


def load_spans(path) -> list[DocumentSpan]:
    """Read a JSONL span file; validates fields and (doc_id, page, span_index) uniqueness."""
    spans = []
    seen: set[tuple[str, int, int]] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            record = json.loads(line)
            missing = [k for k in _SPAN_FIELDS if k not in record]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            span = DocumentSpan(
                doc_id=str(record["doc_id"]),
                page=int(record["page"]),
                span_index=int(record["span_index"]),
                text=str(record["text"]),
                font_name=str(record["font_name"]),
                font_size=float(record["font_size"]),
            )
            key = (span.doc_id, span.page, span.span_index)
            if key in seen:
                raise ValueError(f"{path}:{lineno}: duplicate span {key}")
            seen.add(key)
            spans.append(span)
    return spans


def load_exclusions(path) -> list[PageExclusionRule]:
    """Read a JSONL exclusion file of {doc_id, page_ranges: [[start, end], ...]}."""
    rules = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            rules.append(
                PageExclusionRule(
                    doc_id=str(record["doc_id"]),
                    page_ranges=tuple(
                        (int(start), int(end)) for start, end in record["page_ranges"]
                    ),
                )
            )
    return rules


def write_pairs(pairs: list[PromptCompletionPair], path) -> None:
    """Write pairs as JSONL with fields doc_id, prompt, completion."""
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            f.write(
                json.dumps(
                    {
                        "doc_id": pair.doc_id,
                        "prompt": pair.prompt,
                        "completion": pair.completion,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_pairs(path) -> list[PromptCompletionPair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            pairs.append(
                PromptCompletionPair(
                    doc_id=str(record["doc_id"]),
                    prompt=str(record["prompt"]),
                    completion=str(record["completion"]),
                )
            )
    return pairs
