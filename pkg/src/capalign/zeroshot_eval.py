"""Zero-shot concept classification: prompt scoring, ROC curves, AUC report.

Each concept is turned into the text prompt "This is {concept}", embedded by
the text tower, and scored against every image embedding by cosine
similarity.  Per-concept ROC AUC uses the tie-aware Mann-Whitney rank
statistic (ties get half credit); concepts with no positives or no negatives
are reported without an AUC and excluded from the mean.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .tokenizer import DEFAULT_CONTEXT_LENGTH, Vocabulary, tokenize
from .two_tower import TwoTowerModel, embed_image, embed_text

PROMPT_PREFIX = "This is "


class EmptyConcept(Exception):
    """A concept name was empty."""


class DimensionMismatch(Exception):
    """Annotation feature vectors do not match the model's image dimension."""


class DegenerateLabels(Exception):
    """Labels are all-positive or all-negative, so AUC is undefined."""


@dataclass
class ConceptAnnotations:
    """Concept list plus per-image features and binary label vectors."""

    concepts: list[str]
    image_ids: list[str]
    features: np.ndarray  # (n_images, d_img)
    labels: np.ndarray  # (n_images, n_concepts) of 0/1

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.image_ids)
        if len(set(self.image_ids)) != n:
            raise ValueError("image_ids must be unique")
        if self.features.shape[0] != n or self.labels.shape != (n, len(self.concepts)):
            raise ValueError("features/labels shapes disagree with ids/concepts")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass(frozen=True)
class RocCurve:
    """Threshold-sweep ROC points from (0,0) to (1,1) and the tie-aware AUC."""

    points: tuple[tuple[float, float], ...]
    auc: float


@dataclass(frozen=True)
class ConceptRow:
    concept: str
    n_true: int
    auc: float | None  # None when the concept is degenerate in this set


@dataclass(frozen=True)
class ConceptEvalReport:
    rows: tuple[ConceptRow, ...]
    mean_auc: float | None


def concept_prompt(concept: str) -> str:
    """The zero-shot query text for a concept, applied verbatim (no sanitizing)."""
    if not concept:
        raise EmptyConcept("concept name is empty")
    return PROMPT_PREFIX + concept


def _tied_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve and AUC for binary labels scored by a real-valued ranking.

    AUC is the Mann-Whitney statistic: the fraction of (positive, negative)
    pairs ranked correctly, with half credit for ties.  Curve points come
    from a descending threshold sweep over distinct scores, so tied groups
    appear as diagonal segments and the trapezoidal area equals the AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positives of {len(labels)}")

    ranks = _tied_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    points = [(0.0, 0.0)]
    order = np.argsort(-scores, kind="stable")
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        group = labels[order[i : j + 1]]
        tp += int(group.sum())
        fp += len(group) - int(group.sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j + 1
    return RocCurve(points=tuple(points), auc=float(auc))


def score_images(
    model: TwoTowerModel,
    annotations: ConceptAnnotations,
    vocab: Vocabulary,
    context_length: int = DEFAULT_CONTEXT_LENGTH,
) -> np.ndarray:
    """Cosine similarity of every image against every concept prompt.

    Returns a (n_images, n_concepts) matrix of values in [-1, 1].
    """
    if annotations.features.shape[1] != model.d_img:
        raise DimensionMismatch(
            f"features have dim {annotations.features.shape[1]}, model expects {model.d_img}"
        )
    text_emb = np.stack(
        [
            embed_text(model, tokenize(concept_prompt(c), vocab, context_length))
            for c in annotations.concepts
        ]
    )
    image_emb = np.stack(
        [embed_image(model, f) for f in annotations.features]
    )
    return np.clip(image_emb @ text_emb.T, -1.0, 1.0)


def evaluate(
    model: TwoTowerModel,
    annotations: ConceptAnnotations,
    vocab: Vocabulary,
    context_length: int = DEFAULT_CONTEXT_LENGTH,
) -> ConceptEvalReport:
    """Per-concept positive counts and AUCs, plus the mean over evaluable concepts."""
    scores = score_images(model, annotations, vocab, context_length)
    rows = []
    for c, concept in enumerate(annotations.concepts):
        labels = annotations.labels[:, c]
        n_true = int(labels.sum())
        try:
            auc = roc_auc(scores[:, c], labels).auc
        except DegenerateLabels:
            auc = None
        rows.append(ConceptRow(concept=concept, n_true=n_true, auc=auc))
    evaluable = [row.auc for row in rows if row.auc is not None]
    mean_auc = float(np.mean(evaluable)) if evaluable else None
    return ConceptEvalReport(rows=tuple(rows), mean_auc=mean_auc)


# --- file formats -----------------------------------------------------------


def load_annotations(path) -> ConceptAnnotations:
    """JSONL: a {"concepts": [...]} header record, then one record per image."""
    concepts: list[str] | None = None
    image_ids: list[str] = []
    features: list[list[float]] = []
    labels: list[list[int]] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            if concepts is None:
                if "concepts" not in record:
                    raise ValueError(f"{path}: first record must list the concepts")
                concepts = [str(c) for c in record["concepts"]]
                continue
            image_ids.append(str(record["image_id"]))
            features.append([float(v) for v in record["features"]])
            labels.append([int(v) for v in record["labels"]])
    if concepts is None or not image_ids:
        raise ValueError(f"{path}: no annotation records")
    return ConceptAnnotations(
        concepts=concepts,
        image_ids=image_ids,
        features=np.array(features),
        labels=np.array(labels),
    )


def write_report(report: ConceptEvalReport, path) -> None:
    """Report CSV: one (concept, n_true, auc) row per concept, then a mean row.

    Degenerate concepts keep their row but leave the auc cell empty.
    """
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["concept", "n_true", "auc"])
        for row in report.rows:
            writer.writerow(
                [row.concept, row.n_true, "" if row.auc is None else repr(row.auc)]
            )
        writer.writerow(
            ["mean", "", "" if report.mean_auc is None else repr(report.mean_auc)]
        )
