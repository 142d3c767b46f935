"""Shared test oracles and fixture builders.

Kept independent of the implementation paths they check: gradients come from
central finite differences, AUC from the O(n^2) pairwise definition.
"""

import json
from pathlib import Path

import numpy as np

from capalign.tokenizer import TokenSequence, Vocabulary, tokenize
from capalign.two_tower import Batch, TwoTowerModel, contrastive_loss

WORDS = [
    "a", "the", "this", "is", "on", "with", "left", "leg", "red", "itchy",
    "skin", "lesion", "plaque", "nodule", "vesicle", "ulcer", "scale",
    "erosion", "papule", "macule", "crust", "erythema", "derm", ".", ",",
]

CLUSTER_NAMES = ["plaque", "nodule", "vesicle", "ulcer"]


def make_sequence(vocab: Vocabulary, content_ids, context_length: int = 12) -> TokenSequence:
    """Hand-assemble a TokenSequence without going through tokenize()."""
    ids = [vocab.start_id, *content_ids, vocab.end_id]
    true_length = len(ids)
    ids.extend([vocab.pad_id] * (context_length - true_length))
    return TokenSequence(ids=tuple(ids), true_length=true_length)


def brute_force_auc(scores, labels) -> float:
    """Tie-aware AUC straight from the definition: loop over (pos, neg) pairs."""
    pos = [s for s, label in zip(scores, labels) if label == 1]
    neg = [s for s, label in zip(scores, labels) if label == 0]
    credit = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                credit += 1.0
            elif p == q:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def finite_difference_grads(model: TwoTowerModel, batch: Batch, h: float = 1e-5):
    """Central-difference gradient of the contrastive loss per parameter."""
    base = {k: np.array(v, dtype=np.float64) for k, v in model.params().items()}

    def loss_at(params) -> float:
        model.set_params({k: np.array(v) for k, v in params.items()})
        value, _ = contrastive_loss(model, batch)
        return value

    grads = {}
    for key in base:
        grad = np.zeros_like(base[key])
        for index in np.ndindex(base[key].shape):
            bumped = {k: v.copy() for k, v in base.items()}
            bumped[key][index] = base[key][index] + h
            up = loss_at(bumped)
            bumped[key][index] = base[key][index] - h
            down = loss_at(bumped)
            grad[index] = (up - down) / (2.0 * h)
        grads[key] = grad
    model.set_params({k: np.array(v) for k, v in base.items()})
    return grads


def max_relative_error(analytic: dict, numeric: dict) -> float:
    worst = 0.0
    for key, a in analytic.items():
        n = numeric[key]
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float((np.abs(a - n) / scale).max()))
    return worst


def random_gradcheck_instance(rng, vocab, d_img=3, d_tok=3, d_emb=2, n=3):
    model = TwoTowerModel.initialize(
        d_img=d_img, d_tok=d_tok, d_emb=d_emb,
        vocab_size=len(vocab), seed=int(rng.integers(1 << 31)),
    )
    model.log_temperature = float(rng.uniform(0.0, 3.0))
    sequences = [
        make_sequence(vocab, rng.integers(0, len(vocab), size=rng.integers(1, 5)).tolist())
        for _ in range(n)
    ]
    batch = Batch(rng.normal(size=(n, d_img)), sequences)
    return model, batch


def write_jsonl(path: Path, records) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def write_config(directory: Path, entries: dict, name: str = "pipeline.cfg") -> Path:
    path = directory / name
    lines = ["# pipeline test config"]
    lines += [f"{key} = {value}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def make_cluster_dataset(seed: int, n_samples: int = 200, noise: float = 0.3):
    """Separable toy corpus: 4 feature clusters whose captions name the cluster.

    Returns (vocab, dataset, features, labels) where labels is the one-hot
    cluster membership over CLUSTER_NAMES.
    """
    vocab = Vocabulary.from_tokens(["this", "is"] + CLUSTER_NAMES)
    rng = np.random.default_rng(seed)
    centroids = 3.0 * np.eye(4)
    features, sequences, labels = [], [], []
    for i in range(n_samples):
        c = i % 4
        features.append(centroids[c] + rng.normal(scale=noise, size=4))
        sequences.append(tokenize(CLUSTER_NAMES[c], vocab, 77))
        one_hot = [0, 0, 0, 0]
        one_hot[c] = 1
        labels.append(one_hot)
    dataset = list(zip(features, sequences))
    return vocab, dataset, np.stack(features), np.array(labels)
