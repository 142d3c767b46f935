"""Two-tower contrastive model: affine encoders, symmetric loss, Adam trainer.

Image features and mean-pooled caption token embeddings are projected into a
shared space, L2-normalized, and compared by cosine similarity scaled by a
learnable (clamped) temperature.  Training minimizes the symmetric
cross-entropy over the batch similarity matrix with hand-derived analytic
gradients, Adam updates, and a cosine-annealing-with-warm-restarts learning
rate.  Everything is float64 numpy and fully deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import TokenSequence

NORM_FLOOR = 1e-12
MAX_LOGIT_SCALE = 100.0
INIT_LOG_TEMPERATURE = math.log(1.0 / 0.07)

CHECKPOINT_MAGIC = "capalign-checkpoint v1"


class DegenerateEmbedding(Exception):
    """A projection produced a (near-)zero vector that cannot be normalized."""


class ShapeMismatch(Exception):
    """Parameter, gradient, or input shapes disagree."""


class DatasetTooSmall(Exception):
    """Training requires at least one full batch."""


@dataclass
class TwoTowerModel:
    """Learnable parameters of both towers plus the log temperature."""

    w_img: np.ndarray  # (d_emb, d_img)
    b_img: np.ndarray  # (d_emb,)
    embeddings: np.ndarray  # (vocab_size, d_tok)
    w_txt: np.ndarray  # (d_emb, d_tok)
    b_txt: np.ndarray  # (d_emb,)
    log_temperature: float

    @property
    def d_emb(self) -> int:
        return self.w_img.shape[0]

    @property
    def d_img(self) -> int:
        return self.w_img.shape[1]

    @property
    def d_tok(self) -> int:
        return self.embeddings.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def logit_scale(self) -> float:
        """exp(log_temperature) clamped so logits never explode."""
        return min(math.exp(self.log_temperature), MAX_LOGIT_SCALE)

    def validate(self) -> None:
        if min(self.d_emb, self.d_img, self.d_tok, self.vocab_size) < 1:
            raise ShapeMismatch("all dimensions must be >= 1")
        expected = {
            "w_img": (self.d_emb, self.d_img),
            "b_img": (self.d_emb,),
            "embeddings": (self.vocab_size, self.d_tok),
            "w_txt": (self.d_emb, self.d_tok),
            "b_txt": (self.d_emb,),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ShapeMismatch(f"{name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} contains non-finite values")
        if not math.isfinite(self.log_temperature):
            raise ValueError("log_temperature is not finite")

    def params(self) -> dict[str, np.ndarray]:
        return {
            "w_img": self.w_img,
            "b_img": self.b_img,
            "embeddings": self.embeddings,
            "w_txt": self.w_txt,
            "b_txt": self.b_txt,
            "log_temperature": np.array(self.log_temperature),
        }

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.w_img = params["w_img"]
        self.b_img = params["b_img"]
        self.embeddings = params["embeddings"]
        self.w_txt = params["w_txt"]
        self.b_txt = params["b_txt"]
        self.log_temperature = float(params["log_temperature"])

    @classmethod
    def initialize(
        cls, d_img: int, d_tok: int, d_emb: int, vocab_size: int, seed: int
    ) -> "TwoTowerModel":
        """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per tensor."""
        rng = np.random.default_rng(seed)
        img_bound = 1.0 / math.sqrt(d_img)
        tok_bound = 1.0 / math.sqrt(d_tok)
        model = cls(
            w_img=rng.uniform(-img_bound, img_bound, size=(d_emb, d_img)),
            b_img=rng.uniform(-img_bound, img_bound, size=d_emb),
            embeddings=rng.uniform(-tok_bound, tok_bound, size=(vocab_size, d_tok)),
            w_txt=rng.uniform(-tok_bound, tok_bound, size=(d_emb, d_tok)),
            b_txt=rng.uniform(-tok_bound, tok_bound, size=d_emb),
            log_temperature=INIT_LOG_TEMPERATURE,
        )
        model.validate()
        return model


@dataclass
class Batch:
    """Aligned image features and caption token sequences, N >= 2."""

    image_features: np.ndarray  # (N, d_img)
    token_sequences: list[TokenSequence]

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        if self.image_features.ndim != 2:
            raise ShapeMismatch("image_features must be a (N, d_img) matrix")
        if len(self.image_features) != len(self.token_sequences):
            raise ShapeMismatch("image and text lists must have identical length")
        if len(self.token_sequences) < 2:
            raise ValueError("contrastive batches need N >= 2")

    def __len__(self) -> int:
        return len(self.token_sequences)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    eta_min: float = 0.0
    t_0: int = 0  # cycle length in optimizer steps; 0 means one epoch
    t_mult: int = 1
    epochs: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.t_0 < 0 or self.t_mult < 1 or self.epochs < 0:
            raise ValueError("invalid scheduler or epoch settings")


def _normalize_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < NORM_FLOOR):
        raise DegenerateEmbedding("projection norm below 1e-12")
    return matrix / norms[:, None], norms


def embed_image(model: TwoTowerModel, feature_vector) -> np.ndarray:
    """Project one image feature vector to a unit-norm shared-space embedding."""
    x = np.asarray(feature_vector, dtype=np.float64)
    if x.shape != (model.d_img,):
        raise ShapeMismatch(f"feature vector has shape {x.shape}, expected ({model.d_img},)")
    u = model.w_img @ x + model.b_img
    norm = np.linalg.norm(u)
    if norm < NORM_FLOOR:
        raise DegenerateEmbedding("image projection collapsed to zero")
    return u / norm


def _pool_tokens(model: TwoTowerModel, tokens: TokenSequence) -> np.ndarray:
    ids = np.asarray(tokens.content_ids())
    if ids.min() < 0 or ids.max() >= model.vocab_size:
        raise ShapeMismatch("token id outside the embedding table")
    return model.embeddings[ids].mean(axis=0)


def embed_text(model: TwoTowerModel, tokens: TokenSequence) -> np.ndarray:
    """Mean-pool non-pad token embeddings, project, and L2-normalize."""
    v = model.w_txt @ _pool_tokens(model, tokens) + model.b_txt
    norm = np.linalg.norm(v)
    if norm < NORM_FLOOR:
        raise DegenerateEmbedding("text projection collapsed to zero")
    return v / norm


def _logsumexp_rows(matrix: np.ndarray) -> np.ndarray:
    peak = matrix.max(axis=1)
    return peak + np.log(np.exp(matrix - peak[:, None]).sum(axis=1))


def loss_from_logits(logits: np.ndarray) -> float:
    """Symmetric cross-entropy over an N x N logit matrix, diagonal targets.

    Exposed separately so known logit matrices can be injected in tests.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if logits.shape != (n, n) or n < 2:
        raise ShapeMismatch("logits must be square with N >= 2")
    diag = np.diag(logits)
    row_ce = (_logsumexp_rows(logits) - diag).mean()
    col_ce = (_logsumexp_rows(logits.T) - diag).mean()
    return float((row_ce + col_ce) / 2.0)


@dataclass
class _Forward:
    img: np.ndarray  # (N, d_emb) unit rows
    txt: np.ndarray  # (N, d_emb) unit rows
    img_norms: np.ndarray
    txt_norms: np.ndarray
    pooled: np.ndarray  # (N, d_tok)
    cosine: np.ndarray  # (N, N)
    logits: np.ndarray  # (N, N)
    scale: float


def _forward(model: TwoTowerModel, batch: Batch) -> _Forward:
    if batch.image_features.shape[1] != model.d_img:
        raise ShapeMismatch(
            f"batch features have dim {batch.image_features.shape[1]}, model expects {model.d_img}"
        )
    u = batch.image_features @ model.w_img.T + model.b_img
    img, img_norms = _normalize_rows(u)
    pooled = np.stack([_pool_tokens(model, t) for t in batch.token_sequences])
    v = pooled @ model.w_txt.T + model.b_txt
    txt, txt_norms = _normalize_rows(v)
    cosine = img @ txt.T
    scale = model.logit_scale
    return _Forward(img, txt, img_norms, txt_norms, pooled, cosine, scale * cosine, scale)


def contrastive_loss(model: TwoTowerModel, batch: Batch) -> tuple[float, np.ndarray]:
    """Symmetric contrastive loss and the scaled N x N logit matrix."""
    fwd = _forward(model, batch)
    return loss_from_logits(fwd.logits), fwd.logits


def _softmax_rows(matrix: np.ndarray) -> np.ndarray:
    shifted = np.exp(matrix - matrix.max(axis=1)[:, None])
    return shifted / shifted.sum(axis=1)[:, None]


def loss_gradients(
    model: TwoTowerModel, batch: Batch
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic gradients for every parameter, log_temperature included.

    Backpropagates through the softmax pair, the temperature clamp, both L2
    normalizations, the affine projections, and the token mean-pool.
    """
    fwd = _forward(model, batch)
    n = len(batch)
    loss = loss_from_logits(fwd.logits)

    # d loss / d logits for the symmetric cross-entropy with diagonal targets.
    p_row = _softmax_rows(fwd.logits)
    p_col = _softmax_rows(fwd.logits.T).T
    g_logits = (p_row + p_col - 2.0 * np.eye(n)) / (2.0 * n)

    d_cosine = fwd.scale * g_logits
    d_scale = float((g_logits * fwd.cosine).sum())
    # Clamp: scale is constant at MAX_LOGIT_SCALE once exp(log_t) exceeds it.
    if math.exp(model.log_temperature) > MAX_LOGIT_SCALE:
        d_log_temperature = 0.0
    else:
        d_log_temperature = d_scale * fwd.scale

    d_img_emb = d_cosine @ fwd.txt  # (N, d_emb)
    d_txt_emb = d_cosine.T @ fwd.img

    # Through y = u / ||u||:  du = (g - (g . y) y) / ||u||.
    d_u = (d_img_emb - (d_img_emb * fwd.img).sum(axis=1)[:, None] * fwd.img)
    d_u /= fwd.img_norms[:, None]
    d_v = (d_txt_emb - (d_txt_emb * fwd.txt).sum(axis=1)[:, None] * fwd.txt)
    d_v /= fwd.txt_norms[:, None]

    grads = {
        "w_img": d_u.T @ batch.image_features,
        "b_img": d_u.sum(axis=0),
        "w_txt": d_v.T @ fwd.pooled,
        "b_txt": d_v.sum(axis=0),
        "log_temperature": np.array(d_log_temperature),
    }
    d_pooled = d_v @ model.w_txt  # (N, d_tok)
    d_embeddings = np.zeros_like(model.embeddings)
    for j, tokens in enumerate(batch.token_sequences):
        ids = np.asarray(tokens.content_ids())
        np.add.at(d_embeddings, ids, d_pooled[j] / len(ids))
    grads["embeddings"] = d_embeddings
    return loss, grads


# --- optimizer and scheduler ------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    lr_t: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; moments are updated in place, t >= 1."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    if set(params) != set(grads):
        raise ShapeMismatch("parameter and gradient keys differ")
    updated = {}
    for key, param in params.items():
        grad = grads[key]
        if np.shape(grad) != np.shape(param) or np.shape(state.m[key]) != np.shape(param):
            raise ShapeMismatch(f"shape mismatch for {key!r}")
        state.m[key] = beta1 * state.m[key] + (1.0 - beta1) * grad
        state.v[key] = beta2 * state.v[key] + (1.0 - beta2) * grad * grad
        m_hat = state.m[key] / (1.0 - beta1**t)
        v_hat = state.v[key] / (1.0 - beta2**t)
        updated[key] = param - lr_t * m_hat / (np.sqrt(v_hat) + epsilon)
    return updated


def lr_at(
    step_in_cycle: int, config: TrainConfig, cycle: int = 0, t_0: int | None = None
) -> float:
    """Cosine-annealed learning rate at a position within a restart cycle.

    Cycle ``cycle`` has length t_0 * t_mult**cycle steps; step 0 returns the
    peak rate and step T_i returns eta_min.  ``t_0`` overrides config.t_0
    (the trainer uses this when the config leaves it at the one-epoch default).
    """
    base = config.t_0 if t_0 is None else t_0
    if base < 1:
        raise ValueError("cycle length must be >= 1")
    cycle_length = base * config.t_mult**cycle
    if not 0 <= step_in_cycle <= cycle_length:
        raise ValueError(
            f"step {step_in_cycle} outside cycle of length {cycle_length}"
        )
    span = config.learning_rate - config.eta_min
    return config.eta_min + 0.5 * span * (
        1.0 + math.cos(math.pi * step_in_cycle / cycle_length)
    )


def _batch_starts(n: int, batch_size: int) -> list[int]:
    # Final partial batch is dropped when it has fewer than 2 samples.
    return [start for start in range(0, n, batch_size) if min(batch_size, n - start) >= 2]


def train(
    model: TwoTowerModel,
    dataset: list[tuple[np.ndarray, TokenSequence]],
    config: TrainConfig,
) -> tuple[TwoTowerModel, list[tuple[int, float, float]]]:
    """Train the model in place; returns it with a per-epoch loss log.

    Each epoch reshuffles with the seeded generator and consumes
    ceil(n / batch_size) batches (a trailing singleton is dropped).  The log
    holds one (epoch, mean_loss, lr_at_epoch_start) row per epoch.  Identical
    seed, data, and config reproduce the model bit for bit.
    """
    n = len(dataset)
    if n < config.batch_size:
        raise DatasetTooSmall(f"dataset has {n} samples, batch size is {config.batch_size}")
    model.validate()
    if config.epochs == 0:
        return model, []

    rng = np.random.default_rng(config.rng_seed)
    params = model.params()
    state = AdamState.zeros_like(params)
    starts = _batch_starts(n, config.batch_size)
    t_0 = config.t_0 if config.t_0 >= 1 else len(starts)

    log: list[tuple[int, float, float]] = []
    t = 0
    cycle = 0
    step_in_cycle = 0
    cycle_length = t_0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        lr_epoch_start = lr_at(step_in_cycle, config, cycle, t_0)
        losses = []
        for start in starts:
            chosen = order[start : start + config.batch_size]
            batch = Batch(
                image_features=np.stack([dataset[i][0] for i in chosen]),
                token_sequences=[dataset[i][1] for i in chosen],
            )
            lr_t = lr_at(step_in_cycle, config, cycle, t_0)
            loss, grads = loss_gradients(model, batch)
            t += 1
            params = adam_step(
                params,
                grads,
                state,
                t,
                lr_t,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
                epsilon=config.adam_epsilon,
            )
            model.set_params(params)
            losses.append(loss)
            step_in_cycle += 1
            if step_in_cycle >= cycle_length:
                step_in_cycle = 0
                cycle += 1
                cycle_length = t_0 * config.t_mult**cycle
        log.append((epoch, float(np.mean(losses)), lr_epoch_start))
    return model, log


def write_loss_log(log: list[tuple[int, float, float]], path) -> None:
    """CSV of (epoch, mean_loss, lr_at_epoch_start)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("epoch,mean_loss,lr_at_epoch_start\n")
        for epoch, mean_loss, lr_start in log:
            f.write(f"{epoch},{mean_loss!r},{lr_start!r}\n")


# --- checkpoint format -------------------------------------------------------


def _format_row(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_checkpoint(model: TwoTowerModel, path) -> None:
    """Self-describing text checkpoint: version, dimensions, row-major matrices."""
    model.validate()
    with open(path, "w", encoding="utf-8") as f:
        f.write(CHECKPOINT_MAGIC + "\n")
        f.write(f"d_emb {model.d_emb}\n")
        f.write(f"d_img {model.d_img}\n")
        f.write(f"d_tok {model.d_tok}\n")
        f.write(f"vocab_size {model.vocab_size}\n")
        f.write(f"log_temperature {model.log_temperature!r}\n")
        for name in ("w_img", "b_img", "embeddings", "w_txt", "b_txt"):
            tensor = np.atleast_2d(getattr(model, name))
            f.write(name + "\n")
            for row in tensor:
                f.write(_format_row(row) + "\n")


def load_checkpoint(path) -> TwoTowerModel:
    """Parse and validate a checkpoint written by save_checkpoint."""
    with open(path, encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a {CHECKPOINT_MAGIC!r} file")

    header: dict[str, str] = {}
    cursor = 1
    for _ in range(5):
        key, _, value = lines[cursor].partition(" ")
        header[key] = value
        cursor += 1
    d_emb, d_img, d_tok, vocab_size = (
        int(header[k]) for k in ("d_emb", "d_img", "d_tok", "vocab_size")
    )
    shapes = {
        "w_img": (d_emb, d_img),
        "b_img": (1, d_emb),
        "embeddings": (vocab_size, d_tok),
        "w_txt": (d_emb, d_tok),
        "b_txt": (1, d_emb),
    }
    tensors: dict[str, np.ndarray] = {}
    for name, (rows, cols) in shapes.items():
        if cursor >= len(lines) or lines[cursor] != name:
            raise ValueError(f"expected section {name!r} at line {cursor + 1}")
        cursor += 1
        block = lines[cursor : cursor + rows]
        if len(block) < rows:
            raise ValueError(f"section {name!r} is truncated")
        matrix = np.array([[float(v) for v in row.split()] for row in block])
        if matrix.shape != (rows, cols):
            raise ValueError(f"section {name!r} has shape {matrix.shape}, expected {(rows, cols)}")
        tensors[name] = matrix
        cursor += rows

    model = TwoTowerModel(
        w_img=tensors["w_img"],
        b_img=tensors["b_img"][0],
        embeddings=tensors["embeddings"],
        w_txt=tensors["w_txt"],
        b_txt=tensors["b_txt"][0],
        log_temperature=float(header["log_temperature"]),
    )
    model.validate()
    return model
