"""Popularity-weighted negative sampling, the softmax ranking loss over
cosine similarities, minibatch optimisation and checkpoint persistence."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericError, SamplingError
from .features import EncodedTexts, PoiFeatures, query_batches
from .towers import (
    POI,
    QUERY,
    ModelConfig,
    ModelParams,
    batch_cosine,
    batch_cosine_backward,
    init_params,
    param_shapes,
    tower_backward,
    tower_forward,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DPSM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 10.0
    negatives: int = 4
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0
    popularity_exponent: float = 1.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if self.negatives < 0:
            raise ConfigError("negatives must be >= 0")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- negative sampling --------------------------------------------------------

class NegativeSampler:
    """Draw distinct negatives with probability proportional to popularity**alpha.

    Each draw is renormalised over the ids not yet excluded (the positive and
    earlier draws), i.e. sequential sampling without replacement.
    """

    def __init__(self, popularities, alpha=1.0):
        pop = np.asarray(popularities, dtype=np.float64)
        if pop.ndim != 1 or np.any(~np.isfinite(pop)) or np.any(pop < 0):
            raise SamplingError("popularities must be finite and non-negative")
        weights = np.where(pop > 0, pop ** alpha, 0.0) if alpha != 0 else np.ones_like(pop)
        if not weights.sum() > 0:
            raise SamplingError("at least one POI needs positive popularity")
        self.weights = weights
        self.cdf = np.cumsum(weights) / weights.sum()
        self.cdf[-1] = 1.0
        self.n = pop.shape[0]
        self.n_drawable = int(np.count_nonzero(weights))

    def _draw(self, rng, size):
        return np.minimum(np.searchsorted(self.cdf, rng.random(size), side="right"), self.n - 1)

    def probabilities(self, positive):
        w = self.weights.copy()
        w[positive] = 0
        return w / w.sum()

    def sample_batch(self, positives, m, rng, max_rounds=64):
        """Rows of ``m`` negatives for each positive row id."""
        positives = np.asarray(positives, dtype=np.int64)
        B = positives.shape[0]
        out = np.empty((B, m), dtype=np.int64)
        if m == 0:
            return out
        inside = (positives >= 0) & (positives < self.n)
        drawable_pos = inside & (self.weights[np.clip(positives, 0, self.n - 1)] > 0)
        if np.any(self.n_drawable - drawable_pos < m):
            raise SamplingError(f"need {m} distinct drawable POIs besides the positive")
        for j in range(m):
            excluded = np.concatenate([positives[:, None], out[:, :j]], axis=1)
            col = self._draw(rng, B)
            bad = np.any(excluded == col[:, None], axis=1)
            rounds = 0
            while bad.any() and rounds < max_rounds:
                col[bad] = self._draw(rng, int(bad.sum()))
                bad = np.any(excluded == col[:, None], axis=1)
                rounds += 1
            for b in np.flatnonzero(bad):  # heavy excluded mass: sample the renormalised law directly
                w = self.weights.copy()
                w[excluded[b]] = 0
                cdf = np.cumsum(w) / w.sum()
                col[b] = min(int(np.searchsorted(cdf, rng.random(), side="right")), self.n - 1)
            out[:, j] = col
        return out


def sample_negatives(positive_id, poi_db, m, alpha, rng) -> list:
    """``m`` distinct POI ids != positive_id, drawn by popularity**alpha."""
    if len(poi_db) < m + 1:
        raise SamplingError(f"POI database has {len(poi_db)} entries; need at least {m + 1}")
    ids = [p.poi_id for p in poi_db]
    sampler = NegativeSampler([p.popularity for p in poi_db], alpha)
    try:
        pos = ids.index(positive_id)
    except ValueError:
        pos = -1
    # a positive outside the database excludes nothing (-1 never matches a draw)
    rows = sampler.sample_batch(np.array([pos]), m, rng)[0]
    return [ids[int(r)] for r in rows]


# -- loss ---------------------------------------------------------------------

def batch_softmax_loss(sims, gamma):
    """Mean over examples of ``-log softmax(gamma * sims)[0]``.

    ``sims`` is [B, 1 + m] with the positive in column 0.  Returns
    ``(loss, dloss/dsims)``.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[1] < 1:
        raise ConfigError("sims must be [batch, 1 + negatives] with the positive first")
    if not np.all(np.isfinite(sims)):
        raise NumericError("non-finite similarity in loss input")
    z = gamma * sims
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    # negatives summed in sorted order so the loss is bitwise permutation-invariant
    denom = (e[:, :1] + np.sort(e[:, 1:], axis=1).sum(axis=1, keepdims=True))
    logp0 = z[:, 0] - np.log(denom[:, 0])
    B = sims.shape[0]
    loss = float(-logp0.mean())
    grad = e / denom
    grad[:, 0] -= 1.0
    return loss, grad * (gamma / B)


# -- optimisers ---------------------------------------------------------------

class SGD:
    def __init__(self, params: ModelParams, lr):
        self.lr = lr

    def step(self, params: ModelParams):
        for p in params:
            p.value -= self.lr * p.grad


class Adam:
    def __init__(self, params: ModelParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, params: ModelParams):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p in params:
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, tc: TrainConfig):
    if tc.optimizer == "sgd":
        return SGD(params, tc.learning_rate)
    return Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps)


# -- training -----------------------------------------------------------------

@dataclass
class TrainingBatch:
    """B queries, each with its positive POI row followed by m negative rows."""

    query_fields: list      # FieldBatch per query-tower field
    poi_fields: list        # FieldBatch per POI-tower field, over unique POI rows
    poi_index: np.ndarray   # [B, 1 + m] positions into the unique POI rows


def make_batch(config, queries: EncodedTexts, query_rows, pois: PoiFeatures, poi_rows) -> TrainingBatch:
    poi_rows = np.asarray(poi_rows, dtype=np.int64)
    uniq, inv = np.unique(poi_rows, return_inverse=True)
    return TrainingBatch(query_batches(config, queries, query_rows), pois.batches(config, uniq),
                         inv.reshape(poi_rows.shape))


def batch_loss(params: ModelParams, batch: TrainingBatch, gamma, kern=None, backward=True):
    """Forward the batch, return the loss; with ``backward`` accumulate grads."""
    q, qcache = tower_forward(params, QUERY, batch.query_fields, kern)
    p_uniq, pcache = tower_forward(params, POI, batch.poi_fields, kern)
    p = p_uniq[batch.poi_index]                         # [B, 1+m, O]
    sims = batch_cosine(q, p)
    loss, dsims = batch_softmax_loss(sims, gamma)
    if backward:
        dq, dp = batch_cosine_backward(q, p, sims, dsims)
        dp_uniq = np.zeros_like(p_uniq)
        np.add.at(dp_uniq, batch.poi_index.reshape(-1), dp.reshape(-1, p.shape[-1]))
        tower_backward(params, qcache, dq, kern)
        tower_backward(params, pcache, dp_uniq, kern)
    return loss


def train_step(batch: TrainingBatch, params: ModelParams, optimizer, tc: TrainConfig, kern=None) -> float:
    params.zero_grad()
    loss = batch_loss(params, batch, tc.gamma, kern)
    if not np.isfinite(loss):
        raise NumericError("loss became non-finite")
    optimizer.step(params)
    params.zero_grad()
    return loss


@dataclass
class TrainResult:
    params: ModelParams
    loss_log: list          # (step, epoch, loss)
    epoch_losses: list      # mean loss per epoch
    steps: int

    def epoch_means(self):
        return list(self.epoch_losses)


def train(dataset, poi_db, encoder, model_config: ModelConfig, tc: TrainConfig,
          params: ModelParams | None = None, on_epoch=None, kern=None) -> TrainResult:
    """Minibatch training over (query, clicked poi_id) pairs.

    Examples are shuffled each epoch and every positive gets ``tc.negatives``
    fresh popularity-weighted negatives.  ``on_epoch(epoch, params, step)``
    runs after each epoch (checkpointing hook).  Fully determined by
    ``tc.seed``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("training dataset is empty")
    pois = poi_db if isinstance(poi_db, PoiFeatures) else PoiFeatures(poi_db, encoder)
    positives = []
    for q, pid in dataset:
        if pid not in pois.row:
            raise DataError(f"clicked poi_id {pid!r} is not in the POI database")
        positives.append(pois.row[pid])
    positives = np.asarray(positives, dtype=np.int64)
    sampler = NegativeSampler(pois.popularity, tc.popularity_exponent)
    queries = EncodedTexts([q for q, _ in dataset], encoder)

    if params is None:
        params = init_params(model_config, seed=tc.seed)
    optimizer = make_optimizer(params, tc)
    rng = np.random.default_rng([tc.seed, 1])
    loss_log, epoch_losses = [], []
    step = 0
    n = len(dataset)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            rows = order[start:start + tc.batch_size]
            pos = positives[rows]
            neg = sampler.sample_batch(pos, tc.negatives, rng)
            batch = make_batch(model_config, queries, rows, pois, np.concatenate([pos[:, None], neg], axis=1))
            loss = train_step(batch, params, optimizer, tc, kern)
            step += 1
            total += loss * len(rows)
            loss_log.append((step, epoch, loss))
        epoch_losses.append(total / n)
        log.info("epoch %d: mean loss %.6f", epoch, total / n)
        if on_epoch is not None:
            on_epoch(epoch, params, step)
    return TrainResult(params, loss_log, epoch_losses, step)


def write_loss_log(path, loss_log) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,epoch,loss\n")
        for step, epoch, loss in loss_log:
            fh.write(f"{step},{epoch},{loss!r}\n")


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams          # float32
    model_config: ModelConfig
    train_config: dict
    vocab_hash: str
    step: int
    digest: str                  # sha256 of the serialised bytes

    @property
    def hash(self):
        return self.digest


def checkpoint_bytes(params: ModelParams, train_config=None, vocab_hash="", step=0) -> bytes:
    header = {
        "model_config": params.config.to_dict(),
        "train_config": (train_config.to_dict() if isinstance(train_config, TrainConfig)
                         else dict(train_config or {})),
        "vocab_hash": vocab_hash,
        "step": int(step),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for name in param_shapes(params.config):
        value = params[name].value
        nb = name.encode("utf-8")
        rows, cols = value.shape
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, train_config=None, vocab_hash="", step=0) -> str:
    """Write a checkpoint (32-bit arrays); returns its sha256 hex digest."""
    data = checkpoint_bytes(params, train_config, vocab_hash, step)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def parse_checkpoint(data: bytes, source="<bytes>") -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{source}: truncated checkpoint while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a DPSM checkpoint (bad magic)")
    version, jlen = struct.unpack("<IQ", take(12, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(bytes(take(jlen, "config JSON")).decode("utf-8"))
        config = ModelConfig.from_dict(header["model_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: corrupt checkpoint header ({exc})") from None
    shapes = param_shapes(config)
    arrays = {}
    while pos < len(view):
        (nlen,) = struct.unpack("<I", take(4, "array name length"))
        name = bytes(take(nlen, "array name")).decode("utf-8", errors="replace")
        rows, cols = struct.unpack("<II", take(8, f"shape of {name}"))
        if name not in shapes or shapes[name] != (rows, cols) or name in arrays:
            raise FormatError(f"{source}: unexpected array {name!r} with shape {(rows, cols)}")
        raw = take(4 * rows * cols, f"values of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32)
    missing = [n for n in shapes if n not in arrays]
    if missing:
        raise FormatError(f"{source}: checkpoint is missing arrays {missing}")
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise FormatError(f"{source}: non-finite values in {name}")
    return Checkpoint(ModelParams(config, arrays), config, header.get("train_config", {}),
                      header.get("vocab_hash", ""), int(header.get("step", 0)),
                      hashlib.sha256(data).hexdigest())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data, str(path))
