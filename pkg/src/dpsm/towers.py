"""Query and POI towers over shared embedding and convolution weights.

Each text field is embedded per granularity, convolved with that
granularity's n-gram kernel (shared by both towers) and max-pooled over time.
The pooled vectors are concatenated and passed through a Relu dense layer
and a Sigmoid output layer of ``out_dim`` units.  The towers have separate
dense weights.  Relevance is the cosine of the two output vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nncore
from .errors import ConfigError, NumericError, ShapeError
from .nncore import Parameter, activate, activate_grad
from .textrep import LETTER, WORD, TokenSequence

QUERY = "query"
POI = "poi"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 100
    conv_window: int = 2
    conv_channels: int = 300
    hidden_dim: int = 300
    out_dim: int = 128
    activation: str = "relu"
    max_letters: int = 32
    max_words: int = 16
    use_word_granularity: bool = True
    use_address: bool = True
    use_convolution: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "conv_window", "conv_channels", "hidden_dim",
                     "out_dim", "max_letters", "max_words"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover PAD and UNK")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"activation must be relu or tanh, got {self.activation!r}")

    @property
    def pooled_width(self):
        return self.conv_channels if self.use_convolution else self.embed_dim

    @property
    def granularities(self):
        return (LETTER, WORD) if self.use_word_granularity else (LETTER,)

    def tower_fields(self, tower):
        """(field, granularity) pairs feeding a tower, in concatenation order."""
        if tower == QUERY:
            names = ("query",)
        else:
            names = ("name", "address") if self.use_address else ("name",)
        return [(f, g) for f in names for g in self.granularities]

    def tower_input_width(self, tower):
        return len(self.tower_fields(tower)) * self.pooled_width

    def to_dict(self):
        d = asdict(self)
        flags = {k: d.pop(k) for k in ("use_word_granularity", "use_address", "use_convolution")}
        d["feature_flags"] = flags
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.update(d.pop("feature_flags", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict:
    """Canonical parameter names and shapes, in checkpoint order."""
    c = config
    shapes = {"embedding": (c.vocab_size, c.embed_dim)}
    if c.use_convolution:
        for g in c.granularities:
            shapes[f"conv_{g}_w"] = (c.conv_window * c.embed_dim, c.conv_channels)
            shapes[f"conv_{g}_b"] = (1, c.conv_channels)
    for tower in (QUERY, POI):
        shapes[f"{tower}_hidden_w"] = (c.hidden_dim, c.tower_input_width(tower))
        shapes[f"{tower}_hidden_b"] = (1, c.hidden_dim)
        shapes[f"{tower}_out_w"] = (c.out_dim, c.hidden_dim)
        shapes[f"{tower}_out_b"] = (1, c.out_dim)
    return shapes


class ModelParams:
    """All trainable arrays of one model, keyed by canonical name.

    The conv kernels exist once and are handed to both towers by reference.
    """

    def __init__(self, config: ModelConfig, arrays: dict):
        shapes = param_shapes(config)
        if set(arrays) != set(shapes):
            raise ShapeError(f"parameter names {sorted(arrays)} do not match config {sorted(shapes)}")
        self.config = config
        self.params = {}
        for name, shape in shapes.items():
            value = np.asarray(arrays[name])
            if value.shape != shape:
                raise ShapeError(f"{name}: shape {value.shape} != expected {shape}")
            self.params[name] = Parameter(value, name)

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    @property
    def dtype(self):
        return self.params["embedding"].value.dtype

    def tower(self, tower) -> dict:
        shared = {n: p for n, p in self.params.items() if n == "embedding" or n.startswith("conv_")}
        own = {n: p for n, p in self.params.items() if n.startswith(tower + "_")}
        return {**shared, **own}

    def arrays(self) -> dict:
        return {n: p.value for n, p in self.params.items()}

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: p.value.astype(dtype) for n, p in self.params.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: p.value.copy() for n, p in self.params.items()})

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Seeded init: U(-0.05, 0.05) embeddings, Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name == "embedding":
            value = rng.uniform(-0.05, 0.05, shape)
        elif name.endswith("_b"):
            value = np.zeros(shape)
        else:
            fan_in, fan_out = (shape[0], shape[1]) if name.startswith("conv_") else (shape[1], shape[0])
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, shape)
        arrays[name] = value.astype(dtype)
    return ModelParams(config, arrays)


@dataclass
class FieldBatch:
    """Right-padded token ids [B, T] with true lengths [B]."""

    ids: np.ndarray
    lengths: np.ndarray
    granularity: str

    @classmethod
    def from_sequences(cls, seqs, granularity, min_width=1):
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        T = max(int(lengths.max(initial=0)), min_width)
        ids = np.zeros((len(seqs), T), dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = getattr(s, "ids", s)
        return cls(ids, lengths, granularity)


def _min_width(config):
    return config.conv_window if config.use_convolution else 1


class _FieldCache:
    __slots__ = ("batch", "mask", "x", "arg", "maxpre", "pooled")


def _field_forward(params, config, fb, kern):
    E = params["embedding"].value
    B, T = fb.ids.shape
    if fb.ids.size and (fb.ids.min() < 0 or fb.ids.max() >= E.shape[0]):
        raise ShapeError(f"token id out of range for vocabulary of {E.shape[0]}")
    mask = np.arange(T)[None, :] < fb.lengths[:, None]
    x = E[fb.ids]
    x[~mask] = 0  # padding rows are zero vectors, not the PAD embedding
    cache = _FieldCache()
    cache.batch, cache.mask, cache.x = fb, mask, x
    if config.use_convolution:
        n = config.conv_window
        if T < n:
            raise ShapeError(f"field batch width {T} < conv window {n}")
        n_valid = np.maximum(fb.lengths, n) - n + 1
        W = params[f"conv_{fb.granularity}_w"].value
        b = params[f"conv_{fb.granularity}_b"].value[0]
        cache.maxpre, cache.arg = kern.conv_pool_forward(x, n_valid, W, b)
        cache.pooled = activate(cache.maxpre, config.activation)
    else:
        cache.pooled, cache.arg = kern.pool_forward(x, np.maximum(fb.lengths, 1))
        cache.maxpre = None
    return cache


def _field_backward(params, config, cache, gpool, kern):
    fb = cache.batch
    if config.use_convolution:
        W = params[f"conv_{fb.granularity}_w"]
        b = params[f"conv_{fb.granularity}_b"]
        gpre = gpool * activate_grad(cache.maxpre, cache.pooled, config.activation)
        dx, dW, db = kern.conv_pool_backward(cache.x, cache.arg, gpre, W.value)
        W.grad += dW
        b.grad[0] += db
    else:
        dx = kern.pool_backward(cache.arg, gpool, fb.ids.shape[1])
    E = params["embedding"]
    kern.scatter_add_rows(E.grad, fb.ids[cache.mask], dx[cache.mask])


class TowerCache:
    """Intermediates of one batched tower pass, kept for backward and tracing."""

    def __init__(self, tower, field_names, field_caches, concat, zh, h, zo, out):
        self.tower = tower
        self.field_names = field_names
        self.field_caches = field_caches
        self.concat, self.zh, self.h, self.zo, self.out = concat, zh, h, zo, out


def tower_forward(params: ModelParams, tower: str, batches, kern=None):
    """Batched forward.  ``batches`` lists one FieldBatch per entry of
    ``config.tower_fields(tower)``.  Returns ``(vectors [B, out_dim], cache)``."""
    config = params.config
    kern = kern or nncore.kernels
    names = config.tower_fields(tower)
    if len(batches) != len(names):
        raise ShapeError(f"{tower} tower expects {len(names)} fields, got {len(batches)}")
    caches = []
    for (fname, gran), fb in zip(names, batches):
        if fb.granularity != gran:
            raise ShapeError(f"field {fname}: expected {gran} tokens, got {fb.granularity}")
        caches.append(_field_forward(params, config, fb, kern))
    concat = np.concatenate([c.pooled for c in caches], axis=1)
    Wh, bh = params[f"{tower}_hidden_w"].value, params[f"{tower}_hidden_b"].value
    Wo, bo = params[f"{tower}_out_w"].value, params[f"{tower}_out_b"].value
    zh = concat @ Wh.T + bh
    h = activate(zh, config.activation)
    zo = h @ Wo.T + bo
    out = activate(zo, "sigmoid")
    return out, TowerCache(tower, names, caches, concat, zh, h, zo, out)


def tower_backward(params: ModelParams, cache: TowerCache, dout, kern=None):
    """Accumulate gradients of ``sum(dout * out)`` into every Parameter.grad."""
    config = params.config
    kern = kern or nncore.kernels
    t = cache.tower
    Wh, bh = params[f"{t}_hidden_w"], params[f"{t}_hidden_b"]
    Wo, bo = params[f"{t}_out_w"], params[f"{t}_out_b"]
    dzo = dout * cache.out * (1 - cache.out)
    Wo.grad += dzo.T @ cache.h
    bo.grad[0] += dzo.sum(axis=0)
    dzh = (dzo @ Wo.value) * activate_grad(cache.zh, cache.h, config.activation)
    Wh.grad += dzh.T @ cache.concat
    bh.grad[0] += dzh.sum(axis=0)
    dconcat = dzh @ Wh.value
    width = config.pooled_width
    for i, fc in enumerate(cache.field_caches):
        _field_backward(params, config, fc, dconcat[:, i * width:(i + 1) * width], kern)


# -- single-item API ---------------------------------------------------------

def _single_batches(params, tower, seqs):
    config = params.config
    names = config.tower_fields(tower)
    by_name = dict(seqs)
    out = []
    for fname, gran in names:
        seq = by_name[(fname, gran)]
        if isinstance(seq, TokenSequence) and seq.granularity != gran:
            raise ShapeError(f"{fname}: expected {gran} sequence, got {seq.granularity}")
        out.append(FieldBatch.from_sequences([seq], gran, _min_width(config)))
    return out


def query_forward(letters, words, params: ModelParams, kern=None, return_cache=False):
    """Embed one query.  ``words`` is ignored when word granularity is off."""
    seqs = [(("query", LETTER), letters), (("query", WORD), words)]
    out, cache = tower_forward(params, QUERY, _single_batches(params, QUERY, seqs), kern)
    return (out[0], cache) if return_cache else out[0]


def poi_forward(name_letters, name_words, addr_letters, addr_words, params: ModelParams,
                kern=None, return_cache=False):
    """Embed one POI from its name and address sequences (address dropped if disabled)."""
    seqs = [(("name", LETTER), name_letters), (("name", WORD), name_words),
            (("address", LETTER), addr_letters), (("address", WORD), addr_words)]
    out, cache = tower_forward(params, POI, _single_batches(params, POI, seqs), kern)
    return (out[0], cache) if return_cache else out[0]


def cosine_similarity(q, p) -> float:
    q, p = np.asarray(q), np.asarray(p)
    if q.shape != p.shape:
        raise ShapeError(f"vector lengths differ: {q.shape} vs {p.shape}")
    nq, np_ = np.linalg.norm(q), np.linalg.norm(p)
    if nq == 0 or np_ == 0:
        raise NumericError("cosine similarity of a zero-norm vector")
    return float(q @ p / (nq * np_))


def cosine_backward(q, p, dsim=1.0):
    """Gradients of ``dsim * cos(q, p)`` w.r.t. q and p."""
    q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
    nq, np_ = np.linalg.norm(q), np.linalg.norm(p)
    if nq == 0 or np_ == 0:
        raise NumericError("cosine similarity of a zero-norm vector")
    s = q @ p / (nq * np_)
    return dsim * (p / (nq * np_) - s * q / nq ** 2), dsim * (q / (nq * np_) - s * p / np_ ** 2)


def batch_cosine(q, p):
    """Cosines between q [B, O] and each candidate p [B, K, O] -> [B, K]."""
    nq = np.linalg.norm(q, axis=-1)
    np_ = np.linalg.norm(p, axis=-1)
    if np.any(nq == 0) or np.any(np_ == 0):
        raise NumericError("cosine similarity of a zero-norm vector")
    return np.einsum("bo,bko->bk", q, p) / (nq[:, None] * np_)


def batch_cosine_backward(q, p, sims, dsims):
    nq = np.linalg.norm(q, axis=-1)[:, None]          # [B,1]
    np_ = np.linalg.norm(p, axis=-1)                  # [B,K]
    denom = nq * np_
    dq = np.einsum("bk,bko->bo", dsims / denom, p) - (dsims * sims).sum(axis=1)[:, None] * q / nq ** 2
    dp = (dsims / denom)[:, :, None] * q[:, None, :] - (dsims * sims / np_ ** 2)[:, :, None] * p
    return dq, dp


# -- activation tracing -------------------------------------------------------

def trace_activations(cache: TowerCache, top_k: int, item: int = 0) -> dict:
    """Top-k (index, activation) pairs per max-pool vector and for the output.

    Keys are ``"<field>/<granularity>/maxpool"`` and ``"output"``.  Sorting is
    by activation descending, index ascending.  ``top_k`` is clamped to the
    layer width.
    """
    def top(vec):
        k = max(0, min(int(top_k), vec.shape[0]))
        order = np.lexsort((np.arange(vec.shape[0]), -vec))[:k]
        return [(int(i), float(vec[i])) for i in order]

    layers = {}
    for (fname, gran), fc in zip(cache.field_names, cache.field_caches):
        layers[f"{fname}/{gran}/maxpool"] = top(fc.pooled[item])
    layers["output"] = top(cache.out[item])
    return layers


def common_indices(a, b) -> list:
    """Indices present in both traced layers, ascending."""
    return sorted({i for i, _ in a} & {i for i, _ in b})
