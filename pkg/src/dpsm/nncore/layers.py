"""Single-sequence forward/backward kernels and the finite-difference harness.

These are the reference forms of the tower building blocks.  The batched
training path in :mod:`dpsm.towers` uses the fused kernels of the selected
backend and is tested for equality against these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericError, ShapeError


def check_finite(arr, what="array"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Parameter:
    """A trainable array and its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name=""):
        value = np.asarray(value)
        if value.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        check_finite(value, f"parameter {name!r}")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def _arr(p):
    return p.value if isinstance(p, Parameter) else np.asarray(p)


ACTIVATIONS = ("none", "relu", "sigmoid", "tanh")


def activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "sigmoid":
        e = np.exp(-np.abs(z))  # never overflows
        return np.where(z >= 0, 1 / (1 + e), e / (1 + e))
    if activation == "tanh":
        return np.tanh(z)
    if activation == "none":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def activate_grad(z, y, activation):
    """Derivative of the activation at pre-activation z (post-activation y)."""
    if activation == "relu":
        return (z > 0).astype(z.dtype)  # subgradient 0 at the kink
    if activation == "sigmoid":
        return y * (1 - y)
    if activation == "tanh":
        return 1 - y * y
    if activation == "none":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class EmbeddedSequence:
    values: np.ndarray  # [length, dim]

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def _ids(ids):
    ids = getattr(ids, "ids", ids)
    return np.asarray(ids, dtype=np.int64).reshape(-1)


def embed_sequence(ids, E) -> EmbeddedSequence:
    ids = _ids(ids)
    table = _arr(E)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for embedding with {table.shape[0]} rows")
    return EmbeddedSequence(table[ids])


def embed_sequence_backward(ids, E: Parameter, upstream) -> None:
    """Accumulate ``upstream`` rows into ``E.grad`` at the looked-up ids."""
    from . import kernels

    ids = _ids(ids)
    upstream = np.asarray(upstream, dtype=E.grad.dtype)
    if upstream.shape != (ids.size, E.shape[1]):
        raise ShapeError(f"upstream gradient shape {upstream.shape} != {(ids.size, E.shape[1])}")
    kernels.scatter_add_rows(E.grad, ids, upstream)


def _conv_inputs(x, f, b):
    x = x.values if isinstance(x, EmbeddedSequence) else np.asarray(x)
    f = _arr(f)
    b = _arr(b).reshape(-1)
    if f.ndim != 3:
        raise ShapeError(f"conv kernel must be n x dim x channels, got shape {f.shape}")
    n, dim, channels = f.shape
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"input width {x.shape[-1]} does not match kernel width {dim}")
    if b.shape[0] != channels:
        raise ShapeError(f"bias length {b.shape[0]} != channels {channels}")
    if x.shape[0] < 1:
        raise ShapeError("conv_ngram needs at least one row")
    return x, f, b


def _pad_to_window(x, n):
    if x.shape[0] >= n:
        return x
    return np.concatenate([x, np.zeros((n - x.shape[0], x.shape[1]), dtype=x.dtype)])


def conv_ngram_pre(x, f, b):
    """Pre-activation of the full-width n-gram convolution (stride 1)."""
    x, f, b = _conv_inputs(x, f, b)
    n, dim, channels = f.shape
    xp = _pad_to_window(x, n)
    T = xp.shape[0] - n + 1
    win = np.stack([xp[t:t + n].reshape(-1) for t in range(T)])
    return win @ f.reshape(n * dim, channels) + b


def conv_ngram(x, f, b, activation="relu"):
    """``out[t, k] = act(sum_{j,d} x[t+j, d] * f[j, d, k] + b[k])``.

    Inputs shorter than the window are right-padded with zero rows.
    """
    return activate(conv_ngram_pre(x, f, b), activation)


def conv_ngram_backward(x, f, b, dout, activation="relu"):
    """Gradients ``(dx, df, db)`` of ``sum(dout * conv_ngram(x, f, b))``."""
    x, f, b = _conv_inputs(x, f, b)
    n, dim, channels = f.shape
    xp = _pad_to_window(x, n)
    T = xp.shape[0] - n + 1
    win = np.stack([xp[t:t + n].reshape(-1) for t in range(T)])
    z = win @ f.reshape(n * dim, channels) + b
    dz = np.asarray(dout) * activate_grad(z, activate(z, activation), activation)
    df = (win.T @ dz).reshape(n, dim, channels)
    db = dz.sum(axis=0)
    dwin = dz @ f.reshape(n * dim, channels).T
    dxp = np.zeros_like(xp)
    for j in range(n):
        dxp[j:j + T] += dwin[:, j * dim:(j + 1) * dim]
    return dxp[:x.shape[0]], df, db


def maxpool_time(c):
    c = np.asarray(c)
    if c.ndim != 2 or c.shape[0] < 1:
        raise ShapeError(f"maxpool_time needs a non-empty T x channels matrix, got shape {c.shape}")
    return c.max(axis=0)


def maxpool_time_backward(c, dout):
    """Route each channel's gradient to its first argmax row."""
    c = np.asarray(c)
    maxpool_time(c)
    arg = c.argmax(axis=0)
    dc = np.zeros_like(c)
    dc[arg, np.arange(c.shape[1])] = dout
    return dc


def _dense_inputs(x, w, b):
    x, w, b = np.asarray(x), _arr(w), _arr(b).reshape(-1)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"dense shapes do not match: w {w.shape}, x {x.shape}")
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"bias length {b.shape[0]} != output rows {w.shape[0]}")
    return x, w, b


def dense_affine(x, w, b, activation="none"):
    x, w, b = _dense_inputs(x, w, b)
    return activate(w @ x + b, activation)


def dense_affine_backward(x, w, b, dout, activation="none"):
    """Gradients ``(dx, dw, db)`` of ``sum(dout * dense_affine(x, w, b))``."""
    x, w, b = _dense_inputs(x, w, b)
    z = w @ x + b
    dz = np.asarray(dout) * activate_grad(z, activate(z, activation), activation)
    return w.T @ dz, np.outer(dz, x), dz


def grad_check(fn, params, epsilon=1e-5, seed=0, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(output, backward)`` where
    ``backward(upstream)`` maps parameter names to gradients of
    ``sum(upstream * output)``.  The output is reduced to a scalar through a
    fixed random projection.  Relative error per element is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps exactly-zero and
    round-off-sized gradients from dividing by ~0.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for name, value in params.items():
        if value.dtype != np.float64:
            raise TypeError(f"grad_check runs in 64-bit mode; {name!r} is {value.dtype}")
        check_finite(value, name)
    out, backward = fn(params)
    out = check_finite(np.asarray(out, dtype=np.float64), "output")
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = backward(proj)

    def scalar():
        return float(np.sum(proj * np.asarray(fn(params)[0])))

    worst = 0.0
    for name, value in params.items():
        a = np.asarray(analytic.get(name, np.zeros_like(value)), dtype=np.float64).reshape(value.shape)
        check_finite(a, f"analytic gradient of {name!r}")
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = value[idx]
            value[idx] = orig + epsilon
            up = scalar()
            value[idx] = orig - epsilon
            down = scalar()
            value[idx] = orig
            num = (up - down) / (2 * epsilon)
            if not np.isfinite(num):
                raise NumericError(f"non-finite finite difference for {name}{idx}")
            err = abs(a[idx] - num) / max(abs(a[idx]), abs(num), floor)
            worst = max(worst, err)
    return worst
