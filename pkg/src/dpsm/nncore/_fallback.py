"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` module; used when
the extension is not built or ``DPSM_BACKEND=numpy`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _windows(x, n):
    # [B, T, D] -> [B, T-n+1, n*D], window t = x[t..t+n-1] flattened row-major
    B, T, D = x.shape
    w = sliding_window_view(x, n, axis=1)  # [B, T-n+1, D, n]
    return np.ascontiguousarray(w.transpose(0, 1, 3, 2)).reshape(B, T - n + 1, n * D)


def conv_pool_forward(x, n_valid, W, b):
    """Max over valid windows of the pre-activation ``window @ W + b``.

    Returns ``(maxpre [B, C], argmax [B, C])``; ties resolve to the earliest
    window.  Window ``t`` is valid iff ``t < n_valid[b]``.
    """
    B, T, D = x.shape
    n = W.shape[0] // D
    win = _windows(x, n)
    pre = win @ W + b
    invalid = np.arange(T - n + 1)[None, :] >= n_valid[:, None]
    pre[invalid] = -np.inf
    arg = pre.argmax(axis=1)
    maxpre = np.take_along_axis(pre, arg[:, None, :], axis=1)[:, 0, :]
    return maxpre, arg.astype(np.int64)


def conv_pool_backward(x, argmax, gpre, W):
    """Gradients of ``sum(gpre * maxpre)`` w.r.t. x, W and b."""
    B, T, D = x.shape
    nD, C = W.shape
    n = nD // D
    Tw = T - n + 1
    win = _windows(x, n)
    dpre = np.zeros((B, Tw, C), dtype=x.dtype)
    np.put_along_axis(dpre, argmax[:, None, :], gpre[:, None, :], axis=1)
    dW = win.reshape(-1, nD).T @ dpre.reshape(-1, C)
    db = gpre.sum(axis=0)
    dwin = dpre @ W.T
    dx = np.zeros_like(x)
    for j in range(n):
        dx[:, j:j + Tw, :] += dwin[:, :, j * D:(j + 1) * D]
    return dx, dW, db


def pool_forward(x, lengths):
    B, T, D = x.shape
    masked = np.where((np.arange(T)[None, :] < lengths[:, None])[:, :, None], x, -np.inf)
    arg = masked.argmax(axis=1)
    return np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :], arg.astype(np.int64)


def pool_backward(argmax, g, T):
    B, D = g.shape
    dx = np.zeros((B, T, D), dtype=g.dtype)
    np.put_along_axis(dx, argmax[:, None, :], g[:, None, :], axis=1)
    return dx


def scatter_add_rows(target, ids, rows):
    """``target[ids[i]] += rows[i]`` with duplicate ids accumulating (in place)."""
    np.add.at(target, ids, rows)


def row_norms(vectors):
    return np.sqrt(np.einsum("ij,ij->i", vectors, vectors))


def cosine_scores(vectors, norms, q, rows=None):
    if rows is not None:
        vectors, norms = vectors[rows], norms[rows]
    qn = np.sqrt(np.dot(q, q))
    return (vectors @ q) / (norms * qn)


def topk(scores, k):
    """Indices of the k best scores, ordered by (score desc, index asc)."""
    m = scores.shape[0]
    k = min(k, m)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k < m:
        part = np.argpartition(-scores, k - 1)[:k]
        thr = scores[part].min()
        above = np.flatnonzero(scores > thr)
        tied = np.flatnonzero(scores == thr)[:k - above.shape[0]]
        sel = np.concatenate([above, tied])
    else:
        sel = np.arange(m)
    order = np.lexsort((sel, -scores[sel]))
    return sel[order].astype(np.int64)
