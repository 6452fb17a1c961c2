# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused conv+maxpool, embedding scatter, cosine top-k.

Mirrors ``_fallback`` exactly in semantics.  The conv kernel only visits
valid windows and its backward pass touches one window per channel, so the
cost tracks true sequence length rather than the padded batch width.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, INFINITY

cnp.import_array()

NAME = "cython"


cdef inline floating _dot(const floating* a, const floating* b, Py_ssize_t n) noexcept nogil:
    cdef floating s0 = 0, s1 = 0, s2 = 0, s3 = 0
    cdef Py_ssize_t r = 0
    while r + 4 <= n:
        s0 += a[r] * b[r]
        s1 += a[r + 1] * b[r + 1]
        s2 += a[r + 2] * b[r + 2]
        s3 += a[r + 3] * b[r + 3]
        r += 4
    while r < n:
        s0 += a[r] * b[r]
        r += 1
    return (s0 + s1) + (s2 + s3)


def _shift_sum_max(const floating[:, :, :, ::1] P, const cnp.int64_t[::1] n_valid,
                   const floating[::1] b, floating[:, ::1] out, cnp.int64_t[:, ::1] arg):
    # pre[bi, t, k] = b[k] + sum_j P[j, bi, t + j, k]; keep the first max over t < n_valid
    cdef Py_ssize_t n = P.shape[0], B = P.shape[1], C = P.shape[3]
    cdef Py_ssize_t bi, t, j, k, L
    cdef floating s
    with nogil:
        for bi in range(B):
            L = n_valid[bi]
            for k in range(C):
                out[bi, k] = -INFINITY
                arg[bi, k] = 0
            for t in range(L):
                for k in range(C):
                    s = b[k]
                    for j in range(n):
                        s = s + P[j, bi, t + j, k]
                    if s > out[bi, k]:
                        out[bi, k] = s
                        arg[bi, k] = t


def conv_pool_forward(x, n_valid, W, b):
    """Max over valid windows of the pre-activation ``window @ W + b``.

    The dense products go through BLAS as one ``[B*T, D] @ [D, C]`` product
    per window offset; the shifted sum, masking and argmax run compiled.
    """
    x = np.ascontiguousarray(x)
    B, T, D = x.shape
    C = W.shape[1]
    n = W.shape[0] // D
    if B and np.any(np.asarray(n_valid) > T - n + 1):
        raise ValueError("n_valid exceeds the number of windows in x")
    flat = x.reshape(B * T, D)
    W = np.asarray(W, dtype=x.dtype)
    P = np.empty((n, B, T, C), dtype=x.dtype)
    for j in range(n):
        np.matmul(flat, W[j * D:(j + 1) * D], out=P[j].reshape(B * T, C))
    out = np.empty((B, C), dtype=x.dtype)
    arg = np.empty((B, C), dtype=np.int64)
    _shift_sum_max(P, np.ascontiguousarray(n_valid, dtype=np.int64),
                   np.ascontiguousarray(b, dtype=x.dtype), out, arg)
    return out, arg


def _conv_pool_backward(const floating[:, :, ::1] x, const cnp.int64_t[:, ::1] arg,
                        const floating[:, ::1] gpre, const floating[:, ::1] Wt,
                        floating[:, :, ::1] dx, floating[:, ::1] dWt, floating[::1] db):
    cdef Py_ssize_t B = x.shape[0], D = x.shape[2]
    cdef Py_ssize_t C = Wt.shape[0], nD = Wt.shape[1]
    cdef Py_ssize_t bi, k, r, off
    cdef floating g
    cdef const floating* xw
    cdef floating* dxw
    with nogil:
        for bi in range(B):
            for k in range(C):
                g = gpre[bi, k]
                if g == 0:
                    continue
                off = arg[bi, k] * D
                xw = &x[bi, 0, 0] + off
                dxw = &dx[bi, 0, 0] + off
                db[k] += g
                for r in range(nD):
                    dWt[k, r] += xw[r] * g
                    dxw[r] += Wt[k, r] * g


def conv_pool_backward(x, argmax, gpre, W):
    x = np.ascontiguousarray(x)
    Wt = np.ascontiguousarray(W.T)
    dx = np.zeros_like(x)
    dWt = np.zeros_like(Wt)
    db = np.zeros(W.shape[1], dtype=x.dtype)
    _conv_pool_backward(x, np.ascontiguousarray(argmax, dtype=np.int64),
                        np.ascontiguousarray(gpre, dtype=x.dtype), Wt, dx, dWt, db)
    return dx, np.ascontiguousarray(dWt.T), db


def _pool_forward(const floating[:, :, ::1] x, const cnp.int64_t[::1] lengths,
                  floating[:, ::1] out, cnp.int64_t[:, ::1] arg):
    cdef Py_ssize_t B = x.shape[0], D = x.shape[2]
    cdef Py_ssize_t bi, t, d
    with nogil:
        for bi in range(B):
            for d in range(D):
                out[bi, d] = x[bi, 0, d]
                arg[bi, d] = 0
            for t in range(1, lengths[bi]):
                for d in range(D):
                    if x[bi, t, d] > out[bi, d]:
                        out[bi, d] = x[bi, t, d]
                        arg[bi, d] = t


def pool_forward(x, lengths):
    x = np.ascontiguousarray(x)
    B, T, D = x.shape
    out = np.empty((B, D), dtype=x.dtype)
    arg = np.empty((B, D), dtype=np.int64)
    _pool_forward(x, np.ascontiguousarray(lengths, dtype=np.int64), out, arg)
    return out, arg


def pool_backward(argmax, g, T):
    g = np.ascontiguousarray(g)
    B, D = g.shape
    dx = np.zeros((B, T, D), dtype=g.dtype)
    rows = np.arange(B)[:, None]
    cols = np.arange(D)[None, :]
    dx[rows, argmax, cols] = g
    return dx


def _scatter_add_rows(floating[:, ::1] target, const cnp.int64_t[::1] ids,
                      const floating[:, ::1] rows):
    cdef Py_ssize_t N = ids.shape[0], D = rows.shape[1]
    cdef Py_ssize_t i, d, r
    cdef Py_ssize_t V = target.shape[0]
    for i in range(N):
        if ids[i] < 0 or ids[i] >= V:
            raise IndexError(f"row id {ids[i]} out of range for {V} rows")
    with nogil:
        for i in range(N):
            r = ids[i]
            for d in range(D):
                target[r, d] += rows[i, d]


def scatter_add_rows(target, ids, rows):
    """``target[ids[i]] += rows[i]`` with duplicate ids accumulating (in place)."""
    if not target.flags.c_contiguous:
        raise ValueError("scatter target must be C-contiguous")
    _scatter_add_rows(target, np.ascontiguousarray(ids, dtype=np.int64),
                      np.ascontiguousarray(rows, dtype=target.dtype))


def _row_norms(const floating[:, ::1] v, floating[::1] out):
    cdef Py_ssize_t N = v.shape[0], O = v.shape[1], i
    with nogil:
        for i in range(N):
            out[i] = sqrt(_dot(&v[i, 0], &v[i, 0], O))


def row_norms(vectors):
    vectors = np.ascontiguousarray(vectors)
    out = np.empty(vectors.shape[0], dtype=vectors.dtype)
    if vectors.shape[0]:
        _row_norms(vectors, out)
    return out


def cosine_scores(vectors, norms, q, rows=None):
    # a BLAS matvec beats any portable compiled loop here
    if rows is not None:
        vectors, norms = vectors[rows], norms[rows]
    qn = np.sqrt(np.dot(q, q))
    return (vectors @ q) / (norms * qn)


cdef inline bint _worse(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib) noexcept nogil:
    # True if (sa, ia) ranks below (sb, ib): lower score, or equal score and larger index
    return sa < sb or (sa == sb and ia > ib)


def _topk(const floating[::1] scores, cnp.int64_t[::1] heap):
    # min-heap of the k best entries, root = worst kept entry
    cdef Py_ssize_t m = scores.shape[0], k = heap.shape[0]
    cdef Py_ssize_t i, size = 0, pos, child, parent, tmp
    with nogil:
        for i in range(m):
            if size < k:
                pos = size
                heap[pos] = i
                size += 1
                while pos > 0:
                    parent = (pos - 1) >> 1
                    if _worse(scores[heap[pos]], heap[pos], scores[heap[parent]], heap[parent]):
                        tmp = heap[pos]; heap[pos] = heap[parent]; heap[parent] = tmp
                        pos = parent
                    else:
                        break
            elif _worse(scores[heap[0]], heap[0], scores[i], i):
                heap[0] = i
                pos = 0
                while True:
                    child = 2 * pos + 1
                    if child >= k:
                        break
                    if child + 1 < k and _worse(scores[heap[child + 1]], heap[child + 1],
                                                scores[heap[child]], heap[child]):
                        child += 1
                    if _worse(scores[heap[child]], heap[child], scores[heap[pos]], heap[pos]):
                        tmp = heap[pos]; heap[pos] = heap[child]; heap[child] = tmp
                        pos = child
                    else:
                        break


def topk(scores, k):
    """Indices of the k best scores, ordered by (score desc, index asc)."""
    scores = np.ascontiguousarray(scores)
    k = min(int(k), scores.shape[0])
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    heap = np.empty(k, dtype=np.int64)
    _topk(scores, heap)
    order = np.lexsort((heap, -scores[heap]))
    return heap[order]
