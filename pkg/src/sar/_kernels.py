"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorised
numpy version.  ``USE_NUMBA`` picks the one bound to the public name; both
are importable so tests and benchmarks can compare them.
"""
import numpy as np

from ._jit import JIT_DISABLED, njit

USE_NUMBA = not JIT_DISABLED

NEG_INF = -np.inf


# -- masked softmax over the last axis -------------------------------------

def softmax_lastaxis_numpy(x, mask):
    """Softmax over the last axis; ``mask`` (bool, broadcastable) marks valid slots."""
    z = np.where(mask, x, NEG_INF)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@njit(cache=True)
def _softmax_rows_jit(x2, m2):
    rows, cols = x2.shape
    out = np.zeros_like(x2)
    for r in range(rows):
        mx = -np.inf
        for c in range(cols):
            if m2[r, c] and x2[r, c] > mx:
                mx = x2[r, c]
        s = 0.0
        for c in range(cols):
            if m2[r, c]:
                v = np.exp(x2[r, c] - mx)
                out[r, c] = v
                s += v
        for c in range(cols):
            out[r, c] /= s
    return out


def softmax_lastaxis_numba(x, mask):
    m = np.broadcast_to(mask, x.shape)
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    m2 = np.ascontiguousarray(m).reshape(-1, x.shape[-1])
    return _softmax_rows_jit(x2, m2).reshape(x.shape)


def softmax_backward_numpy(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


@njit(cache=True)
def _softmax_backward_rows_jit(y2, g2):
    rows, cols = y2.shape
    out = np.empty_like(y2)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += g2[r, c] * y2[r, c]
        for c in range(cols):
            out[r, c] = y2[r, c] * (g2[r, c] - dot)
    return out


def softmax_backward_numba(y, gy):
    y2 = np.ascontiguousarray(y).reshape(-1, y.shape[-1])
    g2 = np.ascontiguousarray(gy).reshape(-1, y.shape[-1])
    return _softmax_backward_rows_jit(y2, g2).reshape(y.shape)


# -- binary cross-entropy with logits ---------------------------------------

def bce_logits_numpy(z, t):
    """Elementwise ``-(t log s(z) + (1-t) log(1-s(z)))`` without overflow."""
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


@njit(cache=True)
def _bce_flat_jit(z, t):
    out = np.empty_like(z)
    for i in range(z.size):
        zi = z[i]
        out[i] = max(zi, 0.0) - zi * t[i] + np.log1p(np.exp(-abs(zi)))
    return out


def bce_logits_numba(z, t):
    z = np.ascontiguousarray(z, dtype=np.float64)
    t = np.ascontiguousarray(np.broadcast_to(t, z.shape), dtype=np.float64)
    return _bce_flat_jit(z.ravel(), t.ravel()).reshape(z.shape)


def sigmoid_numpy(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@njit(cache=True)
def _sigmoid_flat_jit(z):
    out = np.empty_like(z)
    for i in range(z.size):
        zi = z[i]
        if zi >= 0:
            out[i] = 1.0 / (1.0 + np.exp(-zi))
        else:
            e = np.exp(zi)
            out[i] = e / (1.0 + e)
    return out


def sigmoid_numba(z):
    z = np.ascontiguousarray(z, dtype=np.float64)
    return _sigmoid_flat_jit(z.ravel()).reshape(z.shape)


# -- top-N selection ----------------------------------------------------------

def topn_rows_numpy(scores, n):
    """Indices of the ``n`` largest entries per row, descending, ties by lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :n]


@njit(cache=True)
def _topn_rows_jit(scores, n):
    rows, cols = scores.shape
    out = np.empty((rows, n), dtype=np.int64)
    vals = np.empty(n)
    for r in range(rows):
        filled = 0
        for c in range(cols):
            v = scores[r, c]
            if filled == n and not v > vals[n - 1]:
                continue
            # insertion into the sorted buffer; strict > keeps earlier columns first on ties
            k = filled if filled < n else n - 1
            while k > 0 and v > vals[k - 1]:
                vals[k] = vals[k - 1]
                out[r, k] = out[r, k - 1]
                k -= 1
            vals[k] = v
            out[r, k] = c
            if filled < n:
                filled += 1
    return out


def topn_rows_numba(scores, n):
    s = np.ascontiguousarray(np.atleast_2d(scores), dtype=np.float64)
    out = _topn_rows_jit(s, n)
    return out if np.ndim(scores) == 2 else out[0]


if USE_NUMBA:
    softmax_lastaxis = softmax_lastaxis_numba
    softmax_backward = softmax_backward_numba
    bce_logits = bce_logits_numba
    sigmoid = sigmoid_numba
    topn_rows = topn_rows_numba
else:
    softmax_lastaxis = softmax_lastaxis_numpy
    softmax_backward = softmax_backward_numpy
    bce_logits = bce_logits_numpy
    sigmoid = sigmoid_numpy
    topn_rows = topn_rows_numpy
