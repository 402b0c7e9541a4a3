"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Everything here is shape-dumb on purpose: callers flatten to 2D
(rows, features) or 1D before dispatch. Matmuls are NOT here — BLAS via
np.matmul beats naive jitted loops at every size this package uses.

Backend selection, at import time:
    RUIG_BACKEND=auto   use numba when importable, else numpy (default)
    RUIG_BACKEND=numba  require numba, raise if missing
    RUIG_BACKEND=numpy  force the fallback

Both backends are deterministic run-to-run; they may differ from each
other in the last ulp (different summation order), so a given run must
stick to one backend (the env var is read once).
"""

from __future__ import annotations

import math
import os

import numpy as np

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


# -- numpy implementations -----------------------------------------------------


def _softmax_rows_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def _softmax_rows_bwd_np(p, g):
    dot = (p * g).sum(axis=1, keepdims=True)
    return p * (g - dot)


def _layernorm_rows_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _layernorm_rows_bwd_np(xhat, rstd, gain, g):
    dxhat = g * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    gx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _gelu_np(x):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_bwd_np(x, g):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _embedding_bwd_np(ids, g, table_grad):
    np.add.at(table_grad, ids, g)


def _adam_update_np(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


_NUMPY_IMPLS = {
    "softmax_rows": _softmax_rows_np,
    "softmax_rows_bwd": _softmax_rows_bwd_np,
    "layernorm_rows": _layernorm_rows_np,
    "layernorm_rows_bwd": _layernorm_rows_bwd_np,
    "gelu": _gelu_np,
    "gelu_bwd": _gelu_bwd_np,
    "embedding_bwd": _embedding_bwd_np,
    "adam_update": _adam_update_np,
}


# -- numba implementations ------------------------------------------------------


def _build_numba_impls():
    from numba import njit

    @njit(cache=True)
    def softmax_rows(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, n):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(n):
                out[r, j] *= inv
        return out

    @njit(cache=True)
    def softmax_rows_bwd(p, g):
        rows, n = p.shape
        out = np.empty_like(p)
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot += p[r, j] * g[r, j]
            for j in range(n):
                out[r, j] = p[r, j] * (g[r, j] - dot)
        return out

    @njit(cache=True)
    def layernorm_rows(x, gain, bias, eps):
        rows, n = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=np.float64)
        for r in range(rows):
            mu = 0.0
            for j in range(n):
                mu += x[r, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[r, j] - mu
                var += d * d
            var /= n
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for j in range(n):
                h = (x[r, j] - mu) * rs
                xhat[r, j] = h
                y[r, j] = h * gain[j] + bias[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_rows_bwd(xhat, rstd, gain, g):
        rows, n = xhat.shape
        gx = np.empty_like(xhat)
        dgain = np.zeros(n, dtype=np.float64)
        dbias = np.zeros(n, dtype=np.float64)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(n):
                dh = g[r, j] * gain[j]
                m1 += dh
                m2 += dh * xhat[r, j]
            m1 /= n
            m2 /= n
            rs = rstd[r]
            for j in range(n):
                dh = g[r, j] * gain[j]
                gx[r, j] = (dh - m1 - xhat[r, j] * m2) * rs
                dgain[j] += g[r, j] * xhat[r, j]
                dbias[j] += g[r, j]
        return gx, dgain, dbias

    @njit(cache=True)
    def gelu(x):
        n = x.shape[0]
        out = np.empty_like(x)
        for i in range(n):
            xi = x[i]
            u = _GELU_C0 * (xi + _GELU_C1 * xi * xi * xi)
            out[i] = 0.5 * xi * (1.0 + math.tanh(u))
        return out

    @njit(cache=True)
    def gelu_bwd(x, g):
        n = x.shape[0]
        out = np.empty_like(x)
        for i in range(n):
            xi = x[i]
            u = _GELU_C0 * (xi + _GELU_C1 * xi * xi * xi)
            t = math.tanh(u)
            du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * xi * xi)
            out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
        return out

    @njit(cache=True)
    def embedding_bwd(ids, g, table_grad):
        n, d = g.shape
        for i in range(n):
            row = ids[i]
            for j in range(d):
                table_grad[row, j] += g[i, j]

    @njit(cache=True)
    def adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
        n = p.shape[0]
        for i in range(n):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)

    return {
        "softmax_rows": softmax_rows,
        "softmax_rows_bwd": softmax_rows_bwd,
        "layernorm_rows": layernorm_rows,
        "layernorm_rows_bwd": layernorm_rows_bwd,
        "gelu": gelu,
        "gelu_bwd": gelu_bwd,
        "embedding_bwd": embedding_bwd,
        "adam_update": adam_update,
    }


def get_impls(backend):
    """Return the kernel table for an explicit backend ('numpy' or 'numba')."""
    if backend == "numpy":
        return dict(_NUMPY_IMPLS)
    if backend == "numba":
        return _build_numba_impls()
    raise ValueError(f"unknown kernel backend: {backend!r}")


def _select_backend():
    choice = os.environ.get("RUIG_BACKEND", "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"RUIG_BACKEND must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return "numpy", dict(_NUMPY_IMPLS)
    try:
        impls = _build_numba_impls()
        return "numba", impls
    except ImportError:
        if choice == "numba":
            raise
        return "numpy", dict(_NUMPY_IMPLS)


BACKEND, _IMPLS = _select_backend()

softmax_rows = _IMPLS["softmax_rows"]
softmax_rows_bwd = _IMPLS["softmax_rows_bwd"]
layernorm_rows = _IMPLS["layernorm_rows"]
layernorm_rows_bwd = _IMPLS["layernorm_rows_bwd"]
gelu = _IMPLS["gelu"]
gelu_bwd = _IMPLS["gelu_bwd"]
embedding_bwd = _IMPLS["embedding_bwd"]
adam_update = _IMPLS["adam_update"]
