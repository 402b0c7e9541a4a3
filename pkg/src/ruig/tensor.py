"""Dense f64 tensors with tape-based reverse-mode autodiff.

Design: define-by-run. `apply` executes an op kind eagerly with numpy,
and when any input requires grad *and* a Tape is active, appends a
backward rule to that tape. `backward` replays the tape in reverse
execution order (which is a valid topological order by construction).

Kept deliberately small: the op set is exactly what a tiny transformer
plus its losses need. Broadcasting is supported in add/mul (and a 2D
operand in stacked matmul); backward unbroadcasts by summing reduced
axes. Everything is float64 so finite-difference checks have headroom.

Tensors are immutable after construction except gradient accumulation
and explicit parameter updates between steps; a Tape belongs to one
logical thread.
"""

from __future__ import annotations

import numpy as np

from . import kernels

OP_KINDS = (
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "softmax-lastdim",
    "layernorm",
    "gelu",
    "embedding-gather",
    "mean",
    "sum",
    "log",
    "exp",
)

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Input shapes invalid for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


def _all_finite(a):
    # isfinite(sum) catches NaN and +-Inf in one reduction pass.
    return np.isfinite(np.sum(a))


class Tensor:
    """N-dimensional f64 array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# -- tape ------------------------------------------------------------------------

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of executed ops; replayed in reverse by backward()."""

    __slots__ = ("entries", "consumed", "_prev")

    def __init__(self):
        self.entries = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


# -- forward + backward rules ------------------------------------------------------

def _op_matmul(a, b, attrs):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs >=2D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims must match: {a.shape} x {b.shape}")
    out = np.matmul(a, b)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, _swap(b)), a.shape)
        gb = _unbroadcast(np.matmul(_swap(a), g), b.shape)
        return ga, gb

    return out, bwd


def _op_add(a, b, attrs):
    try:
        out = a + b
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, bwd


def _op_mul(a, b, attrs):
    try:
        out = a * b
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def bwd(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, bwd


def _op_scale(a, attrs):
    c = float(attrs["factor"])
    out = a * c

    def bwd(g):
        return (g * c,)

    return out, bwd


def _op_transpose(a, attrs):
    perm = tuple(attrs["perm"])
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"perm {perm} invalid for ndim {a.ndim}")
    out = np.ascontiguousarray(np.transpose(a, perm))
    inv = tuple(np.argsort(perm))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return out, bwd


def _op_reshape(a, attrs):
    shape = tuple(attrs["shape"])
    out = a.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return out, bwd


def _op_concat(arrays, attrs):
    axis = int(attrs["axis"])
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = [arr.shape[axis] for arr in arrays]

    def bwd(g):
        pieces = []
        start = 0
        for n in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            pieces.append(g[tuple(idx)])
            start += n
        return tuple(pieces)

    return out, bwd


def _op_slice(a, attrs):
    axis = int(attrs["axis"])
    start, stop = int(attrs["start"]), int(attrs["stop"])
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] of axis {axis} size {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a[idx])

    def bwd(g):
        ga = np.zeros_like(a)
        ga[idx] = g
        return (ga,)

    return out, bwd


def _op_softmax(a, attrs):
    rows = a.reshape(-1, a.shape[-1])
    p = kernels.softmax_rows(np.ascontiguousarray(rows))
    out = p.reshape(a.shape)

    def bwd(g):
        gr = kernels.softmax_rows_bwd(p, np.ascontiguousarray(g.reshape(p.shape)))
        return (gr.reshape(a.shape),)

    return out, bwd


def _op_layernorm(x, gain, bias, attrs):
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layernorm gain/bias must be (last_dim,)")
    rows = np.ascontiguousarray(x.reshape(-1, n))
    y, xhat, rstd = kernels.layernorm_rows(rows, gain, bias, LAYERNORM_EPS)
    out = y.reshape(x.shape)

    def bwd(g):
        gx, dgain, dbias = kernels.layernorm_rows_bwd(
            xhat, rstd, gain, np.ascontiguousarray(g.reshape(-1, n))
        )
        return gx.reshape(x.shape), dgain, dbias

    return out, bwd


def _op_gelu(a, attrs):
    flat = np.ascontiguousarray(a.reshape(-1))
    out = kernels.gelu(flat).reshape(a.shape)

    def bwd(g):
        gx = kernels.gelu_bwd(flat, np.ascontiguousarray(g.reshape(-1)))
        return (gx.reshape(a.shape),)

    return out, bwd


def _op_embedding(table, attrs):
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2D")
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding ids out of range")
    out = np.ascontiguousarray(table[ids])

    def bwd(g):
        gt = np.zeros_like(table)
        kernels.embedding_bwd(ids.reshape(-1), np.ascontiguousarray(g.reshape(-1, table.shape[1])), gt)
        return (gt,)

    return out, bwd


def _reduce(a, attrs, np_fn, count_for_mean):
    axis = attrs.get("axis")
    keepdims = bool(attrs.get("keepdims", False))
    out = np_fn(a, axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.broadcast_to(g, a.shape).copy()
        if count_for_mean:
            gx /= count
        return (gx,)

    return out, bwd


def _op_sum(a, attrs):
    return _reduce(a, attrs, np.sum, count_for_mean=False)


def _op_mean(a, attrs):
    return _reduce(a, attrs, np.mean, count_for_mean=True)


def _op_log(a, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a)

    def bwd(g):
        return (g / a,)

    return out, bwd


def _op_exp(a, attrs):
    with np.errstate(over="ignore"):
        out = np.exp(a)

    def bwd(g):
        return (g * out,)

    return out, bwd


_UNARY = {
    "scale": _op_scale,
    "transpose": _op_transpose,
    "reshape": _op_reshape,
    "slice": _op_slice,
    "softmax-lastdim": _op_softmax,
    "gelu": _op_gelu,
    "embedding-gather": _op_embedding,
    "sum": _op_sum,
    "mean": _op_mean,
    "log": _op_log,
    "exp": _op_exp,
}


def apply(kind, inputs, **attrs):
    """Run one op on Tensor inputs; record its backward rule if needed.

    Raises ShapeError for invalid shapes, ValueError for unknown kinds and
    NonFiniteError when the output contains NaN/Inf.
    """
    if kind not in OP_KINDS:
        raise ValueError(f"unknown op kind: {kind!r}")
    arrays = [t.data for t in inputs]

    if kind == "matmul":
        out, bwd = _op_matmul(arrays[0], arrays[1], attrs)
    elif kind == "add":
        out, bwd = _op_add(arrays[0], arrays[1], attrs)
    elif kind == "mul":
        out, bwd = _op_mul(arrays[0], arrays[1], attrs)
    elif kind == "layernorm":
        if len(inputs) != 3:
            raise ShapeError("layernorm takes (x, gain, bias)")
        out, bwd = _op_layernorm(arrays[0], arrays[1], arrays[2], attrs)
    elif kind == "concat":
        if len(inputs) < 1:
            raise ShapeError("concat needs at least one input")
        out, bwd = _op_concat(arrays, attrs)
    else:
        if len(inputs) != 1:
            raise ShapeError(f"{kind} takes exactly one input")
        out, bwd = _UNARY[kind](arrays[0], attrs)

    if not _all_finite(out):
        raise NonFiniteError(f"non-finite output from op {kind!r}")

    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = any(t.requires_grad for t in inputs)
    result.grad = None
    result._leaf = False

    if result.requires_grad and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.entries.append((result, tuple(inputs), bwd))
    return result


def backward(loss, tape, leaves=None):
    """Propagate d(loss)/d(leaf) through the tape into leaf .grad fields.

    loss must be scalar. Leaves listed in `leaves` that the graph never
    touched end up with an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if tape.consumed:
        raise RuntimeError("backward called twice on the same tape")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    owned = {id(loss)}  # ids whose grad array we may mutate in place
    tensors = {id(loss): loss}

    for out, inputs, bwd in reversed(tape.entries):
        g = grads.get(id(out))
        if g is None:
            continue
        gins = bwd(g)
        for t, gin in zip(inputs, gins):
            if gin is None or not t.requires_grad:
                continue
            key = id(t)
            acc = grads.get(key)
            if acc is None:
                grads[key] = gin
                tensors[key] = t
            elif key in owned:
                acc += gin
            else:
                grads[key] = acc + gin
                owned.add(key)

    for key, t in tensors.items():
        if t._leaf and t.requires_grad:
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g
    if leaves is not None:
        for t in leaves:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    return grads


# -- gradient checking -----------------------------------------------------------

def finite_diff_check(f, params, eps=1e-5):
    """Max relative error between tape gradients of f and central differences.

    f maps the given parameter tensors to a scalar Tensor and must be
    deterministic. Relative error per coordinate is
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f(params)
    if not _all_finite(loss.data):
        raise NonFiniteError("f returned non-finite value")
    backward(loss, tape, leaves=params)

    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params).item()
            flat[i] = orig - eps
            fm = f(params).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("f returned non-finite value during probing")
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1e-12, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


# -- small graph-building helpers --------------------------------------------------

def constant(data):
    return Tensor(data, requires_grad=False)


def matmul(a, b):
    return apply("matmul", [a, b])


def add(a, b):
    return apply("add", [a, b])


def mul(a, b):
    return apply("mul", [a, b])


def scale(a, factor):
    return apply("scale", [a], factor=factor)


def transpose(a, perm):
    return apply("transpose", [a], perm=perm)


def reshape(a, shape):
    return apply("reshape", [a], shape=shape)


def concat(tensors_, axis):
    return apply("concat", list(tensors_), axis=axis)


def slice_(a, axis, start, stop):
    return apply("slice", [a], axis=axis, start=start, stop=stop)


def softmax_lastdim(a):
    return apply("softmax-lastdim", [a])


def layernorm(x, gain, bias):
    return apply("layernorm", [x, gain, bias])


def gelu(a):
    return apply("gelu", [a])


def embedding_gather(table, ids):
    return apply("embedding-gather", [table], ids=ids)


def mean(a, axis=None, keepdims=False):
    return apply("mean", [a], axis=axis, keepdims=keepdims)


def sum_(a, axis=None, keepdims=False):
    return apply("sum", [a], axis=axis, keepdims=keepdims)


def log(a):
    return apply("log", [a])


def exp(a):
    return apply("exp", [a])
