"""Minimal dense-tensor engine with reverse-mode autodiff.

Tensors wrap contiguous numpy arrays (float32 by default, float64 available
for high-precision oracles). Forward primitives record onto an explicitly
opened Graph; ``backward`` replays the tape in reverse and accumulates
gradients into ``Tensor.grad``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5

# When True every primitive asserts its output is finite (debug aid).
_check_finite = False


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{kind}: incompatible shapes {pretty}")


class Tensor:
    """Dense N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shapes intact
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant_like(t: Tensor, data) -> Tensor:
    """A non-tracked tensor with the same dtype as ``t``."""
    return Tensor(data, requires_grad=False, dtype=t.data.dtype)


class OpRecord:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of op records in execution (topological) order.

    Opened as a context manager; primitives executed inside record
    themselves when any input requires grad. Only one graph may be
    active at a time.
    """

    _active: Optional["Graph"] = None

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Graph":
        if Graph._active is not None:
            raise RuntimeError("a Graph is already recording")
        Graph._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Graph._active = None
        return False

    def __len__(self) -> int:
        return len(self.records)


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    if _check_finite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{kind}: non-finite values in output")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    graph = Graph._active
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.records.append(OpRecord(kind, tuple(inputs), out, backward_fn))
    else:
        out.requires_grad = False
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- primitives -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting (trailing axes included)."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("broadcast_mul", a.shape, b.shape) from None
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _record("broadcast_mul", (a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * a.data.dtype.type(s)

    def bwd(g):
        return (g * s,)

    return _record("scale", (a,), out, bwd)


def gelu(x: Tensor) -> Tensor:
    # exact erf form: 0.5 * x * (1 + erf(x / sqrt(2)))
    inv_sqrt2 = x.data.dtype.type(1.0 / math.sqrt(2.0))
    e = erf(x.data * inv_sqrt2)
    out = 0.5 * x.data * (1.0 + e)
    pdf_c = x.data.dtype.type(1.0 / math.sqrt(2.0 * math.pi))

    def bwd(g):
        local = 0.5 * (1.0 + e) + x.data * np.exp(-0.5 * x.data * x.data) * pdf_c
        return (g * local,)

    return _record("gelu", (x,), out.astype(x.data.dtype, copy=False), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _record("relu", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_stable(x.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, bwd)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    # row max subtracted before exponentiation (overflow guard)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax_lastdim", (x,), out, bwd)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax_lastdim", (x,), out, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        t = g * gain.data
        dx = inv * (t - t.mean(axis=-1, keepdims=True)
                    - xhat * (t * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _record("layer_norm", (x, gain, bias), out, bwd)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    # 64-bit accumulation keeps large reductions exact enough for the
    # integer cost identities; result stays in the input dtype.
    out = x.data.mean(axis=axis, dtype=np.float64).astype(x.data.dtype)
    count = x.size if axis is None else x.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full_like(x.data, 1.0 / count) * g,)
        return (np.expand_dims(g, axis) / count * np.ones_like(x.data),)

    return _record("reduce_mean", (x,), np.asarray(out), bwd)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis, dtype=np.float64).astype(x.data.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("reduce_sum", (x,), np.asarray(out), bwd)


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("transpose_last2", x.shape)
    out = np.swapaxes(x.data, -1, -2)

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _record("transpose_last2", (x,), np.ascontiguousarray(out), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _record("concat", tuple(tensors), out, bwd)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select a single index along ``axis``; that axis is dropped."""
    out = np.take(x.data, int(index), axis=axis)  # already a fresh copy

    def bwd(g):
        gx = np.zeros_like(x.data)
        idx = [slice(None)] * x.ndim
        idx[axis] = index
        gx[tuple(idx)] = g
        return (gx,)

    return _record("take", (x,), out, bwd)


def hard_threshold_ste(x: Tensor, threshold: float = 0.5) -> Tensor:
    """Forward thresholds to {0,1}; backward passes the gradient through."""
    out = (x.data > threshold).astype(x.data.dtype)

    def bwd(g):
        return (g,)

    return _record("hard_threshold_ste", (x,), out, bwd)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "broadcast_mul": broadcast_mul,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "layer_norm": layer_norm,
    "reduce_mean": reduce_mean,
    "relu": relu,
    "sigmoid": sigmoid,
    "scale": scale,
    "log_softmax_lastdim": log_softmax_lastdim,
    "reduce_sum": reduce_sum,
    "transpose_last2": transpose_last2,
    "reshape": reshape,
    "concat": concat,
    "take": take,
    "hard_threshold_ste": hard_threshold_ste,
}


def forward_primitive(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch a primitive by name. Shape mismatches raise ShapeError."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind: {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# --- backward ---------------------------------------------------------------

def backward(graph: Graph, loss: Tensor) -> dict:
    """Reverse sweep over the tape; accumulates into ``.grad``.

    Returns a map from every requires-grad tensor seen on the tape to its
    gradient for this call (before accumulation into ``.grad``). Tensors on
    the tape that do not influence the loss receive zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.records:
        raise ValueError("backward on empty graph")

    # [value, owned]: unowned entries may alias buffers shared with other
    # tensors; they are replaced (not mutated) on the first accumulation
    flowing: dict[int, list] = {id(loss): [np.ones_like(loss.data), True]}
    produced = {id(rec.output) for rec in graph.records}
    for rec in reversed(graph.records):
        entry = flowing.pop(id(rec.output), None)
        if entry is None:
            continue
        gins = rec.backward_fn(entry[0])
        for inp, gin in zip(rec.inputs, gins):
            if gin is None or not inp.requires_grad:
                continue
            acc = flowing.get(id(inp))
            if acc is None:
                flowing[id(inp)] = [gin, False]
            elif acc[1]:
                acc[0] += gin
            else:
                acc[0] = acc[0] + gin
                acc[1] = True

    grad_map: dict[Tensor, np.ndarray] = {}
    seen: set[int] = set()
    for rec in graph.records:
        for t in rec.inputs + (rec.output,):
            if not t.requires_grad or id(t) in seen:
                continue
            seen.add(id(t))
            entry = flowing.get(id(t))
            g = entry[0] if entry is not None else np.zeros_like(t.data)
            grad_map[t] = g
            if id(t) not in produced:  # leaves own persistent .grad
                t.accumulate_grad(g)
    return grad_map


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-3) -> float:
    """Max relative error between analytic gradient of ``f`` and central
    differences: |analytic - (f(x+h e) - f(x-h e)) / 2h| / (|analytic| + 1e-8).
    """
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    with Graph() as g:
        y = f(probe)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("finite_diff_check: f(x) is not finite")
    backward(g, y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        shifted = x.data.copy().reshape(-1)
        shifted[i] = orig + h
        fp = float(f(Tensor(shifted.reshape(x.shape), dtype=x.data.dtype)).item())
        shifted[i] = orig - h
        fm = float(f(Tensor(shifted.reshape(x.shape), dtype=x.data.dtype)).item())
        fd = (fp - fm) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - fd) / (abs(a) + 1e-8))
    return worst
