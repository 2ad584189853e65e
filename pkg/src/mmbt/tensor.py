"""Minimal reverse-mode autodiff engine.

A :class:`Tensor` wraps a contiguous float32 (or, in verification mode,
float64) numpy array plus an optional gradient buffer. Operations executed
inside a ``with Graph():`` block append one record per op to the active
tape; :func:`backward` replays the tape in reverse, accumulating gradients
(adding, never overwriting, so shared parameters work).

Training arithmetic is float32. Gradient verification runs the same ops in
float64 because float32 central differences are too noisy for the
tolerances enforced by :func:`finite_diff_check`.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Backward-pass contract violation (e.g. non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf where finite values are required."""


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def check_finite(self, context: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {context}")

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class OpRecord:
    """One executed operation: inputs, output, and a vjp closure."""

    __slots__ = ("name", "inputs", "output", "vjp")

    def __init__(self, name, inputs, output, vjp):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_ACTIVE = threading.local()


def _graph_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Tape of operations recorded during one forward pass.

    Records are appended in execution order, so the list is topologically
    sorted by construction and a single reverse sweep visits every
    operation exactly once.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _graph_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def apply_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Create the output tensor and record the op on the active graph.

    ``vjp`` maps the output gradient to one gradient (or None) per input.
    Extension ops (e.g. the training loss) use this hook to participate in
    backward passes without living in this module.
    """
    out = Tensor(out_data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.records.append(OpRecord(name, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    """Reverse-topological gradient accumulation seeded with d(loss)=1."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    for rec in reversed(graph.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.vjp(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is not None and t.requires_grad:
                t.accumulate_grad(gt)


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("add", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("mul", (a, b), out, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return apply_op("scale", (x,), x.data * c, lambda g: (g * c,))


def add_const(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return apply_op("add_const", (x,), x.data + c, lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0
    return apply_op("relu", (x,), out, lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error form x * Phi(x), not the tanh approximation."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return apply_op("gelu", (x,), out.astype(x.dtype, copy=False), vjp)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", (x,), out, vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return apply_op("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis >= x.data.ndim or axis < -x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of bounds for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", (x,), out, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gg = None
        gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        gx = None
        if x.requires_grad:
            gi = g * gamma.data
            gx = inv_std * (
                gi
                - gi.mean(axis=-1, keepdims=True)
                - xhat * (gi * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return apply_op("layer_norm", (x, gamma, beta), out, vjp)


# ---------------------------------------------------------------------------
# contractions, reshaping, gathering
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op("matmul", (a, b), out, vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape).copy()
    return apply_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return apply_op(
        "transpose", (x,), out, lambda g: (np.ascontiguousarray(np.transpose(g, inv)),)
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                pieces.append(np.ascontiguousarray(g[tuple(idx)]))
            else:
                pieces.append(None)
        return pieces

    return apply_op("concat", tuple(tensors), out, vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return apply_op("narrow", (x,), out, vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return apply_op("embedding", (table,), out, vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return apply_op("sum_all", (x,), out, lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis).astype(x.dtype),)

    return apply_op("mean_axis", (x,), out, vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; callers skip this op entirely in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return apply_op("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def conv2d(x: Tensor, kernels_t: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding over (N,C,H,W) or (C,H,W) input."""
    from . import kernels as K

    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels_t.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects (N,C,H,W) input and (Co,Ci,kh,kw) kernels, "
            f"got {x.shape} and {kernels_t.shape}"
        )
    n, ci, h, wd = xd.shape
    co, cik, kh, kw = kernels_t.shape
    if ci != cik:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernels {kernels_t.shape}"
        )
    K.conv_output_size(h, kh, stride, pad)
    K.conv_output_size(wd, kw, stride, pad)
    out = K.conv2d_forward(xd, kernels_t.data, stride, pad)

    def vjp(g):
        g4 = g[None] if squeeze else g
        g4 = np.ascontiguousarray(g4)
        gx = gw = None
        if x.requires_grad:
            gx = K.conv2d_backward_input(g4, kernels_t.data, stride, pad, h, wd)
            if squeeze:
                gx = gx[0]
        if kernels_t.requires_grad:
            gw = K.conv2d_backward_kernel(g4, xd, stride, pad, kh, kw)
        return gx, gw

    return apply_op("conv2d", (x, kernels_t), out[0] if squeeze else out, vjp)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3
) -> float:
    """Max relative error between autodiff and central differences.

    Runs everything in float64. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8). Raises :class:`NonFiniteError` if any
    evaluation or gradient is non-finite.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Graph() as graph:
        y = f(x64)
    if y.size != 1:
        raise GraphError(f"finite_diff_check needs a scalar function, got {y.shape}")
    y.check_finite("finite_diff_check forward value")
    backward(y, graph)
    if x64.grad is None:
        analytic = np.zeros_like(x64.data)
    else:
        analytic = x64.grad
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("non-finite analytic gradient in finite_diff_check")

    flat = x64.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(x64.data.copy())).data)
        flat[i] = orig - step
        lo = float(f(Tensor(x64.data.copy())).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(
                f"non-finite value at coordinate {i} while probing finite differences"
            )
        numeric[i] = (hi - lo) / (2.0 * step)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
