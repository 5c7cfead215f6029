"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output adjoint to one adjoint per parent.  Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order.

Broadcasting
------------
Binary elementwise ops and :func:`matmul` follow numpy broadcasting.  The
adjoint of a broadcast operand is summed over every broadcast axis so that
it has the operand's own shape, which keeps the rule symmetric in both
arguments.  No other implicit rank promotion happens.

Gradient accumulation
---------------------
``backward`` adds into ``.grad`` of every leaf tensor that requires grad; running
it twice without :func:`zero_grad` accumulates.  Max reductions and max
pooling send the adjoint to the first maximal element in C scan order.
"""

from __future__ import annotations

import builtins
import struct
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from . import kernels

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

MAGIC = b"AMPTNSR1"


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple = ()
        self.backward_fn: Optional[BackwardFn] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = fn
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------


class Graph:
    """Topologically ordered operation records reachable from an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.trace(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            # leaf: accumulate
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                   "div")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; the adjoint is zero where the floor is active."""
    keep = x.data >= floor
    return _result(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "neg": neg,
    "square": square,
    "sqrt": sqrt,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, *args):
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy-broadcast over the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), fn, "matmul")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; with no ``axes`` swap the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), fn, "getitem")


def flip(x: Tensor, axis: int) -> Tensor:
    return _result(np.flip(x.data, axis), (x,), lambda g: (np.flip(g, axis),), "flip")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    return _result(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: unequal shapes {[t.shape for t in tensors]}")
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(data, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _expand_like(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    return _result(x.data.sum(axis=axes, keepdims=keepdims), (x,),
                   lambda g: (_expand_like(g, shape, axes, keepdims).copy(),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes])) if axes else 1
    return _result(x.data.mean(axis=axes, keepdims=keepdims), (x,),
                   lambda g: (_expand_like(g, shape, axes, keepdims) / n,), "mean")


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max over ``axis``; the adjoint goes to the first maximal element."""
    axes = _norm_axes(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    moved = np.transpose(x.data, perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.expand_dims(vals, axes) if keepdims else vals
    inv = np.argsort(perm)

    def fn(g):
        if keepdims:
            g = np.squeeze(g, axis=axes)
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), inv),)

    return _result(out, (x,), fn, "max")


REDUCTIONS = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return REDUCTIONS[op](x, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _result(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# Layers with fused adjoints
# ---------------------------------------------------------------------------


def conv_feature(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Convolution along the feature axis only.

    ``x`` is ``[B, C_in, F, T]`` and ``kernel`` is ``[C_out, C_in, K, 1]`` with
    odd ``K``.  The feature axis is zero padded by ``K // 2`` on both sides so
    ``F`` is preserved; time is untouched.
    """
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[3] != 1:
        raise DimensionError(f"conv_feature: bad shapes x={x.shape} kernel={kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"conv_feature: x has {x.shape[1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv_feature: bias {bias.shape} does not match {c_out} outputs")
    pad = k // 2
    b, _, f, t = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    cols = np.stack([xp[:, :, j:j + f, :] for j in range(k)], axis=2)  # B,Cin,K,F,T
    w = kernel.data[..., 0]  # Cout,Cin,K
    out = np.tensordot(cols, w, axes=([1, 2], [1, 2]))  # B,F,T,Cout
    out = np.transpose(out, (0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def fn(g):
        gx = gw = gb = None
        if kernel.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 3, 4]))[..., None]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = np.tensordot(g, w, axes=([1], [0]))  # B,F,T,Cin,K
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[:, :, j:j + f, :] += np.transpose(gcols[..., j], (0, 3, 1, 2))
            gx = gxp[:, :, pad:pad + f, :]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(np.ascontiguousarray(out), parents, fn, "conv_feature")


def maxpool_feature(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pool along axis 2 of ``[B, C, F, T]``; ``F`` floors."""
    b, c, f, t = x.shape
    fo = f // size
    if fo < 1:
        raise DimensionError(f"maxpool_feature: feature axis {f} shorter than window {size}")
    win = x.data[:, :, : fo * size, :].reshape(b, c, fo, size, t)
    idx = np.argmax(win, axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def fn(g):
        gwin = np.zeros(win.shape)
        np.put_along_axis(gwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = np.zeros((b, c, f, t))
        gx[:, :, : fo * size, :] = gwin.reshape(b, c, fo * size, t)
        return (gx,)

    return _result(out, (x,), fn, "maxpool_feature")


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over ``x`` of shape ``[B, T, D]``; returns ``[B, T, H]``.

    Gate blocks in ``w_ih`` (``[D, 4H]``), ``w_hh`` (``[H, 4H]``) and ``b`` are
    ordered input, forget, candidate, output.  Zero initial state.
    """
    bsz, steps, d = x.shape
    hidden = w_hh.shape[0]
    if w_ih.shape != (d, 4 * hidden) or w_hh.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise DimensionError(
            f"lstm: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape} inconsistent")
    xs = np.transpose(x.data, (1, 0, 2))  # T,B,D
    if reverse:
        xs = xs[::-1]
    xs = np.ascontiguousarray(xs)
    pre = np.ascontiguousarray(xs @ w_ih.data + b.data)
    whh = np.ascontiguousarray(w_hh.data)
    hs, cs, acts = kernels.lstm_forward(pre, whh)
    out = hs[::-1] if reverse else hs
    out = np.ascontiguousarray(np.transpose(out, (1, 0, 2)))

    def fn(g):
        dhs = np.transpose(g, (1, 0, 2))
        if reverse:
            dhs = dhs[::-1]
        dpre = kernels.lstm_backward(np.ascontiguousarray(dhs), cs, acts, whh)
        flat = dpre.reshape(-1, 4 * hidden)
        h_prev = np.concatenate([np.zeros((1, bsz, hidden)), hs[:-1]], axis=0).reshape(-1, hidden)
        gw_hh = h_prev.T @ flat
        gw_ih = xs.reshape(-1, d).T @ flat
        gb = flat.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxs = dpre @ w_ih.data.T
            if reverse:
                gxs = gxs[::-1]
            gx = np.transpose(gxs, (1, 0, 2))
        return gx, gw_ih, gw_hh, gb

    return _result(out, (x, w_ih, w_hh, b), fn, "lstm")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic and central-difference gradient.

    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    numeric = numeric_grad(lambda arr: float(f(Tensor(arr)).data.sum()), x.data, eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    base = np.array(x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(base)
        flat[i] = orig - eps
        down = f(base)
        flat[i] = orig
        gflat[i] = _central(up, down, eps)
    return grad


def _central(up: float, down: float, eps: float) -> float:
    # a difference within a few ulps of f carries no slope information
    if abs(up - down) <= 4 * np.finfo(np.float64).eps * builtins.max(abs(up), abs(down)):
        return 0.0
    return (up - down) / (2 * eps)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None
                      ) -> float:
    """Like :func:`grad_check` but for several parameter tensors read by ``loss_fn``.

    ``max_coords`` limits the number of probed coordinates per tensor (sampled
    with ``rng``); every coordinate is probed when it is ``None``.
    """
    zero_grad(params)
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data.sum())
            flat[i] = orig - eps
            down = float(loss_fn().data.sum())
            flat[i] = orig
            num = _central(up, down, eps)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - num) / builtins.max(abs(ana), abs(num), 1e-8)
            worst = builtins.max(worst, err)
    zero_grad(params)
    return worst


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def to_bytes(x: Union[Tensor, np.ndarray]) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise ValueError(f"bad tensor magic {buf[:8]!r}")
    (rank,) = struct.unpack_from("<I", buf, 8)
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    start = 12 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - start != 8 * n:
        raise ValueError(f"tensor payload is {len(buf) - start} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)


def save(x: Union[Tensor, np.ndarray], path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_bytes(x))


def load(path: Union[str, Path]) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def save_csv(x: Union[Tensor, np.ndarray], path: Union[str, Path]) -> None:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"CSV export needs a 2-D tensor, got {arr.shape}")
    lines = [",".join(f"{v:.17g}" for v in row) for row in arr]
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path: Union[str, Path]) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line]
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
