"""Dense float64 tensors with reverse-mode gradients over a small fixed op set.

Every op validates shapes explicitly (no broadcasting beyond a Python scalar)
and refuses to produce non-finite values. Gradients are recorded on the fly:
each result remembers its parents and a closure mapping the output gradient to
input gradients. ``backward`` replays those closures in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_seq = itertools.count()

# Op names whose backward rule is deliberately sign-flipped. Only touched by
# ``inject_grad_fault`` so the verification suite can prove it catches bugs.
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_grad_fault(op_name: str):
    _FAULTS.add(op_name)
    try:
        yield
    finally:
        _FAULTS.discard(op_name)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> "GradTape":
        return backward(self)

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("mul", self, -1.0), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._seq = next(_seq)
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        if op in _FAULTS:
            inner = backward_fn

            def backward_fn(g, _inner=inner):
                return [None if d is None else -d for d in _inner(g)]

        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# --------------------------------------------------------------------------
# elementwise and unary


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """``kind`` is one of add, sub, mul, div; ``b`` is a same-shape tensor or a scalar."""
    a = as_tensor(a)
    scalar = not isinstance(b, Tensor)
    if scalar:
        bv = float(b)
    else:
        if b.shape != a.shape:
            raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")
        bv = b.data
    with np.errstate(over="ignore", invalid="ignore"):
        # non-finite results are reported by _result as NumericError
        return _elementwise(kind, a, b, bv, scalar)


def _elementwise(kind, a, b, bv, scalar):
    if kind == "add":
        data = a.data + bv
        rule = lambda g: (g, None if scalar else g)
    elif kind == "sub":
        data = a.data - bv
        rule = lambda g: (g, None if scalar else -g)
    elif kind == "mul":
        data = a.data * bv
        rule = lambda g: (g * bv, None if scalar else g * a.data)
    elif kind == "div":
        if np.any(np.asarray(bv) == 0.0):
            raise NumericError("division by zero")
        data = a.data / bv
        rule = lambda g: (g / bv, None if scalar else -g * a.data / (bv * bv))
    else:
        raise ValueError(f"unknown elementwise op {kind!r}")
    parents = (a,) if scalar else (a, b)
    return _result(data, parents, kind, lambda g: rule(g)[: len(parents)])


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0.0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, a: Tensor, axes=None) -> Tensor:
    """Reduce over ``axes`` (int, tuple, or None for all); reduced axes are removed."""
    ax = _norm_axes(axes, a.ndim)
    kept = tuple(1 if i in ax else n for i, n in enumerate(a.shape))
    if kind == "sum":
        data = a.data.sum(axis=ax)
        rule = lambda g: (np.broadcast_to(g.reshape(kept), a.shape).copy(),)
    elif kind == "mean":
        count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
        if count == 0:
            raise ShapeError("mean over an empty axis")
        data = a.data.mean(axis=ax)
        rule = lambda g: (np.broadcast_to(g.reshape(kept), a.shape) / count,)
    elif kind == "max":
        if a.data.size == 0:
            raise ShapeError("max over an empty tensor")
        data = a.data.max(axis=ax)
        hit = a.data == data.reshape(kept)
        share = hit / hit.sum(axis=ax, keepdims=True)
        rule = lambda g: (share * g.reshape(kept),)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _result(np.asarray(data, dtype=np.float64), (a,), kind, rule)


def sum(a: Tensor, axes=None) -> Tensor:  # noqa: A001
    return reduce("sum", a, axes)


def mean(a: Tensor, axes=None) -> Tensor:
    return reduce("mean", a, axes)


def max(a: Tensor, axes=None) -> Tensor:  # noqa: A001
    return reduce("max", a, axes)


# --------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), "matmul",
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    return _result(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size or any(s < 0 for s in shape):
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    ndim = tensors[0].ndim
    (ax,) = _norm_axes(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def rule(g):
        idx = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", rule)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along one axis."""
    (ax,) = _norm_axes(axis, a.ndim)
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"narrow [{start}, {stop}) outside axis of size {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def rule(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _result(a.data[idx].copy(), (a,), "narrow", rule)


def lookup(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis; output drops that axis."""
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"lookup index shape {index.shape} does not match {a.shape[:-1]}")
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError("lookup index must be integral")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise ShapeError("lookup index out of range")
    picked = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def rule(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _result(picked, (a,), "lookup", rule)


# --------------------------------------------------------------------------
# normalized quantities


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=ax, keepdims=True)
    return _result(p, (a,), "softmax",
                   lambda g: (p * (g - (g * p).sum(axis=ax, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (a,), "log_softmax",
                   lambda g: (g - p * g.sum(axis=ax, keepdims=True),))


def normalize(a: Tensor, axis: int = -1) -> Tensor:
    """L2-normalize along ``axis``; a zero-norm slice raises NumericError."""
    (ax,) = _norm_axes(axis, a.ndim)
    n = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
    if np.any(n == 0.0):
        raise NumericError("cannot normalize a zero-norm vector")
    u = a.data / n
    return _result(u, (a,), "normalize",
                   lambda g: ((g - u * (g * u).sum(axis=ax, keepdims=True)) / n,))


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-d vectors, returned as a 0-d tensor."""
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_sim needs equal-length vectors, got {a.shape} and {b.shape}")
    na = np.sqrt(a.data @ a.data)
    nb = np.sqrt(b.data @ b.data)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity of a zero-norm vector")
    dot = a.data @ b.data
    # dot is symmetric in floating point, so swapping arguments is bitwise stable
    value = dot / (na * nb)

    def rule(g):
        ga = g * (b.data / (na * nb) - value * a.data / (na * na))
        gb = g * (a.data / (na * nb) - value * b.data / (nb * nb))
        return ga, gb

    return _result(np.asarray(value), (a, b), "cosine_sim", rule)


# --------------------------------------------------------------------------
# convolution (NHWC input, kernel laid out kh x kw x c_in x c_out)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # -> N, Ho, Wo, C, kh, kw ; strided then reorder to N, Ho, Wo, kh, kw, C
    win = win[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4 or bias.ndim != 1:
        raise ShapeError("conv2d expects x[N,H,W,C], kernel[kh,kw,Cin,Cout], bias[Cout]")
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin or bias.shape[0] != cout:
        raise ShapeError(f"conv2d channel mismatch: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    cols = _windows(xp, kh, kw, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ wmat + bias.data).reshape(n, ho, wo, cout)

    def rule(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols2.T @ g2).reshape(kernel.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :]
        return gx, gk, gb

    return _result(out, (x, kernel, bias), "conv2d", rule)


# --------------------------------------------------------------------------
# gradient replay


class GradTape:
    """The recorded ops reachable from a loss, in reverse execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @property
    def ops(self) -> list[str]:
        return [t._op for t in self.nodes]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` on every gradient-tracked leaf reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if t.is_leaf:
            t.grad = np.zeros(t.shape) if g is None else g
            continue
        if g is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return GradTape(nodes)
