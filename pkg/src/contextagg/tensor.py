"""Dense tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor`; nothing that participates in a
graph is mutated in place.  A node records its parents and a closure that maps
the upstream gradient to one gradient per parent.  :func:`backward` walks the
recorded graph in reverse topological order and accumulates into the leaves.

The op set is deliberately closed: matmul, transpose/permute, reshape,
concat/split, take (gather along the last axis), add/mul/scale, GELU,
softmax over the last axis, layer normalization, sum/mean and cross-entropy.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape (inference, evaluation)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in DTYPES.values():
        raise TypeError(f"unsupported dtype {dt}; expected f32 or f64")
    return dt


class Tensor:
    """Immutable n-d array, optionally part of a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, dtype="f64", requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_as_dtype(dtype))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Param(Tensor):
    """Trainable leaf.  ``grad`` always has the value's shape."""

    __slots__ = ()

    def __init__(self, value, dtype="f64", name: str | None = None, requires_grad: bool = True):
        super().__init__(value, dtype=dtype, requires_grad=True, name=name)
        self.requires_grad = requires_grad

    @property
    def value(self) -> np.ndarray:
        return self.data

    def assign(self, value) -> None:
        """Replace the stored value (optimizer updates, checkpoint loads)."""
        arr = np.asarray(value, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to param {self.name!r} of shape {self.data.shape}")
        self.data = arr.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def tensor(data, dtype="f64", requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _check_dtype(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"dtype mismatch: {dt} vs {t.dtype}")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float64))
    b = _lift(b, a.dtype)
    _check_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float64))
    b = _lift(b, a.dtype)
    _check_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def grad_of(g, this, other):
        if this.size == 1 and other.shape == g.shape:
            # Scalar factor: contract without materialising g * other.
            return np.asarray(np.dot(g.ravel(), other.data.ravel()), dtype=g.dtype).reshape(this.shape)
        return _unbroadcast(g * other.data, this.shape)

    def backward(g):
        return (
            grad_of(g, a, b) if a.requires_grad else None,
            grad_of(g, b, a) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _node(a.data * s, (a,), backward)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _node(xd * cdf, (x,), backward)


# ---------------------------------------------------------------- linear algebra


def _gemm_ready(x: np.ndarray) -> np.ndarray:
    """Copy unless every 2-d slice is row- or column-major (else numpy skips BLAS)."""
    if x.ndim < 2:
        return x
    item = x.itemsize
    s1, s0 = x.strides[-1], x.strides[-2]
    if (s1 == item and s0 >= x.shape[-1] * item) or (s0 == item and s1 >= x.shape[-2] * item):
        return x
    return np.ascontiguousarray(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(_gemm_ready(a.data), _gemm_ready(b.data))
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(_gemm_ready(g), _gemm_ready(np.swapaxes(b.data, -1, -2))), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                q = a.shape[-1]
                gb = a.data.reshape(-1, q).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(_gemm_ready(np.swapaxes(a.data, -1, -2)), _gemm_ready(g)), b.shape)
        return ga, gb

    return _node(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(np.swapaxes(a.data, -1, -2), (a,), backward)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return _node(out, (a,), backward)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(ts)
    _check_dtype(*ts)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _node(out, ts, backward)


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into ``sections`` equal slices along ``axis``."""
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"axis of extent {n} does not split into {sections} equal parts")
    width = n // sections
    ax = axis % a.ndim
    outs = []
    for i in range(sections):
        index = [slice(None)] * a.ndim
        index[ax] = slice(i * width, (i + 1) * width)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        outs.append(_node(a.data[index], (a,), backward))
    return outs


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[..., index]`` along the last axis (``index`` is a constant int array)."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"take index out of range for last axis of extent {n}")
    out = np.ascontiguousarray(a.data[..., index])

    def backward(g):
        lead = a.shape[:-1]
        rows = int(np.prod(lead)) if lead else 1
        g2 = g.reshape(rows, index.size)
        offsets = (np.arange(rows) * n)[:, None] + index.reshape(1, -1)
        flat = np.bincount(offsets.ravel(), weights=g2.ravel(), minlength=rows * n)
        return (flat.reshape(a.shape).astype(a.dtype, copy=False),)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------- reductions / normalisation


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    xd = x.data
    top = xd.max(axis=-1, keepdims=True)
    if np.isnan(top).any():  # a NaN anywhere in a row propagates to its max
        raise NumericError("softmax received NaN input")
    y = np.subtract(xd, top)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        t = g * y
        dot = t.sum(axis=-1, keepdims=True)
        np.subtract(g, dot, out=t)
        t *= y
        return (t,)

    return _node(y, (x,), backward)


softmax_rows = softmax


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine pair."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    c = xd.shape[-1]
    parents = (x,) + tuple(t for t in (gamma, beta) if t is not None)

    def backward(g):
        gx = g * gamma.data if gamma is not None else g
        dx = None
        if x.requires_grad:
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / c)
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape) if beta.requires_grad else None)
        return tuple(grads)

    return _node(out, parents, backward)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits[B, K]`` against integer ``labels[B]``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [B, K] and labels [B], got {logits.shape} and {labels.shape}")
    z = logits.data
    if np.isnan(z).any():
        raise NumericError("cross_entropy received NaN logits")
    zs = z - z.max(axis=-1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    rows = np.arange(z.shape[0])
    losses = -logp[rows, labels]
    if reduction == "mean":
        denom = max(z.shape[0], 1)
    elif reduction == "sum":
        denom = 1
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.asarray(losses.sum() / denom, dtype=z.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / denom),)

    return _node(out, (logits,), backward)


# ---------------------------------------------------------------- backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, sink: dict[int, np.ndarray] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    With ``sink`` given, leaf gradients are added to ``sink[id(leaf)]`` instead,
    so several tapes can run concurrently without touching shared state.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if sink is not None:
                key = id(node)
                sink[key] = sink[key] + g if key in sink else np.array(g, dtype=node.dtype)
            else:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()
