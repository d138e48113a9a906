"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. Every op that sees a gradient-requiring input
records its parents and a backward closure on the output; `backward()` on a
scalar walks that tape in reverse topological order and accumulates grads
into `.grad` (a numpy array of the same shape). The tape is freed as it is
consumed unless the caller asks to keep it.

Float32 is the training dtype; gradient-check builds switch the module
default to float64 via `set_default_dtype` or the `default_dtype` context
manager. Ops never change dtype silently.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use np.float32 or np.float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used by tensor constructors."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # --- introspection ---

    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # --- autodiff machinery ---

    def _record(self, parents: tuple["Tensor", ...], backward) -> "Tensor":
        """Attach tape context to self if grad mode is on and any parent needs it."""
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = parents
            self._backward = backward
        return self

    def backward(self, free_graph: bool = True) -> None:
        """Reverse-mode sweep from a scalar; fills `.grad` on every
        gradient-requiring tensor reachable on the tape. Consumes the tape
        unless `free_graph=False`."""
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += g
        if free_graph:
            # drop grads held by intermediates; leaves keep theirs
            for node in topo:
                if node is not self and node.grad is not None and not _is_leafish(node):
                    node.grad = None
            for node in topo:
                node._parents = ()
                node._backward = None

    def zero_grad(self) -> None:
        self.grad = None

    # --- arithmetic ---

    def __add__(self, other):
        return _binary(self, other, np.add, "add", lambda a, b, g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, "sub", lambda a, b, g: (g, -g))

    def __rsub__(self, other):
        return _wrap(other, self.data.dtype) - self

    def __mul__(self, other):
        return _binary(self, other, np.multiply, "mul", lambda a, b, g: (g * b.data, g * a.data))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            self, other, np.divide, "div",
            lambda a, b, g: (g / b.data, -g * a.data / (b.data * b.data)),
        )

    def __neg__(self):
        out = Tensor(-self.data, dtype=self.data.dtype)
        return out._record((self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        out = Tensor(self.data[index], dtype=self.data.dtype)
        shape, dtype = self.data.shape, self.data.dtype

        def bwd(g):
            gx = np.zeros(shape, dtype=dtype)
            np.add.at(gx, index, g)
            return (gx,)

        return out._record((self,), bwd)

    # --- shape ops ---

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), dtype=self.data.dtype)
        orig = self.data.shape
        return out._record((self,), lambda g: (g.reshape(orig),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        out = Tensor(self.data.transpose(axes), dtype=self.data.dtype)
        inv = tuple(np.argsort(axes))
        return out._record((self,), lambda g: (g.transpose(inv),))

    # --- reductions ---

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), dtype=self.data.dtype)
        shape = self.data.shape

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, shape).astype(self.data.dtype, copy=False),)

        return out._record((self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _is_leafish(t: Tensor) -> bool:
    return t.requires_grad and t._parents == ()


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    return int(np.prod([shape[a] for a in axis]))


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a: Tensor, b, fn, opname: str, grads) -> Tensor:
    b = _wrap(b, a.data.dtype)
    try:
        raw = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from exc
    out = Tensor(raw, dtype=raw.dtype)
    a_shape, b_shape = a.data.shape, b.data.shape

    def bwd(g):
        ga, gb = grads(a, b, g)
        ga = None if ga is None else _unbroadcast(ga, a_shape)
        gb = None if gb is None else _unbroadcast(gb, b_shape)
        return (ga, gb)

    return out._record((a, b), bwd)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked leading dims; inner dims must agree."""
    a = _wrap(a, None)
    b = _wrap(b, a.data.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.data.dtype)
    a_shape, b_shape = a.data.shape, b.data.shape

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a_shape), _unbroadcast(gb, b_shape))

    return out._record((a, b), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p, None) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), dtype=parts[0].data.dtype)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return out._record(tuple(parts), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; rows sum to 1."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, dtype=x.data.dtype)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return out._record((x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs feature dim {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data, dtype=x.data.dtype)

    def bwd(g):
        dxhat = g * gamma.data
        # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return (dx, dgamma, dbeta)

    return out._record((x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf, dtype=x.data.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return out._record((x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    y = y.astype(d.dtype, copy=False)
    out = Tensor(y, dtype=d.dtype)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return out._record((x,), bwd)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    d = x.data
    out = Tensor(np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d))), dtype=d.dtype)

    def bwd(g):
        s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
        return (g * s.astype(d.dtype, copy=False),)

    return out._record((x,), bwd)


def nll_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross-entropy: -log softmax(logits)[i, targets[i]].

    `logits` is (N, V); `targets` an int array (N,). Returns a (N,) tensor so
    callers choose the reduction (and any per-row weights). Stable via
    log-sum-exp.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"nll_rows: logits must be 2-d, got {logits.shape}")
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"nll_rows: targets shape {targets.shape} vs logits rows {n}")
    if n and (targets.min() < 0 or targets.max() >= v):
        bad = int(targets.max() if targets.max() >= v else targets.min())
        raise ValueError(f"nll_rows: target id {bad} outside vocabulary of size {v}")
    m = logits.data.max(axis=1, keepdims=True) if n else np.zeros((0, 1), dtype=logits.data.dtype)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    picked = logits.data[np.arange(n), targets]
    out = Tensor(lse - picked, dtype=logits.data.dtype)

    def bwd(g):
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        gl = p * g[:, None]
        gl[np.arange(n), targets] -= g
        return (gl,)

    return out._record((logits,), bwd)
