"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a numpy
``forward`` and a ``backward`` that maps the output gradient to one gradient
per input.  Calling ``Function.apply`` wires the result into the graph, and
``Tensor.backward`` walks that graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True
_ids = itertools.count()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_fn", "_parents", "id", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._fn: Function | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.id = next(_ids)
        self.name = name

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {self.id: np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._fn is None:
                if node.requires_grad:
                    node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            in_grads = node._fn.backward(g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{type(node._fn).__name__} produced grad {pg.shape} for input {parent.shape}"
                    )
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


class Function:
    """One primitive op: subclasses set attributes in ``__init__`` kwargs."""

    def __init__(self, **attrs: Any):
        for k, v in attrs.items():
            setattr(self, k, v)

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **attrs: Any) -> Tensor:
        fn = cls(**attrs)
        tensors = tuple(as_tensor(x) for x in inputs)
        out = Tensor(fn.forward(*(t.data for t in tensors)))
        if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._fn = fn
            out._parents = tensors
        return out


# ---------------------------------------------------------------------------
# computation record


@dataclass
class OpRecord:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    fn: Function = field(repr=False)


@dataclass
class ComputationRecord:
    """Ordered primitive-op records of the graph that produced an output."""

    records: list[OpRecord]
    leaves: dict[int, np.ndarray]
    output_id: int

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        records, leaves = [], {}
        for node in topological_order(output):
            if node._fn is None:
                leaves[node.id] = node.data.copy()
            else:
                records.append(
                    OpRecord(type(node._fn).__name__, tuple(p.id for p in node._parents), node.id, node._fn)
                )
        return cls(records, leaves, output.id)

    def replay(self) -> np.ndarray:
        """Re-run every forward from the stored leaf values."""
        values = dict(self.leaves)
        for rec in self.records:
            values[rec.output_id] = rec.fn.forward(*(values[i] for i in rec.input_ids))
        return values[self.output_id]

    def is_topological(self) -> bool:
        known = set(self.leaves)
        for rec in self.records:
            if not all(i in known for i in rec.input_ids):
                return False
            known.add(rec.output_id)
        return True


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            bad = np.argwhere(a <= 0)[0]
            raise ValueError(f"log of non-positive value {a[tuple(bad)]!r} at index {tuple(bad)}")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        return (g * 0.5 / self.out,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (g * self.mask,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class Softplus(Function):
    """log(1 + exp(x)), finite for large |x| and 0 at -inf."""

    def forward(self, a):
        self.a = a
        return _softplus(a)

    def backward(self, g):
        return (g * _sigmoid(self.a),)


class Clip(Function):
    def forward(self, a):
        self.mask = (a >= self.lo) & (a <= self.hi)
        return np.clip(a, self.lo, self.hi)

    def backward(self, g):
        return (g * self.mask,)


class Minimum(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        self.pick_a = a <= b
        return np.where(self.pick_a, a, b)

    def backward(self, g):
        return (_unbroadcast(g * self.pick_a, self.shapes[0]), _unbroadcast(g * ~self.pick_a, self.shapes[1]))


class Maximum(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        self.pick_a = a >= b
        return np.where(self.pick_a, a, b)

    def backward(self, g):
        return (_unbroadcast(g * self.pick_a, self.shapes[0]), _unbroadcast(g * ~self.pick_a, self.shapes[1]))


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


class Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Reshape(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a):
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, g):
        inv = None if self.axes is None else np.argsort(self.axes)
        return (np.transpose(g, inv),)


class GetItem(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.array(a[self.index])

    def backward(self, g):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.index, g)
        return (out,)


class Concat(Function):
    def forward(self, *xs):
        self.sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.where(np.isneginf(x), 0.0, np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0))


def add(a, b) -> Tensor: return Add.apply(a, b)
def sub(a, b) -> Tensor: return Sub.apply(a, b)
def mul(a, b) -> Tensor: return Mul.apply(a, b)
def div(a, b) -> Tensor: return Div.apply(a, b)
def neg(a) -> Tensor: return Neg.apply(a)
def exp(a) -> Tensor: return Exp.apply(a)
def log(a) -> Tensor: return Log.apply(a)
def sqrt(a) -> Tensor: return Sqrt.apply(a)
def relu(a) -> Tensor: return Relu.apply(a)
def sigmoid(a) -> Tensor: return Sigmoid.apply(a)
def softplus(a) -> Tensor: return Softplus.apply(a)
def minimum(a, b) -> Tensor: return Minimum.apply(a, b)
def maximum(a, b) -> Tensor: return Maximum.apply(a, b)
def matmul(a, b) -> Tensor: return MatMul.apply(a, b)
def reshape(a, shape) -> Tensor: return Reshape.apply(a, shape=tuple(shape))
def transpose(a, axes=None) -> Tensor: return Transpose.apply(a, axes=None if axes is None else tuple(axes))
def getitem(a, index) -> Tensor: return GetItem.apply(a, index=index)


def clip(a, lo: float, hi: float) -> Tensor:
    return Clip.apply(a, lo=lo, hi=hi)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias, weight stored (out, in)."""
    out = matmul(x, transpose(weight))
    return out + bias if bias is not None else out
