"""
Reverse-mode automatic differentiation over dense float64 tensors.

The tape is define-by-run: every differentiable op appends a node while the
forward pass executes, so nodes are topologically ordered by construction and
the backward pass is a single reverse sweep. Tensors without a node are
constants and never receive gradients.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from lib.errors import ContractError, DimensionError

Grads = Tuple[Optional[np.ndarray], ...]
BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Grads]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


@dataclass(frozen=True)
class TapeNode:
    op: str
    inputs: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]


class Tensor:
    """Dense float64 array plus an optional tape node id."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of the ops executed during one forward pass."""

    def __init__(self, check_finite: bool = False):
        self.nodes: List[TapeNode] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        """Register a differentiable input (parameter or set values)."""
        self.nodes.append(TapeNode("leaf", (), None))
        return Tensor(np.array(data, dtype=np.float64), self, len(self.nodes) - 1)

    def record(self, op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardFn) -> Tensor:
        ids = tuple(t.node for t in inputs)
        if self.check_finite and not np.all(np.isfinite(data)):
            raise ContractError(f"{op} produced non-finite values")
        if all(i is None for i in ids):
            return Tensor(data)
        self.nodes.append(TapeNode(op, ids, backward))
        return Tensor(data, self, len(self.nodes) - 1)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ContractError("tensors from different tapes cannot be combined")
        tape = t.tape
    return tape


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardFn) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(op, inputs, data, backward)


# -- broadcasting (trailing-dimension expansion only) ------------------------

def _is_suffix(short: Tuple[int, ...], long: Tuple[int, ...]) -> bool:
    return len(short) <= len(long) and long[len(long) - len(short):] == short


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if not (_is_suffix(a.shape, b.shape) or _is_suffix(b.shape, a.shape)):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad.reshape((-1,) + shape).sum(axis=0)


# -- elementwise ----------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _emit("sub", (a, b), a.data - b.data, backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _emit("mul", (a, b), a.data * b.data, backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g, needs: (-g,))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _emit("scale", (a,), a.data * factor, lambda g, needs: (g * factor,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g, needs: (g * mask,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g, needs: (2.0 * a.data * g,))


def huber(a: ArrayLike, delta: float = 1.0) -> Tensor:
    """Elementwise Huber: r²/2 inside |r| ≤ δ, δ(|r| − δ/2) outside."""
    a = as_tensor(a)
    r = a.data
    inside = np.abs(r) <= delta
    out = np.where(inside, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))

    def backward(g, needs):
        return (g * np.where(inside, r, delta * np.sign(r)),)

    return _emit("huber", (a,), out, backward)


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = np.exp(a.data - out)
    return _emit("softplus", (a,), out, lambda g, needs: (g * sig,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "square": square,
    "huber": huber,
    "softplus": softplus,
}


def elementwise(op: str, a: ArrayLike, b: Optional[ArrayLike] = None, *, delta: float = 1.0) -> Tensor:
    """Dispatch by name; binary ops take ``b``, ``huber`` takes ``delta``."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _ELEMENTWISE[op](a, b)
    if op == "huber":
        return huber(a, delta)
    return _ELEMENTWISE[op](a)


# -- linear algebra and structure -------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading dims of ``a`` act as a batch of rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    k, n = b.shape

    def backward(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if needs[1] else None
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, backward)


def concat_last(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading shapes differ, {a.shape} vs {b.shape}")
    split = a.shape[-1]

    def backward(g, needs):
        return g[..., :split], g[..., split:]

    return _emit("concat", (a, b), np.concatenate([a.data, b.data], axis=-1), backward)


def tile_rows(a: ArrayLike, rows: int) -> Tensor:
    """Repeat ``a[..., n]`` as ``[..., rows, n]``."""
    a = as_tensor(a)
    out = np.repeat(a.data[..., None, :], rows, axis=-2)
    return _emit("tile_rows", (a,), out, lambda g, needs: (g.sum(axis=-2),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {a.shape} -> {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g, needs: (g.reshape(a.shape),))


def gather_rows(a: ArrayLike, index: np.ndarray) -> Tensor:
    """Pick rows of ``a[B, M, d]`` by ``index[B, R]`` (or ``a[M, d]`` by ``index[R]``)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if a.ndim == 2:
        return reshape(gather_rows(reshape(a, (1,) + a.shape), index[None]), (index.shape[0], a.shape[1]))
    if a.ndim != 3 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise DimensionError(f"gather_rows: values {a.shape} with index {index.shape}")
    batch, rows, width = a.shape
    out = np.take_along_axis(a.data, index[..., None], axis=1)
    flat = (index + np.arange(batch)[:, None] * rows).reshape(-1)

    def backward(g, needs):
        ga = np.zeros((batch * rows, width))
        np.add.at(ga, flat, g.reshape(-1, width))
        return (ga.reshape(a.shape),)

    return _emit("gather_rows", (a,), out, backward)


def sort_desc_columns(z: ArrayLike) -> Tuple[Tensor, np.ndarray]:
    """Sort every column of ``z[..., m, d]`` descending, ties by original index.

    Returns the sorted tensor and ``perm`` with ``sorted[i] = z[perm[i]]`` per
    column; the backward pass routes output position i to input ``perm[i]``.
    """
    z = as_tensor(z)
    if z.ndim < 2 or z.shape[-2] < 1:
        raise DimensionError(f"sort_desc_columns: need at least one row, got {z.shape}")
    perm = np.argsort(-z.data, axis=-2, kind="stable")
    out = np.take_along_axis(z.data, perm, axis=-2)

    def backward(g, needs):
        gz = np.empty_like(g)
        np.put_along_axis(gz, perm, g, axis=-2)
        return (gz,)

    return _emit("sort_desc", (z,), out, backward), perm


def reduce(op: str, t: ArrayLike, axis: Optional[int] = None) -> Tensor:
    """Sum or mean along ``axis`` (all axes when None)."""
    t = as_tensor(t)
    if op not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {op!r}")
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"reduce: axis {axis} invalid for shape {t.shape}")
    extent = t.data.size if axis is None else t.shape[axis]
    factor = 1.0 if op == "sum" else 1.0 / extent
    out = t.data.sum(axis=axis) * factor

    def backward(g, needs):
        g = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(g * factor, t.shape).copy(),)

    return _emit(f"reduce_{op}", (t,), np.asarray(out), backward)


def reduce_sum(t: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return reduce("sum", t, axis)


def reduce_mean(t: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return reduce("mean", t, axis)


# -- backward pass --------------------------------------------------------------

def backward(tape: Tape, output: Tensor, leaves: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. ``leaves``; untouched leaves get zeros."""
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    for leaf in leaves:
        if leaf.tape is not None and leaf.tape is not tape:
            raise ContractError("leaf belongs to a different tape")
    if output.node is None:
        return [np.zeros_like(leaf.data) for leaf in leaves]
    if output.tape is not tape:
        raise ContractError("output belongs to a different tape")

    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[output.node] = np.ones_like(output.data)
    for idx in range(output.node, -1, -1):
        node = tape.nodes[idx]
        g = grads[idx]
        if g is None or node.backward is None:
            continue
        needs = tuple(i is not None for i in node.inputs)
        for src, gi in zip(node.inputs, node.backward(g, needs)):
            if src is None or gi is None:
                continue
            grads[src] = gi if grads[src] is None else grads[src] + gi
        grads[idx] = None

    out = []
    for leaf in leaves:
        g = grads[leaf.node] if leaf.node is not None else None
        out.append(np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape))
    return out
