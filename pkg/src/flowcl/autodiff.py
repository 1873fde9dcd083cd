"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive operations in execution order; ``backward``
replays them in exact reverse order, accumulating vector-Jacobian products.
The engine is deliberately small: rank <= 3 arrays, a fixed primitive set,
float64 everywhere, and no persistent graph (a fresh tape is built per loss
evaluation). Operations run eagerly; they are only recorded when a tape is
active and some input requires a gradient.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeMismatch

_TAPE_STACK: list["Tape"] = []


def current_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of primitive operations for one loss evaluation.

    Usable as a context manager. ``nodes`` holds non-leaf tensors in the
    order they were produced; ``leaves`` holds gradient roots (registered
    parameters). A tape may carry at most one parameter binding.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self.binding = None

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def register_leaf(self, t: "Tensor"):
        self.leaves.append(t)


class Tensor:
    """Dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("values", "parents", "vjp", "requires", "grad", "op")

    # keep numpy from hijacking mixed ndarray/Tensor arithmetic
    __array_ufunc__ = None

    def __init__(self, values, requires: bool = False, parents: tuple = (),
                 vjp: Optional[Callable] = None, op: str = "leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires = requires
        self.parents = parents
        self.vjp = vjp
        self.grad: Optional[np.ndarray] = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.values.shape})"

    # operator sugar; everything funnels through the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values) -> Tensor:
    return Tensor(values, requires=False, op="const")


def leaf(values) -> Tensor:
    """Create a differentiable leaf, registered on the active tape."""
    t = Tensor(values, requires=True, op="leaf")
    tape = current_tape()
    if tape is not None:
        tape.register_leaf(t)
    return t


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(values, parents, vjp, op) -> Tensor:
    """Wrap an op result; record it only if a tape is active and needed."""
    tape = current_tape()
    requires = tape is not None and any(p.requires for p in parents)
    if not requires:
        return Tensor(values, requires=False, op=op)
    out = Tensor(values, requires=True, parents=parents, vjp=vjp, op=op)
    tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError:
        raise ShapeMismatch(op, a.values.shape, b.values.shape) from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("add", a, b)
    out = a.values + b.values

    def vjp(g):
        return (_unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape))

    return _make(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("sub", a, b)
    out = a.values - b.values

    def vjp(g):
        return (_unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape))

    return _make(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("mul", a, b)
    out = a.values * b.values
    av, bv = a.values, b.values

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return _make(out, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = _coerce(a)

    def vjp(g):
        return (-g,)

    return _make(-a.values, (a,), vjp, "neg")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    av, bv = a.values, b.values
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeMismatch("matmul", av.shape, bv.shape, detail="rank-0 operand")
    k_a = av.shape[-1]
    k_b = bv.shape[-2] if bv.ndim >= 2 else bv.shape[0]
    if k_a != k_b:
        raise ShapeMismatch("matmul", av.shape, bv.shape)
    out = np.matmul(av, bv)

    def vjp(g):
        if av.ndim >= 2 and bv.ndim >= 2:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
            return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))
        if av.ndim >= 2 and bv.ndim == 1:
            # y[..., i] = sum_k A[..., i, k] v[k]
            ga = g[..., :, None] * bv
            gb = (av * g[..., :, None]).sum(axis=tuple(range(av.ndim - 1)))
            return (ga, gb)
        if av.ndim == 1 and bv.ndim >= 2:
            # y[..., j] = sum_i v[i] B[..., i, j]
            ga = (bv * g[..., None, :]).sum(
                axis=tuple(i for i in range(bv.ndim) if i != bv.ndim - 2))
            gb = av[:, None] * g[..., None, :]
            return (ga, _unbroadcast(gb, bv.shape))
        # both rank-1: inner product
        return (g * bv, g * av)

    return _make(out, (a, b), vjp, "matmul")


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.values)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp, "tanh")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is the logistic sigmoid."""
    a = _coerce(a)
    out = np.logaddexp(0.0, a.values)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.values))

    def vjp(g):
        return (g * sig,)

    return _make(out, (a,), vjp, "softplus")


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.values)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = _coerce(a)
    out = np.log(a.values)
    av = a.values

    def vjp(g):
        return (g / av,)

    return _make(out, (a,), vjp, "log")


def _axis_expand(g: np.ndarray, axis: Optional[int], shape: tuple) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum_(a, axis: Optional[int] = None) -> Tensor:
    a = _coerce(a)
    out = a.values.sum(axis=axis)
    shape = a.values.shape

    def vjp(g):
        return (_axis_expand(g, axis, shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = _coerce(a)
    out = a.values.mean(axis=axis)
    shape = a.values.shape
    n = a.values.size if axis is None else shape[axis]

    def vjp(g):
        return (_axis_expand(g, axis, shape) / n,)

    return _make(out, (a,), vjp, "mean")


def variance(a, axis: Optional[int] = None) -> Tensor:
    """Population variance, computed literally as mean(x^2) - mean(x)^2."""
    a = _coerce(a)
    av = a.values
    m = av.mean(axis=axis)
    out = (av * av).mean(axis=axis) - m * m
    shape = av.shape
    n = av.size if axis is None else shape[axis]
    centered = av - (m if axis is None else np.expand_dims(m, axis))

    def vjp(g):
        return (_axis_expand(g, axis, shape) * (2.0 / n) * centered,)

    return _make(out, (a,), vjp, "variance")


def broadcast_to(a, shape) -> Tensor:
    a = _coerce(a)
    try:
        out = np.broadcast_to(a.values, shape)
    except ValueError:
        raise ShapeMismatch("broadcast", a.values.shape, shape) from None
    src_shape = a.values.shape

    def vjp(g):
        return (_unbroadcast(g, src_shape),)

    return _make(np.ascontiguousarray(out), (a,), vjp, "broadcast")


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    src_shape = a.values.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", src_shape, shape) from None

    def vjp(g):
        return (g.reshape(src_shape),)

    return _make(out, (a,), vjp, "reshape")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(_coerce(p) for p in parts)
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, parts, vjp, "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    a = _coerce(a)
    index = [slice(None)] * a.values.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.values[index]
    src_shape = a.values.shape

    def vjp(g):
        full = np.zeros(src_shape)
        full[index] = g
        return (full,)

    return _make(out, (a,), vjp, "narrow")


def permute_cols(a, perm: np.ndarray) -> Tensor:
    """Reorder the last axis of a matrix by a fixed permutation."""
    a = _coerce(a)
    if a.values.ndim != 2:
        raise ShapeMismatch("permute_cols", a.values.shape, detail="expects rank-2")
    perm = np.asarray(perm, dtype=np.intp)
    out = a.values[:, perm]

    def vjp(g):
        back = np.empty_like(g)
        back[:, perm] = g
        return (back,)

    return _make(out, (a,), vjp, "permute_cols")


def clip(a, bound: float) -> Tensor:
    """Clamp to [-bound, bound]; gradient passes only inside the open interval."""
    a = _coerce(a)
    av = a.values
    out = np.clip(av, -bound, bound)
    inside = (av > -bound) & (av < bound)

    def vjp(g):
        return (g * inside,)

    return _make(out, (a,), vjp, "clip")


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "tanh": tanh,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "variance": variance,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "concat": concat,
    "narrow": narrow,
    "permute_cols": permute_cols,
    "clip": clip,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; the tape records it like a direct call."""
    if op not in _PRIMITIVES:
        raise KeyError(f"unknown primitive '{op}' (have {sorted(_PRIMITIVES)})")
    return _PRIMITIVES[op](*inputs, **kwargs)


def stack_scalars(ts: Sequence[Tensor]) -> Tensor:
    """Concatenate scalar tensors into a length-n vector."""
    return concat([reshape(t, (1,)) for t in ts], axis=0)


def backward(tape: Tape, root: Tensor):
    """Accumulate gradients of `root` w.r.t. every leaf on the tape.

    Leaves unreachable from the root end with an all-zero gradient. Returns
    the gradient ParamVector when the tape carries a parameter binding,
    otherwise None (leaf gradients stay available as ``leaf.grad``).
    """
    if root.values.size != 1:
        raise ShapeMismatch("backward", root.values.shape, detail="root must be scalar")
    for node in tape.nodes:
        node.grad = None
    for lf in tape.leaves:
        lf.grad = np.zeros_like(lf.values)
    if root.requires:
        root.grad = np.ones_like(root.values)
        for node in reversed(tape.nodes):
            if node.grad is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if not parent.requires or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.values)
                parent.grad = parent.grad + g
    # a constant root is legal (parameter-independent loss): all-zero grads
    if tape.binding is not None:
        return tape.binding.grad_vector()
    return None


def logsumexp_np(x: np.ndarray) -> float:
    """Stable log-sum-exp for plain arrays (no tape)."""
    m = np.max(x)
    return float(m + math.log(np.sum(np.exp(x - m))))
