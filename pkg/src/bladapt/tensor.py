"""
Dense tensors with tape-based reverse-mode differentiation.

A `Tape` records every differentiable op applied while it is active. Outside
an active tape ops run eagerly and record nothing, which is what inference
and evaluation loops want. Gradients are requested by parameter name:

    with Tape() as tape:
        loss = model(x, params)
    grads = tape.backward(loss, wrt={"encoder.down0.conv.weight"})

Only the requested leaves receive gradients, and nodes that cannot reach one
of them are skipped entirely during the reverse sweep.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Number = Union[int, float]
ArrayLike = Union["Tensor", np.ndarray, Number]

DENOM_FLOOR = 1e-4

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericGuardError(ArithmeticError):
    """A division denominator fell below the floor with clamping disabled."""


class NonFiniteError(ArithmeticError):
    """Debug mode found NaN/Inf in an op output."""


class UnknownParameterError(LookupError):
    """A requested gradient target was never used on the tape."""


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks on every op output (thread-local)."""
    _state.debug = enabled


def _debug() -> bool:
    return getattr(_state, "debug", False)


class BranchRecorder:
    """Collects which branch every piecewise op took while active.

    Two evaluations with equal ``signature()`` lie in the same smooth piece
    of the function, which is what a finite-difference stencil needs.
    """

    def __init__(self):
        self.entries: list = []

    def __enter__(self) -> "BranchRecorder":
        _state.recorder = self
        return self

    def __exit__(self, *exc) -> None:
        _state.recorder = None

    def signature(self) -> tuple:
        return tuple(self.entries)


def _note_branch(op: str, branch: np.ndarray) -> None:
    rec = getattr(_state, "recorder", None)
    if rec is not None:
        rec.entries.append((op, np.ascontiguousarray(branch).tobytes()))


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None
        # named trainable leaves created under a tape are known to it even if unused
        if requires_grad and name is not None:
            tape = active_tape()
            if tape is not None:
                tape._register_leaf(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

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
        return mul(self, -1.0)

    def __pow__(self, exponent: Number):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return tabs(self)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of op applications; rebuilt for every forward pass."""

    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _register_leaf(self, t: Tensor) -> None:
        if t.name is None:
            return
        known = self.leaves.get(t.name)
        if known is not None and known is not t:
            raise ValueError(f"two distinct leaves share the name {t.name!r}")
        self.leaves[t.name] = t

    def record(self, op: str, inputs: tuple, output: Tensor, backward: BackwardFn) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is None:
                self._register_leaf(t)
        output._tape = self
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, loss: Tensor, wrt: Iterable[str], accumulate: bool = False) -> dict:
        """Return {name: d loss / d leaf} for exactly the named leaves."""
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        names = list(wrt)
        missing = [n for n in names if n not in self.leaves]
        if missing:
            raise UnknownParameterError(f"parameters not on tape: {', '.join(sorted(missing))}")
        targets = {id(self.leaves[n]) for n in names}

        # forward sweep: which tensors can reach a requested leaf
        reach = set(targets)
        needed = []
        for node in self.nodes:
            mask = [id(t) in reach for t in node.inputs]
            if any(mask):
                reach.add(id(node.output))
                needed.append((node, mask))

        grads: dict = {}
        if id(loss) in reach:
            grads[id(loss)] = np.ones_like(loss.data)
        for node, mask in reversed(needed):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, m, gi in zip(node.inputs, mask, node.backward(g, mask)):
                if not m or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        out = {}
        for n in names:
            leaf = self.leaves[n]
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            out[n] = g.astype(leaf.dtype, copy=False)
            if accumulate:
                leaf.grad = out[n].copy() if leaf.grad is None else leaf.grad + out[n]
        return out


def backward(loss: Tensor, wrt: Iterable[str], accumulate: bool = False) -> dict:
    """Differentiate `loss` on the tape that produced it."""
    if loss._tape is None:
        raise UnknownParameterError("loss was not computed under an active Tape")
    return loss._tape.backward(loss, wrt, accumulate=accumulate)


def make_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and an input is tracked."""
    if _debug() and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(op, tuple(inputs), result, backward_fn)
    return result


def _binary_operands(a: ArrayLike, b: ArrayLike, op: str):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = as_tensor(a)
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    ref = ta if ta is not None else tb
    if ta is None:
        ta = as_tensor(a, like=ref)
    if tb is None:
        tb = as_tensor(b, like=ref)
    if ta.size != 1 and tb.size != 1 and ta.shape != tb.shape:
        raise DimensionError(f"{op}: shape mismatch {ta.shape} vs {tb.shape}")
    return ta, tb


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands(a, b, "add")

    def bw(g, mask):
        return (_reduce_to(g, ta.shape) if mask[0] else None,
                _reduce_to(g, tb.shape) if mask[1] else None)

    return make_op("add", (ta, tb), ta.data + tb.data, bw)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands(a, b, "sub")

    def bw(g, mask):
        return (_reduce_to(g, ta.shape) if mask[0] else None,
                _reduce_to(-g, tb.shape) if mask[1] else None)

    return make_op("sub", (ta, tb), ta.data - tb.data, bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands(a, b, "mul")

    def bw(g, mask):
        return (_reduce_to(g * tb.data, ta.shape) if mask[0] else None,
                _reduce_to(g * ta.data, tb.shape) if mask[1] else None)

    return make_op("mul", (ta, tb), ta.data * tb.data, bw)


def div(a: ArrayLike, b: ArrayLike, clamp: bool = False, floor: float = DENOM_FLOOR) -> Tensor:
    """Elementwise a / b with a guarded denominator.

    With ``clamp=True`` the denominator is replaced by ``max(b, floor)`` and
    the gradient is taken through the floored value (zero w.r.t. ``b`` where
    the floor is active). Otherwise any ``|b| < floor`` raises.
    """
    ta, tb = _binary_operands(a, b, "div")
    if clamp:
        denom = np.maximum(tb.data, floor)
        live = tb.data >= floor
        _note_branch("div", live)
    else:
        if np.any(np.abs(tb.data) < floor):
            raise NumericGuardError(f"denominator magnitude below {floor:g}")
        denom = tb.data
        live = None
    out = ta.data / denom

    def bw(g, mask):
        ga = _reduce_to(g / denom, ta.shape) if mask[0] else None
        gb = None
        if mask[1]:
            gb = -g * out / denom
            if live is not None:
                gb = np.where(live, gb, 0.0)
            gb = _reduce_to(gb, tb.shape)
        return ga, gb

    return make_op("div", (ta, tb), out, bw)


def power(a: Tensor, exponent: Number) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = x ** exponent

    def bw(g, mask):
        return (g * exponent * x ** (exponent - 1),)

    return make_op("pow", (a,), out, bw)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def bw(g, mask):
        return (2.0 * g * x,)

    return make_op("square", (a,), x * x, bw)


def tabs(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data

    _note_branch("abs", x > 0)

    def bw(g, mask):
        return (g * np.sign(x),)

    return make_op("abs", (a,), np.abs(x), bw)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g, mask):
        return (g * out,)

    return make_op("exp", (a,), out, bw)


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    _note_branch("clamp", np.sign(x - out).astype(np.int8))

    def bw(g, mask):
        return (np.where(inside, g, 0.0).astype(g.dtype, copy=False),)

    return make_op("clamp", (a,), out, bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    _note_branch("relu", pos)

    def bw(g, mask):
        return (g * pos,)

    return make_op("relu", (a,), np.where(pos, x, 0.0).astype(x.dtype, copy=False), bw)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    a = as_tensor(a)
    x = a.data
    slope = np.where(x > 0, 1.0, alpha).astype(x.dtype, copy=False)
    _note_branch("leaky_relu", x > 0)

    def bw(g, mask):
        return (g * slope,)

    return make_op("leaky_relu", (a,), x * slope, bw)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def bw(g, mask):
        return (g * out * (1.0 - out),)

    return make_op("sigmoid", (a,), out, bw)


def activation(a: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g, mask):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return make_op("sum", (a,), np.asarray(out), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def bw(g, mask):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(a.dtype),)

    return make_op("mean", (a,), np.asarray(out), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bw(g, mask):
        return (g.reshape(old),)

    return make_op("reshape", (a,), a.data.reshape(shape), bw)


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g, mask):
        full = np.zeros(shape, dtype=a.dtype)
        full[index] = g  # basic slicing only: no repeated targets
        return (full,)

    return make_op("getitem", (a,), a.data[index], bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, mask):
        return tuple(np.split(g, splits, axis=axis))

    return make_op("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), bw)
