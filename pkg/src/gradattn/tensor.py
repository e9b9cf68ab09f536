"""Define-by-run reverse-mode autodiff over NumPy arrays.

Every differentiable op records a :class:`Node` on the output tensor holding
the inputs and a closure that maps the output gradient to input gradients.
Nodes carry a global sequence number, so ``backward`` can replay the reachable
part of the tape in exact reverse recording order.

Gradients accumulate into ``Tensor.grad`` of leaf tensors (tensors created by
the user rather than by an op). Calling ``backward`` twice without zeroing
adds the two results, as in every mainstream autodiff library.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, OracleError

_state = threading.local()
_seq = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported numeric mode {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the engine's numeric mode (float32 / float64)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn", "out_id")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, out_id: int):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out_id = out_id

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


@dataclass
class Tape:
    """The recorded nodes reachable from a root, in recording order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: "Tensor") -> "Tape":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.tape_node
            if node is None or node.seq in seen:
                continue
            seen.add(node.seq)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)


class Tensor:
    """Dense array with optional gradient and a link into the tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape_node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` as an op output, recording a node when any input needs grad.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_node = Node(op, tuple(inputs), backward_fn, id(out))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing was recorded")
    seed = np.ones_like(loss.data)
    if loss.tape_node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = Tape.from_root(loss)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.tape_node is None:
                inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = ig if prev is None else prev + ig


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("div", a.data / b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dims broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return record("matmul", out, (a, b), bwd)


# -- reductions and shape ------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bwd(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return record("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)
    count = a.size // max(out.size, 1)

    def bwd(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return record("mean", out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return record("getitem", np.array(a.data[idx]), (a,), bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record("stack", out, tensors, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, tensors, bwd)


# -- softmax family -------------------------------------------------------------

def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; the row max is subtracted before exponentiating."""
    x = as_tensor(x)
    _require_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _require_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (x,), bwd)


# -- verification harness --------------------------------------------------------

def finite_diff_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    eps: float | None = None,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backward and central finite differences.

    ``f(x)`` must return a scalar tensor. ``x`` may be a single tensor or a
    list of tensors; each one is perturbed coordinate by coordinate. The error
    per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``max_coords`` caps the number of checked coordinates per tensor (sampled
    with ``seed``) for large parameter sets.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    if eps is None:
        eps = 1e-6 if get_default_dtype() == np.float64 else 1e-3
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must be in (0, 1e-2], got {eps}")

    with no_grad():
        first = np.array(f(x).data, copy=True)
        second = np.array(f(x).data, copy=True)
    if first.size != 1:
        raise ContractError(f"f must be scalar-valued, got shape {first.shape}")
    if not np.array_equal(first, second, equal_nan=True):
        raise OracleError("f is not deterministic: two evaluations disagree")

    saved = [t.grad for t in xs]
    for t in xs:
        t.grad = None
    loss = f(x)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    for t, g in zip(xs, saved):
        t.grad = g

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            if not t.data.flags.c_contiguous:
                t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            ga_flat = ga.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                hi = flat[i]
                fp = float(f(x).data.reshape(-1)[0])
                flat[i] = orig - eps
                lo = flat[i]
                fm = float(f(x).data.reshape(-1)[0])
                flat[i] = orig
                numeric = (fp - fm) / float(hi - lo)  # the step actually taken after rounding
                a = float(ga_flat[i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
