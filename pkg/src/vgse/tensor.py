"""Minimal dense tensors with reverse-mode automatic differentiation.

Every op is a plain function that takes :class:`Tensor` operands, computes its
value with numpy in float64, and (when gradients are enabled and some operand
requires them) records a closure that maps the output gradient to operand
gradients. :func:`backward` walks the recorded graph in reverse topological
order, visiting each node once.

Broadcasting is intentionally limited to a 1-D vector applied over the rows of
a matrix (or over the leading axes of a higher-rank tensor).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "debug_validation",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "tanh",
    "sigmoid",
    "relu",
    "elementwise",
    "sum",
    "mean",
    "transpose",
    "reshape",
    "diag",
    "softmax",
    "l2_normalize_rows",
    "concat",
    "stack",
    "slice_last",
    "embedding",
    "gather_time",
    "masked_max",
]

NORM_EPS = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug_enabled() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_validation(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op yields NaN or Inf."""
    prev = _debug_enabled()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

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
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _debug_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {backward_fn.__qualname__.split('.')[0]}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    When ``leaves`` is given, their gradients are reset to zero first so that
    leaves the loss does not reach end up with an all-zero gradient.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        for leaf in leaves:
            leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- shape helpers -----------------------------------------------------------


def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> int:
    """0: equal shapes, 1: ``b`` is a row vector, 2: ``a`` is a row vector."""
    if a.shape == b.shape:
        return 0
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return 1
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return 2
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_rows(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# -- arithmetic ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    A, B = a.data, b.data

    def _bw(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), _bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (m, k) and ``weight`` (out, k)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    X, W = x.data, weight.data
    out = X @ W.T
    if bias is not None:
        if bias.shape != (W.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
        out = out + bias.data

        def _bw(g):
            return g @ W, g.T @ X, g.sum(axis=0)

        return _make(out, (x, weight, bias), _bw)

    def _bw_nobias(g):
        return g @ W, g.T @ X

    return _make(out, (x, weight), _bw_nobias)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data, "add")

    def _bw(g):
        if kind == 0:
            return g, g
        if kind == 1:
            return g, _reduce_rows(g)
        return _reduce_rows(g), g

    return _make(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data, "sub")

    def _bw(g):
        if kind == 0:
            return g, -g
        if kind == 1:
            return g, -_reduce_rows(g)
        return _reduce_rows(g), -g

    return _make(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data, "mul")
    A, B = a.data, b.data

    def _bw(g):
        ga = g * B
        gb = g * A
        if kind == 1:
            gb = _reduce_rows(gb)
        elif kind == 2:
            ga = _reduce_rows(ga)
        return ga, gb

    return _make(A * B, (a, b), _bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + c, (x,), lambda g: (g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    """``max(0, x)``; the subgradient at exactly zero is taken as 0."""
    active = x.data > 0
    return _make(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args):
    """Dispatch by name: ``elementwise("mul", a, b)``, ``elementwise("scale", x, 2.0)``."""
    if op in _UNARY:
        return _UNARY[op](*args)
    if op in _BINARY:
        return _BINARY[op](*args)
    if op == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and reshaping -----------------------------------------------


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim

    def _bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), _bw)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.size)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def diag(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag expects a square matrix, got shape {x.shape}")
    n = x.shape[0]

    def _bw(g):
        out = np.zeros((n, n))
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _make(np.diagonal(x.data).copy(), (x,), _bw)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (boolean, same shape as ``x``) marks valid entries; masked entries
    get zero probability. A slice with no valid entry is an error.
    """
    if x.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise DimensionError("softmax over an empty slice")
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask {mask.shape} does not match input {x.shape}")
        if not np.all(mask.any(axis=ax)):
            raise DimensionError("softmax slice with every entry masked")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (x,), _bw)


def l2_normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got shape {x.shape}")
    X = x.data
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = X / denom
    live = norms > eps

    def _bw(g):
        proj = (y * g).sum(axis=1, keepdims=True)
        return (np.where(live, (g - y * proj) / denom, g / denom),)

    return _make(y, (x,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of nothing")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[d] != ref[d] for d in range(ndim) if d != ax):
            raise DimensionError(
                f"concat along axis {ax}: shapes {[tt.shape for tt in tensors]} disagree off-axis"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), _bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack of nothing")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def _bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, tuple(tensors), _bw)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    shape = x.shape

    def _bw(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _make(x.data[..., start:stop], (x,), _bw)


# -- indexing ------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; output shape is ``ids.shape + (dim,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be a matrix, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids outside [0, {table.shape[0]})")
    shape = table.shape

    def _bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), _bw)


def gather_time(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[b, t] = x[b, index[b, t]]`` for ``x`` of shape (B, T, F)."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.shape != x.shape[:2]:
        raise DimensionError(f"gather_time: index {index.shape} does not fit input {x.shape}")
    shape = x.shape
    rows = np.arange(shape[0])[:, None]

    def _bw(g):
        out = np.zeros(shape)
        np.add.at(out, (np.broadcast_to(rows, index.shape), index), g)
        return (out,)

    return _make(x.data[rows, index], (x,), _bw)


def masked_max(x: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    """Max over ``axis`` restricted to positions where ``mask`` is true.

    ``x`` has shape (B, T, F) and ``mask`` shape (B, T). The gradient goes to
    the earliest maximising position of each (row, feature).
    """
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 3 or mask.shape != x.shape[:2] or axis not in (1, -2):
        raise DimensionError(f"masked_max: mask {mask.shape} does not fit input {x.shape}")
    if not np.all(mask.any(axis=1)):
        raise DimensionError("masked_max: a row has no valid step")
    masked = np.where(mask[:, :, None], x.data, -np.inf)
    arg = np.argmax(masked, axis=1)
    out = np.take_along_axis(masked, arg[:, None, :], axis=1)[:, 0, :]
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full,)

    return _make(out, (x,), _bw)
