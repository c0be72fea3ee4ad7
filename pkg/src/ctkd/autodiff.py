"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to gradients for those parents.
:meth:`Tensor.backward` walks the graph once in reverse topological order.

Broadcasting is deliberately narrow: identical shapes, scalar against anything,
and a ``B x 1`` column against a ``B x C`` matrix.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "GraphError",
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "square",
    "sum",
    "mean",
    "concat_rows",
    "reshape",
    "softmax",
    "log_softmax",
    "conv3x3",
    "avg_pool2x2",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside an operation's domain."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (e.g. backward from a non-scalar)."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block; outputs never require grad."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop.

    Leaves are created directly; interior nodes come out of the operations in
    this module. ``grad`` stays ``None`` until a backward pass reaches it.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (),
                 backward: Callable[[np.ndarray], tuple] | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag}, op={self.op!r})"

    # -- operator sugar --------------------------------------------------
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

    # -- backward --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Gradients add onto whatever ``grad`` already holds; call
        :meth:`zero_grad` on the leaves first for a fresh pass.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("root does not require grad; nothing to differentiate")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
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
                grads[key] = pg if key not in grads else grads[key] + pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, op=op, parents=tuple(parents), backward=backward)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0 or a == (1,):
        return b
    if len(b) == 0 or b == (1,):
        return a
    if len(a) == 2 and len(b) == 2 and a[0] == b[0] and (a[1] == 1 or b[1] == 1):
        return a if b[1] == 1 else b
    raise ShapeError(f"incompatible shapes {a} and {b}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or shape == (1,):
        return np.asarray(g.sum()).reshape(shape)
    # B x 1 column broadcast across C columns
    return g.sum(axis=1, keepdims=True)


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a plain constant (no gradient to ``c``)."""
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


# -- reductions and reshaping ---------------------------------------------
def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, "mean", (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(tuple(shape))
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat_rows(a, b) -> Tensor:
    """Join two ``B x C`` matrices side by side into ``B x 2C``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"concat_rows needs equal B x C shapes, got {a.shape} and {b.shape}")
    c = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, "concat_rows", (a, b), lambda g: (g[:, :c], g[:, c:]))


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias) -> Tensor:
    """Dense layer ``x @ weight + bias`` with ``bias`` of length ``weight.shape[1]``."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if (x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]
            or bias.shape != (weight.shape[1],)):
        raise ShapeError(f"linear shape mismatch x{x.shape} w{weight.shape} b{bias.shape}")
    out = x.data @ weight.data + bias.data
    return _make(out, "linear", (x, weight, bias),
                 lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)))


# -- softmax family ---------------------------------------------------------
def _check_temperature(x: Tensor, t: Tensor) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects B x C logits, got {x.shape}")
    ok = t.data.size == 1 and t.data.ndim <= 1 or t.shape == (x.shape[0], 1)
    if not ok:
        raise ShapeError(f"temperature shape {t.shape} does not fit logits {x.shape}")
    if np.any(t.data <= 0):
        raise DomainError("temperature must be strictly positive")


def log_softmax(x, temperature=1.0) -> Tensor:
    """Row-wise ``log softmax(x / temperature)``, differentiable in both."""
    x, t = _as_tensor(x), _as_tensor(temperature)
    _check_temperature(x, t)
    z = x.data / t.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        # d/dz of log-softmax, then chain through z = x / t
        gz = g - p * g.sum(axis=1, keepdims=True)
        gx = gz / t.data
        gt = _reduce_to(-(gz * z) / t.data, t.shape)
        return gx, gt

    return _make(out, "log_softmax", (x, t), backward)


def softmax(x, temperature=1.0) -> Tensor:
    """Row-wise ``softmax(x / temperature)`` with max subtraction."""
    x, t = _as_tensor(x), _as_tensor(temperature)
    _check_temperature(x, t)
    z = x.data / t.data
    e = np.exp(z - z.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        gz = out * (g - (g * out).sum(axis=1, keepdims=True))
        gx = gz / t.data
        gt = _reduce_to(-(gz * z) / t.data, t.shape)
        return gx, gt

    return _make(out, "softmax", (x, t), backward)


# -- small image ops --------------------------------------------------------
def conv3x3(x, weight, bias) -> Tensor:
    """Single-input-channel 3x3 convolution with zero "same" padding.

    ``x`` is ``B x H x W``, ``weight`` is ``9 x K`` (row-major 3x3 taps), ``bias``
    is ``K``. Output is ``B x H x W x K``.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 3 or weight.shape[0] != 9 or bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv3x3 got x{x.shape} w{weight.shape} b{bias.shape}")
    b, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    patches = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    patches = patches.reshape(b, h, w, 9)
    out = patches @ weight.data + bias.data

    def backward(g):
        gw = patches.reshape(-1, 9).T @ g.reshape(-1, g.shape[-1])
        gb = g.sum(axis=(0, 1, 2))
        gp = (g @ weight.data.T).reshape(b, h, w, 3, 3)
        gpad = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                gpad[:, di:di + h, dj:dj + w] += gp[..., di, dj]
        return gpad[:, 1:-1, 1:-1], gw, gb

    return _make(out, "conv3x3", (x, weight, bias), backward)


def avg_pool2x2(x) -> Tensor:
    """Non-overlapping 2x2 mean pooling over ``B x H x W x K`` (H, W even)."""
    x = _as_tensor(x)
    b, h, w, k = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(b, h // 2, 2, w // 2, 2, k).mean(axis=(2, 4))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        return (g / 4.0,)

    return _make(out, "avg_pool2x2", (x,), backward)


# -- gradient oracle ----------------------------------------------------------
def finite_difference_check(fn: Callable[[], Tensor], leaf: Tensor,
                            eps: float = 1e-6, relative: str = "element") -> float:
    """Compare backprop against central differences for one leaf.

    ``fn`` must rebuild the scalar from scratch each call (reading ``leaf``).
    With ``relative="element"`` returns
    ``max_i |analytic_i - numeric_i| / max(1e-12, |numeric_i|)``. With
    ``relative="norm"`` returns ``max_i |analytic_i - numeric_i| /
    max(1e-12, max_i |numeric_i|)``, which is not dominated by entries that
    are tiny next to the rest of the gradient (there the central difference
    is mostly rounding noise).
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    if relative not in ("element", "norm"):
        raise ValueError(f"unknown relative mode {relative!r}")
    leaf.grad = None
    out = fn()
    out.backward()
    analytic = np.zeros(leaf.size) if leaf.grad is None else leaf.grad.reshape(-1).copy()

    if not leaf.data.flags.c_contiguous:
        leaf.data = np.ascontiguousarray(leaf.data)
    flat = leaf.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * eps)
    leaf.grad = None
    diff = np.abs(analytic - numeric)
    if relative == "norm":
        return float(diff.max(initial=0.0) / max(1e-12, np.abs(numeric).max(initial=0.0)))
    return float((diff / np.maximum(1e-12, np.abs(numeric))).max(initial=0.0))
