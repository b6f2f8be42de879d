"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Every operation goes through :func:`apply_primitive`. When a :class:`Tape` is
active and at least one input is a tracked tensor, the application is recorded
together with its vector-Jacobian rule; otherwise the result is a constant and
nothing is recorded. ``backward`` walks the records in reverse order once.

Only one tape may be active at a time. Higher-order derivatives are not
supported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_CLAMP = 1e-30
LAYER_NORM_EPS = 1e-5

_ACTIVE_TAPE: "Tape | None" = None


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, shapes: Sequence[tuple], detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinite values."""

    def __init__(self, primitive: str, node: int | None, inputs: Sequence[int | None]):
        self.primitive = primitive
        self.node = node
        self.inputs = tuple(inputs)
        super().__init__(
            f"{primitive}: non-finite output (node={node}, input nodes={list(self.inputs)})"
        )


class TapeError(RuntimeError):
    """Raised on invalid tape usage (nesting, non-scalar loss, foreign tensors)."""


class Tensor:
    """A float64 array with an optional handle into the active tape."""

    __slots__ = ("value", "node", "tape")
    __array_priority__ = 1000

    def __init__(self, value, node: int | None = None, tape: "Tape | None" = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def tracked(self) -> bool:
        return self.node is not None and self.tape is not None and self.tape is _ACTIVE_TAPE

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f"node={self.node}" if self.node is not None else "const"
        return f"Tensor({self.value!r}, {tag})"

    def __len__(self) -> int:
        return len(self.value)

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Record:
    kind: str
    inputs: tuple
    output: int
    vjp: Callable


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; tensors created with :meth:`watch` inside the
    block are leaves whose gradients :meth:`backward` returns.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, tuple] = {}
        self._next = 0

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _new_node(self) -> int:
        node = self._next
        self._next += 1
        return node

    def watch(self, value) -> Tensor:
        """Register a leaf tensor (a copy of ``value``)."""
        if self is not _ACTIVE_TAPE:
            raise TapeError("watch() requires this tape to be active")
        arr = np.array(value.value if isinstance(value, Tensor) else value, dtype=np.float64)
        node = self._new_node()
        self.leaves[node] = arr.shape
        return Tensor(arr, node, self)

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.watch(value) for name, value in params.items()}

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Return d loss / d leaf for every leaf of this tape, keyed by node id."""
        if loss.value.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.node is not None and loss.tape is self:
            grads[loss.node] = np.ones_like(loss.value)
        for rec in reversed(self.records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for node, gi in zip(rec.inputs, in_grads):
                if node is None or gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi
        return {
            node: np.asarray(grads.get(node, np.zeros(shape)), dtype=np.float64).reshape(shape)
            for node, shape in self.leaves.items()
        }

    def gradient(self, loss: Tensor, targets):
        """Gradients for a mapping or sequence of watched tensors, same structure."""
        grads = self.backward(loss)
        if isinstance(targets, Mapping):
            return {k: grads[t.node] for k, t in targets.items()}
        return [grads[t.node] for t in targets]


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient map for ``loss`` on the tape that recorded it."""
    if loss.tape is None:
        raise TapeError("loss is a constant; nothing was recorded")
    return loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive machinery


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(kind, shapes) from None


_FORWARD: dict[str, Callable] = {}


def _primitive(name: str):
    def register(fn):
        _FORWARD[name] = fn
        return fn

    return register


def apply_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Evaluate primitive ``kind`` on ``inputs`` and record it if tracked."""
    try:
        forward = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.value for t in tensors]
    with np.errstate(all="ignore"):
        out, vjp = forward(*arrays, **attrs)
    out = np.asarray(out, dtype=np.float64)
    tape = _ACTIVE_TAPE
    in_nodes = tuple(t.node if (t.tape is tape and tape is not None) else None for t in tensors)
    tracked = tape is not None and any(n is not None for n in in_nodes)
    node = tape._new_node() if tracked else None
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(kind, node, in_nodes)
    if tracked:
        tape.records.append(_Record(kind, in_nodes, node, vjp))
        return Tensor(out, node, tape)
    return Tensor(out)


# elementwise binary ---------------------------------------------------------


@_primitive("add")
def _add(a, b):
    _broadcast_shape("add", a.shape, b.shape)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@_primitive("sub")
def _sub(a, b):
    _broadcast_shape("sub", a.shape, b.shape)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@_primitive("mul")
def _mul(a, b):
    _broadcast_shape("mul", a.shape, b.shape)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_primitive("div")
def _div(a, b):
    _broadcast_shape("div", a.shape, b.shape)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@_primitive("where")
def _where(cond, a, b):
    _broadcast_shape("where", cond.shape, a.shape, b.shape)
    c = cond != 0
    return np.where(c, a, b), lambda g: (
        None,
        _unbroadcast(np.where(c, g, 0.0), a.shape),
        _unbroadcast(np.where(c, 0.0, g), b.shape),
    )


# elementwise unary ----------------------------------------------------------


@_primitive("neg")
def _neg(a):
    return -a, lambda g: (-g,)


@_primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@_primitive("log")
def _log(a):
    safe = a > LOG_CLAMP
    out = np.log(np.maximum(a, LOG_CLAMP))
    return out, lambda g: (np.where(safe, g / np.where(safe, a, 1.0), 0.0),)


@_primitive("square")
def _square(a):
    return a * a, lambda g: (2.0 * g * a,)


@_primitive("sqrt")
def _sqrt(a):
    out = np.sqrt(a)
    return out, lambda g: (0.5 * g / out,)


@_primitive("relu")
def _relu(a):
    pos = a > 0
    return np.where(pos, a, 0.0), lambda g: (np.where(pos, g, 0.0),)


@_primitive("leaky_relu")
def _leaky_relu(a, alpha=0.2):
    pos = a > 0
    return np.where(pos, a, alpha * a), lambda g: (np.where(pos, g, alpha * g),)


@_primitive("clip")
def _clip(a, lo=-np.inf, hi=np.inf):
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), lambda g: (np.where(inside, g, 0.0),)


@_primitive("stop_gradient")
def _stop_gradient(a):
    return a.copy(), lambda g: (None,)


# reductions and normalisers -------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


@_primitive("sum")
def _sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


@_primitive("mean")
def _mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, vjp


@_primitive("logsumexp")
def _logsumexp(a, axis=-1, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = e / s
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return out, vjp


@_primitive("softmax")
def _softmax(a, axis=-1):
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return out, vjp


@_primitive("log_softmax")
def _log_softmax(a, axis=-1):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return out, vjp


@_primitive("layer_norm")
def _layer_norm(x, scale, shift, eps=LAYER_NORM_EPS):
    if scale.shape[-1:] != x.shape[-1:] or shift.shape[-1:] != x.shape[-1:]:
        raise ShapeError("layer_norm", (x.shape, scale.shape, shift.shape))
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale + shift

    def vjp(g):
        dxhat = g * scale
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, scale.shape), _unbroadcast(g, shift.shape)

    return out, vjp


# linear algebra and shape ---------------------------------------------------


@_primitive("matmul")
def _matmul(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", (a.shape, b.shape), "scalar operand")
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError("matmul", (a.shape, b.shape))
    try:
        out2 = a2 @ b2
    except ValueError:
        raise ShapeError("matmul", (a.shape, b.shape)) from None
    out = out2
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim > 1 else out[..., 0]

    def vjp(g):
        g2 = g
        if a.ndim == 1 and b.ndim == 1:
            g2 = np.reshape(g, (1, 1))
        elif b.ndim == 1:
            g2 = g[..., None]
        elif a.ndim == 1:
            g2 = g[..., None, :]
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
        return ga, gb

    return out, vjp


@_primitive("reshape")
def _reshape(a, shape=()):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", (a.shape, tuple(shape))) from None
    return out, lambda g: (g.reshape(a.shape),)


@_primitive("transpose")
def _transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inv = np.argsort(axes)
    return np.transpose(a, axes), lambda g: (np.transpose(g, inv),)


@_primitive("broadcast_to")
def _broadcast_to(a, shape=()):
    try:
        out = np.broadcast_to(a, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", (a.shape, tuple(shape))) from None
    return out, lambda g: (_unbroadcast(g, a.shape),)


@_primitive("getitem")
def _getitem(a, index=()):
    out = np.array(a[index])

    def vjp(g):
        full = np.zeros_like(a)
        np.add.at(full, index, g)
        return (full,)

    return out, vjp


@_primitive("slice")
def _slice(a, axis=-1, start=0, stop=None):
    ax = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    out = a[sl].copy()

    def vjp(g):
        full = np.zeros_like(a)
        full[sl] = g
        return (full,)

    return out, vjp


@_primitive("take_along_axis")
def _take_along_axis(a, indices=None, axis=-1):
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take_along_axis(a, idx, axis=axis)

    def vjp(g):
        # scatter-add, indices may repeat
        full = np.zeros_like(a)
        ax = axis % a.ndim
        grids = np.indices(idx.shape, sparse=True)
        loc = tuple(idx if d == ax else grids[d] for d in range(a.ndim))
        np.add.at(full, loc, g)
        return (full,)

    return out, vjp


def _concat_forward(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", [x.shape for x in arrays]) from None
    sizes = [x.shape[axis] for x in arrays]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(arrays))
        )

    return out, vjp


_FORWARD["concat"] = _concat_forward


# ---------------------------------------------------------------------------
# public functional API


def add(a, b):
    return apply_primitive("add", a, b)


def sub(a, b):
    return apply_primitive("sub", a, b)


def mul(a, b):
    return apply_primitive("mul", a, b)


def div(a, b):
    return apply_primitive("div", a, b)


def neg(a):
    return apply_primitive("neg", a)


def exp(a):
    return apply_primitive("exp", a)


def log(a):
    """Natural log with inputs clamped below at ``LOG_CLAMP``."""
    return apply_primitive("log", a)


def square(a):
    return apply_primitive("square", a)


def sqrt(a):
    return apply_primitive("sqrt", a)


def relu(a):
    return apply_primitive("relu", a)


def leaky_relu(a, alpha: float = 0.2):
    return apply_primitive("leaky_relu", a, alpha=alpha)


def clip(a, lo: float, hi: float):
    return apply_primitive("clip", a, lo=lo, hi=hi)


def where(cond, a, b):
    """Select ``a`` where ``cond`` is nonzero, else ``b``. ``cond`` is never differentiated."""
    return apply_primitive("where", np.asarray(cond, dtype=np.float64), a, b)


def stop_gradient(a):
    return apply_primitive("stop_gradient", a)


def sum_(a, axis=None, keepdims: bool = False):
    return apply_primitive("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False):
    return apply_primitive("mean", a, axis=axis, keepdims=keepdims)


def logsumexp(a, axis: int = -1, keepdims: bool = False):
    return apply_primitive("logsumexp", a, axis=axis, keepdims=keepdims)


def softmax(a, axis: int = -1):
    return apply_primitive("softmax", a, axis=axis)


def log_softmax(a, axis: int = -1):
    return apply_primitive("log_softmax", a, axis=axis)


def layer_norm(x, scale, shift, eps: float = LAYER_NORM_EPS):
    return apply_primitive("layer_norm", x, scale, shift, eps=eps)


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def reshape(a, shape):
    return apply_primitive("reshape", a, shape=tuple(shape))


def transpose(a, axes=None):
    return apply_primitive("transpose", a, axes=None if axes is None else tuple(axes))


def broadcast_to(a, shape):
    return apply_primitive("broadcast_to", a, shape=tuple(shape))


def getitem(a, index):
    return apply_primitive("getitem", a, index=index)


def slice_(a, axis: int, start: int, stop: int | None):
    return apply_primitive("slice", a, axis=axis, start=start, stop=stop)


def take_along_axis(a, indices, axis: int = -1):
    return apply_primitive("take_along_axis", a, indices=indices, axis=axis)


def concat(tensors: Iterable, axis: int = 0):
    return apply_primitive("concat", *list(tensors), axis=axis)


def expand_dims(a, axis: int):
    a = as_tensor(a)
    shape = list(a.shape)
    ax = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(ax, 1)
    return reshape(a, shape)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max over coordinates of |AD - FD| / (|FD| + 1e-12) using central differences."""
    x0 = np.array(as_tensor(x).value, dtype=np.float64)
    with Tape() as tape:
        xt = tape.watch(x0)
        y = f(xt)
        ad = tape.backward(y)[xt.node]
    fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x0.copy())).value)
        flat[i] = orig - step
        fm = float(f(Tensor(x0.copy())).value)
        flat[i] = orig
        fd_flat[i] = (fp - fm) / (2.0 * step)
    return float(np.max(np.abs(ad - fd) / (np.abs(fd) + 1e-12)))
