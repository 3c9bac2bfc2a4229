"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order (which is a valid topological order); :func:`backward` replays the
records in reverse. Outside a tape nothing is recorded, which keeps inference
cheap.

Tensors are float64 throughout. ``gelu`` uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
IGNORE = -100

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class DimensionError(ValueError):
    pass


class LabelRangeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` get a zero ``grad`` array up
    front. Results of recorded operations receive ``grad`` when a backward
    pass reaches them.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.base is not None or not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; every operation executed while the tape is
    active and touching a ``requires_grad`` tensor appends a :class:`Record`.
    A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_TAPES: list[Tape] = []


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, bw) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    if _TAPES and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _TAPES[-1].records.append(Record(kind, inputs, result, bw))
    else:
        result.requires_grad = False
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every ``requires_grad`` tensor reachable from ``loss``.

    Leaf gradients accumulate (``+=``) into their existing ``grad`` arrays.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape has already been used for a backward pass")
    tape.consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        seen.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    for key, g in grads.items():
        leaf = seen[key]
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + _GELU_C * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _emit("gelu", (a,), out, bw)


_ELEMENTWISE = {"add": add, "mul": mul, "gelu": gelu, "scale": scale}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch ``add``/``mul`` (two tensors), ``gelu`` (one) or ``scale`` (tensor, float)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if p <= 0.0 or not training:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _emit("dropout", (a,), a.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2  # (..., k) @ (k, n) as one 2-D product

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ bd.T if flat else g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if flat:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd
    return _emit("matmul", (a, b), out, bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""
    src_shape = a.shape

    def bw(g):
        ga = np.zeros(src_shape, dtype=DTYPE)
        np.add.at(ga, key, g)
        return (ga,)

    return _emit("take", (a,), np.array(a.data[key]), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    rows = table.shape[0]

    def bw(g):
        flat = g.reshape(-1, g.shape[-1])
        gt = np.zeros((rows, flat.shape[1]), dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), flat)
        return (gt,)

    return _emit("embedding", (table,), table.data[ids], bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), out, bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction.

    ``mask`` (broadcastable boolean) marks allowed entries; disallowed
    entries get exactly zero probability. A slice with no allowed entry
    returns all zeros.
    """
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    x = a.data
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        z = np.where(mask, x, -np.inf)
        m = z.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(z - m)
        s = e.sum(axis=axis, keepdims=True)
        y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), y, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis. ``eps`` follows the BERT convention."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {d}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gain, bias), out, bw)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over positions whose label is not IGNORE.

    With no supervised position the loss is 0 and the gradient is zero.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    vocab = logits.shape[1]
    valid = labels != IGNORE
    bad = valid & ((labels < 0) | (labels >= vocab))
    if bad.any():
        raise LabelRangeError(f"label {int(labels[bad][0])} outside [0, {vocab})")
    n = int(valid.sum())
    if n == 0:
        return _emit("cross_entropy", (logits,), np.asarray(0.0),
                     lambda g: (np.zeros(logits.shape, dtype=DTYPE),))
    rows = np.nonzero(valid)[0]
    cols = labels[valid]
    logp = log_softmax_np(logits.data)
    loss = -logp[rows, cols].sum() / n

    def bw(g):
        p = np.exp(logp)
        p[rows, cols] -= 1.0
        p[~valid] = 0.0
        return (p * (g / n),)

    return _emit("cross_entropy", (logits,), np.asarray(loss), bw)


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean of ``softplus(x) - t*x`` over all entries (numerically stable form)."""
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {t.shape}")
    x = logits.data
    n = max(x.size, 1)
    loss = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((sig - t) * (g / n),)

    return _emit("bce", (logits,), np.asarray(loss), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[int, int] | None = None  # (tensor index, flat coordinate)


def rel_err(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(f, x, eps: float = 1e-6, tol: float = 1e-4, floor: float = 1e-8) -> GradReport:
    """Compare tape gradients with central differences, coordinate by coordinate.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` is called with ``x``
    exactly as given and must return a scalar Tensor. The tensors must have
    ``requires_grad`` set. Gradients smaller than ``floor`` are compared on
    absolute error ``tol * floor``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.zero_grad()
    with Tape() as tape:
        out = f(x)
    backward(out, tape)
    analytic = [t.grad.copy() for t in xs]

    worst, worst_at, count = 0.0, None, 0
    for ti, t in enumerate(xs):
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
        err = rel_err(analytic[ti].reshape(-1), numeric, floor)
        count += err.size
        if err.size and err.max() > worst:
            worst = float(err.max())
            worst_at = (ti, int(err.argmax()))
    return GradReport(worst, worst <= tol, count, worst_at)
