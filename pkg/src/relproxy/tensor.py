"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation appends its output to the active tape together
with a closure computing the vector-Jacobian product.  ``backward`` sweeps the
tape once in reverse order; the tape is then consumed and a fresh one is
started by the next recorded operation.

Shape rules are deliberately strict: besides scalar scaling and bias-row
addition (a 1-D operand matching the trailing axis) no broadcasting happens.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TensorError", "ShapeError", "TapeError", "StaleTapeError",
    "NonFiniteError", "no_grad", "grad_enabled", "backward", "grad_check",
    "matmul", "add", "sub", "mul", "scale", "concat", "stack", "relu", "exp", "log",
    "sqrt", "softmax", "log_softmax", "mean", "sum", "l2_normalize", "transpose",
    "reshape", "index", "im2col", "huber",
]


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError, ValueError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


class StaleTapeError(TapeError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class Tape:
    """Ordered record of the non-leaf tensors produced since the last backward."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"
        self._tape: Tape | None = None

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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else _shift(self, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else _shift(self, -float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], op: str, vjp: Callable) -> Tensor:
    # a finite sum proves every entry finite; only a non-finite sum needs the full scan
    if not np.isfinite(np.sum(data)) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._parents = ()
    out._vjp = None
    out._tape = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        tape = _tape()
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._tape = tape
        tape.nodes.append(out)
    return out


def _shape_error(op: str, a, b=None) -> ShapeError:
    if b is None:
        return ShapeError(f"{op}: invalid shape {tuple(a)}")
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes.

    ``b`` is either a plain matrix shared across the batch or has exactly the
    same leading axes as ``a``.  A 1-D ``a`` is treated as a row vector.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.ndim == 0 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise _shape_error("matmul", A.shape, B.shape)
    shared = B.ndim == 2
    if not shared and (A.ndim != B.ndim or A.shape[:-2] != B.shape[:-2]):
        raise _shape_error("matmul", A.shape, B.shape)
    out = np.matmul(A, B)

    def vjp(g):
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        ga = np.matmul(g, np.swapaxes(B, -1, -2))
        if shared:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), "matmul", vjp)


def _binary_shapes(op: str, A: np.ndarray, B: np.ndarray) -> bool:
    """Return True when ``B`` is a bias row for ``A``; raise on anything else."""
    if A.shape == B.shape:
        return False
    if B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        return True
    raise _shape_error(op, A.shape, B.shape)


def _reduce_bias(g: np.ndarray, row: bool) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0) if row else g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    row = _binary_shapes("add", a.data, b.data)
    return _record(a.data + b.data, (a, b), "add", lambda g: (g, _reduce_bias(g, row)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    row = _binary_shapes("sub", a.data, b.data)
    return _record(a.data - b.data, (a, b), "sub", lambda g: (g, -_reduce_bias(g, row)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _record(A * B, (a, b), "mul", lambda g: (g * B, g * A))


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _record(a.data * s, (a,), "scale", lambda g: (g * s,))


def _shift(a: Tensor, s: float) -> Tensor:
    return _record(a.data + s, (a,), "shift", lambda g: (g,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref) if ref else 0
    for t in ts[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise _shape_error("concat", ref, t.shape)
    out = np.concatenate([t.data for t in ts], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _record(out, ts, "concat", lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: no inputs")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise _shape_error("stack", ts[0].shape, t.shape)
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _record(out, ts, "stack",
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record(np.maximum(a.data, 0.0), (a,), "relu", lambda g: (g * (a.data > 0),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(A)
    return _record(out, (a,), "log", lambda g: (g / A,))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)

    return _record(out, (a,), "sqrt", vjp)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    a = _as_tensor(a)
    if a.ndim == 0:
        raise _shape_error("softmax", a.shape)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), "softmax", vjp)


def log_softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0:
        raise _shape_error("log_softmax", a.shape)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _record(out, (a,), "log_softmax",
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def _axes(ndim: int, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    axes = _axes(a.ndim, axis)
    out = a.data.sum(axis=axes)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (a,), "sum", vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _axes(a.ndim, axis)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise _shape_error("mean", a.shape)
    out = a.data.mean(axis=axes)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / n, shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (a,), "mean", vjp)


def l2_normalize(a: Tensor, zero_ok: bool = False) -> Tensor:
    """Scale every vector along the last axis to unit Euclidean norm.

    Zero vectors raise unless ``zero_ok``, in which case they stay zero and pass no gradient.
    """
    a = _as_tensor(a)
    if a.ndim == 0:
        raise _shape_error("l2_normalize", a.shape)
    norm = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    zero = norm == 0
    if np.any(zero):
        if not zero_ok:
            raise ZeroDivisionError("l2_normalize: zero vector")
        norm = np.where(zero, np.inf, norm)
    out = a.data / norm

    def vjp(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _record(out, (a,), "l2_normalize", vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise _shape_error("transpose", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise _shape_error("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), "transpose",
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise _shape_error("reshape", a.shape, tuple(shape)) from None
    src = a.shape
    return _record(out, (a,), "reshape", lambda g: (g.reshape(src),))


def index(a: Tensor, idx) -> Tensor:
    """numpy-style indexing; repeated indices accumulate in the gradient."""
    a = _as_tensor(a)
    try:
        out = np.array(a.data[idx], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(f"index: {exc} for shape {a.shape}") from None
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), "index", vjp)


def im2col(a: Tensor, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold an NHWC tensor into (N, OH, OW, kernel*kernel*C) patches."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise _shape_error("im2col", a.shape)
    n, h, w, c = a.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kernel or wp < kernel:
        raise _shape_error("im2col", a.shape, (kernel, kernel))
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1
    padded = np.pad(a.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(1, 2))
    # win[n, oh, ow, c, ki, kj] -> patches[n, oh, ow, ki, kj, c]
    patches = win[:, :stride * (oh - 1) + 1:stride, :stride * (ow - 1) + 1:stride]
    out = patches.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh, ow, kernel * kernel * c)

    def vjp(g):
        gp = np.zeros((n, hp, wp, c))
        g6 = g.reshape(n, oh, ow, kernel, kernel, c)
        for ki in range(kernel):
            for kj in range(kernel):
                gp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride, :] += g6[:, :, :, ki, kj, :]
        return (gp[:, pad:pad + h, pad:pad + w, :],)

    return _record(np.ascontiguousarray(out), (a,), "im2col", vjp)


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: 0.5 x^2 inside ``delta``, linear outside."""
    a = _as_tensor(a)
    x = a.data
    inside = np.abs(x) <= delta
    out = np.where(inside, 0.5 * x * x, delta * (np.abs(x) - 0.5 * delta))
    return _record(out, (a,), "huber",
                   lambda g: (g * np.where(inside, x, delta * np.sign(x)),))


# ---------------------------------------------------------------- backward

def backward(root: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` of every grad-requiring leaf reachable from ``root``.

    Leaf gradients are overwritten, not accumulated.  Leaves listed in
    ``params`` but not used by the computation get an all-zero gradient.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    for p in params:
        p.grad = np.zeros_like(p.data)
    tape = root._tape
    if tape is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.data)
            return
        raise TapeError("backward: root was not produced by a recorded operation")
    if tape.consumed:
        raise StaleTapeError("backward: tape already consumed; run a new forward pass")
    tape.consumed = True

    nodes = tape.nodes
    zeroed = set()
    for node in nodes:
        for p in node._parents:
            if p.requires_grad and p._tape is None and id(p) not in zeroed:
                zeroed.add(id(p))
                p.grad = np.zeros_like(p.data)

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is not None:
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is tape:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg
                elif p._tape is None:
                    p.grad += pg
        node._vjp = None
        node._parents = ()
    tape.nodes = []


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative discrepancy between ``backward`` and central differences.

    ``fn`` must rebuild the scalar from ``params`` on each call.  The error
    of an entry is ``|analytic - numeric| / max(1, |numeric|)``.  With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed.
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    root = fn()
    if root.requires_grad:
        backward(root, params)
    else:
        for p in params:
            p.grad = np.zeros_like(p.data)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = rng.choice(flat.size, size=max_entries, replace=False)
            for i in entries:
                orig = flat[i]
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
