"""Minimal tape-based reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every differentiable op whose inputs require a
gradient. :func:`backward` walks the tape once, returns a gradient per leaf
and releases the tape: records, saved activations and closures are dropped
and the tape refuses further use. Constant tensors (no tape) compute
eagerly and record nothing, which is how evaluation runs.

``relu`` uses the subgradient 0 at exactly 0, so finite-difference checks must
stay away from kinks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class NDGradError(Exception):
    pass


class ShapeMismatch(NDGradError, ValueError):
    pass


class IndexOutOfRange(NDGradError, IndexError):
    pass


class NonScalarLoss(NDGradError, ValueError):
    pass


class EmptyTape(NDGradError, RuntimeError):
    pass


class TapeReleased(NDGradError, RuntimeError):
    pass


class ActivationCounter:
    """Process-wide count of intermediate buffers held by live tapes."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def acquire(self, n: int = 1) -> None:
        self.live += n
        if self.live > self.peak:
            self.peak = self.live

    def free(self, n: int) -> None:
        self.live -= n

    def reset_peak(self) -> None:
        self.peak = self.live


ACTIVATIONS = ActivationCounter()


class Tensor:
    """Immutable dense array, optionally tracked by a tape."""

    __slots__ = ("data", "requires_grad", "_tape", "_slot", "name")
    __array_priority__ = 100  # numpy defers to our reflected operators

    def __init__(self, data, requires_grad: bool = False, *, _tape=None, _slot=None, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = _tape
        self._slot = _slot
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLoss(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: int, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Single-use record of executed ops; consumed by :func:`backward`."""

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._leaves: dict[str, Tensor] = {}
        self._next = 0
        self.released = False

    def __len__(self) -> int:
        return len(self._records)

    def _check(self) -> None:
        if self.released:
            raise TapeReleased("tape was consumed by backward(); start a new one")

    def leaf(self, name: str, value, requires_grad: bool = True) -> Tensor:
        self._check()
        if name in self._leaves:
            return self._leaves[name]
        t = Tensor(value, requires_grad, _tape=self, _slot=self._new_slot(), name=name)
        self._leaves[name] = t
        return t

    @property
    def leaves(self) -> dict[str, Tensor]:
        return dict(self._leaves)

    def _new_slot(self) -> int:
        self._next += 1
        return self._next

    def _record(self, out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
        self._check()
        out = Tensor(out_data, True, _tape=self, _slot=self._new_slot())
        self._records.append(_Record(out._slot, inputs, vjp))
        ACTIVATIONS.acquire()
        return out

    def release(self) -> None:
        if not self.released:
            ACTIVATIONS.free(len(self._records))
            self._records.clear()
            self.released = True


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.requires_grad and t._tape is not None:
            if tape is None:
                tape = t._tape
            elif t._tape is not tape:
                raise NDGradError("inputs belong to different tapes")
    if tape is None:
        return Tensor(out_data)
    return tape._record(out_data, tuple(inputs), vjp)


# ---------------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 0:
        return _emit(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeMismatch(f"add {a.shape} + {b.shape}")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


class _ReluMargin:
    """Tracks the smallest |input| seen by relu while active (for gradchecks)."""

    def __init__(self) -> None:
        self.value = np.inf
        self.active = 0

    def __enter__(self):
        self.active += 1
        self.value = np.inf
        return self

    def __exit__(self, *exc) -> None:
        self.active -= 1


relu_margin = _ReluMargin()


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    if relu_margin.active and x.size:
        relu_margin.value = min(relu_margin.value, float(np.abs(x.data).min()))
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _emit(y, (x,), lambda g: (g * 0.5 / y,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient flows only strictly inside."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def l2_normalize(x, eps: float = 0.0) -> Tensor:
    """Normalize each row of a 2-D tensor to unit L2 norm."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"l2_normalize expects 2-D input, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True)) + eps
    y = x.data / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _emit(y, (x,), vjp)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects 2-D input, got {x.shape}")
    return _emit(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _emit(y, (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit(y, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def dot(a, b) -> Tensor:
    return sum(mul(a, b))


def one_hot(target, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim != 1 or not np.issubdtype(target.dtype, np.integer):
        raise IndexOutOfRange("class targets must be a 1-D integer vector")
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise IndexOutOfRange(f"target outside [0, {num_classes})")
    out = np.zeros((target.shape[0], num_classes))
    out[np.arange(target.shape[0]), target] = 1.0
    return out


def softmax_cross_entropy(logits, target) -> Tensor:
    """Batch-mean cross-entropy.

    ``target`` is either a class-index vector or an ``n x C`` matrix of
    row distributions (soft labels).
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"logits must be n x C, got {logits.shape}")
    n, c = logits.shape
    target = np.asarray(target)
    if target.ndim == 2:
        if target.shape != (n, c):
            raise ShapeMismatch(f"soft target {target.shape} vs logits {logits.shape}")
        probs = target.astype(np.float64)
    else:
        if target.shape != (n,):
            raise ShapeMismatch(f"target {target.shape} vs logits {logits.shape}")
        probs = one_hot(target, c)
    loss, grad = kernels.softmax_xent(logits.data, probs)
    return _emit(np.asarray(loss), (logits,), lambda g: (grad * float(g),))


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber with transition at ``beta``) over all elements."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"smooth_l1 {pred.shape} vs {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size
    dgrad = np.where(quad, d / beta, np.sign(d)) / n
    return _emit(np.asarray(per.mean()), (pred,), lambda g: (dgrad * float(g),))


# ----------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every grad-requiring leaf.

    ``tape`` is released on return and on every error raised here.
    """
    tape._check()
    try:
        if loss.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if not tape._records:
            raise EmptyTape("no differentiable operations were recorded")
        if loss._tape is not tape:
            raise NDGradError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss._slot: np.ones(loss.shape)}
        for rec in reversed(tape._records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or t._tape is not tape or not t.requires_grad:
                    continue
                prev = grads.get(t._slot)
                grads[t._slot] = gi if prev is None else prev + gi
        return {
            name: np.array(grads.get(t._slot, np.zeros(t.shape)), dtype=np.float64).reshape(t.shape)
            for name, t in tape._leaves.items()
            if t.requires_grad
        }
    finally:
        tape.release()


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out
