"""Minimal reverse-mode autodiff over dense float64 arrays.

Forward operations record closures onto an active gradient tape; ``Tape.backward``
replays them in exact reverse order, accumulating into the gradients of tracked
leaves. Only the ops the localization head and its losses need are implemented.
Everything is deterministic: no op consults global RNG state, and replay order
is the recording order reversed.

Tapes are activated as context managers. Ops executed with no active tape run
forward-only, which is what inference and search use.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NdiffError(Exception):
    """Base error for the autodiff layer."""


class DimensionError(NdiffError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(NdiffError):
    """An op produced NaN or infinity."""


class BackwardError(NdiffError):
    """Backward requested in an invalid tape state."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "ptal_active_tape", default=None
)


class Tensor:
    """A dense float64 array plus a gradient slot.

    ``tracked`` marks tensors that participate in differentiation, either
    because they are parameters or because they were produced from tracked
    inputs while a tape was active.
    """

    __slots__ = ("value", "grad", "tracked", "name")

    def __init__(self, value, tracked: bool = False, name: str = ""):
        v = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<anon>'}")
        self.value = v
        self.grad: np.ndarray | None = None
        self.tracked = tracked
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        if self.value.ndim == 0:
            raise DimensionError("len() of a scalar tensor")
        return int(self.value.shape[0])

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.value.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}, tracked={self.tracked}{tag})"

    # Arithmetic sugar. Scalars and ndarrays lift to constant tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(lift(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis: int | None = None):
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None):
        return tensor_mean(self, axis)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def lift(x) -> Tensor:
    """Wrap a scalar or array as an untracked constant tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(value, name: str = "") -> Tensor:
    """A tracked leaf whose gradient accumulates across backward replay."""
    return Tensor(value, tracked=True, name=name)


def zero_grads(params: Sequence[Tensor]) -> None:
    """Reset gradient accumulators; call at the start of each step."""
    for p in params:
        p.grad = None


class Tape:
    """Wengert list of recorded ops, replayed in reverse by ``backward``."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._replayed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if _ACTIVE_TAPE.get() is not None:
            raise BackwardError("a tape is already active; tapes do not nest")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Accumulate d(loss)/d(leaf) into every tracked leaf on the tape.

        ``loss`` must be a scalar produced while this tape was active.
        """
        if self._replayed:
            raise BackwardError("tape already replayed; build a fresh tape per step")
        if not self._records:
            raise BackwardError("backward before any recorded forward op")
        if loss.value.shape != ():
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if not any(out is loss for out, _ in self._records):
            raise BackwardError("loss was not produced on this tape")
        self._replayed = True
        loss.grad = np.asarray(float(seed))
        for out, pull in reversed(self._records):
            if out.grad is not None:
                pull(out.grad)


def _record(out: Tensor, inputs: Sequence[Tensor], pull: Callable[[np.ndarray], None]) -> None:
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(t.tracked for t in inputs):
        return
    out.tracked = True
    tape._records.append((out, pull))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.tracked:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting by summing the broadcast axes away."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = lift(a), lift(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = fwd(a.value, b.value)
    out = Tensor(raw)

    def pull(g):
        _accumulate(a, _sum_to_shape(da(g, a.value, b.value), a.value.shape))
        _accumulate(b, _sum_to_shape(db(g, a.value, b.value), b.value.shape))

    _record(out, (a, b), pull)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(a) -> Tensor:
    a = lift(a)
    out = Tensor(-a.value)
    _record(out, (a,), lambda g: _accumulate(a, -g))
    return out


def power(a, exponent: float) -> Tensor:
    """Elementwise a**p for a constant real exponent."""
    if isinstance(exponent, Tensor):
        raise DimensionError("power exponent must be a plain number")
    a = lift(a)
    p = float(exponent)
    out = Tensor(a.value ** p)

    def pull(g):
        _accumulate(a, g * p * a.value ** (p - 1.0))

    _record(out, (a,), pull)
    return out


def log(a) -> Tensor:
    a = lift(a)
    out = Tensor(np.log(a.value)) if np.all(a.value > 0) else None
    if out is None:
        raise NonFiniteError("log of a non-positive value")
    _record(out, (a,), lambda g: _accumulate(a, g / a.value))
    return out


def exp(a) -> Tensor:
    a = lift(a)
    out = Tensor(np.exp(a.value))
    _record(out, (a,), lambda g: _accumulate(a, g * out.value))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is passed only strictly inside."""
    a = lift(a)
    out = Tensor(np.clip(a.value, lo, hi))
    mask = (a.value > lo) & (a.value < hi)

    def pull(g):
        _accumulate(a, g * mask)

    _record(out, (a,), pull)
    return out


def relu(a) -> Tensor:
    a = lift(a)
    out = Tensor(np.maximum(a.value, 0.0))
    mask = a.value > 0

    def pull(g):
        _accumulate(a, g * mask)

    _record(out, (a,), pull)
    return out


def sigmoid(a) -> Tensor:
    """Numerically stable logistic; no exp overflow for large |x|."""
    a = lift(a)
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def pull(g):
        _accumulate(a, g * s * (1.0 - s))

    _record(out, (a,), pull)
    return out


def activation(a, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


def tensor_sum(a, axis: int | None = None) -> Tensor:
    a = lift(a)
    out = Tensor(a.value.sum(axis=axis))

    def pull(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())

    _record(out, (a,), pull)
    return out


def tensor_mean(a, axis: int | None = None) -> Tensor:
    a = lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return tensor_sum(a, axis) / float(n)


def take(a, idx) -> Tensor:
    """Indexing/slicing; scatter-adds the gradient back (duplicates accumulate)."""
    a = lift(a)
    out = Tensor(a.value[idx])

    def pull(g):
        if not a.tracked:
            return
        buf = np.zeros_like(a.value)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    _record(out, (a,), pull)
    return out


def topk_mean_rows(a, k: int) -> Tensor:
    """Per-row mean of the k largest entries of a 2-D tensor.

    Ties resolve to the earliest column so the selection is deterministic.
    Returns a vector with one entry per row.
    """
    a = lift(a)
    if a.value.ndim != 2:
        raise DimensionError(f"topk_mean_rows needs a 2-D tensor, got shape {a.value.shape}")
    rows, cols = a.value.shape
    if not 1 <= k <= cols:
        raise DimensionError(f"k={k} out of range for {cols} columns")
    picks = np.empty((rows, k), dtype=np.intp)
    for r in range(rows):
        picks[r] = np.argsort(-a.value[r], kind="stable")[:k]
    out = Tensor(a.value[np.arange(rows)[:, None], picks].mean(axis=1))

    def pull(g):
        if not a.tracked:
            return
        buf = np.zeros_like(a.value)
        np.add.at(buf, (np.arange(rows)[:, None], picks), (g / k)[:, None])
        _accumulate(a, buf)

    _record(out, (a,), pull)
    return out


@dataclass
class ConvParams:
    """Weights of one 1-D convolution: weight [out, in, kernel], bias [out].

    Kernel width must be odd; zero padding of (kernel - 1) // 2 keeps the
    temporal length unchanged.
    """

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.value.ndim != 3:
            raise DimensionError(f"conv weight must be 3-D, got shape {self.weight.shape}")
        if self.kernel % 2 != 1:
            raise DimensionError(f"kernel width must be odd, got {self.kernel}")
        if self.bias.value.shape != (self.out_channels,):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.out_channels} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.value.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.value.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.value.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


def conv1d(x, params: ConvParams) -> Tensor:
    """Same-length 1-D convolution of x [in, T] with zero padding."""
    x = lift(x)
    if x.value.ndim != 2:
        raise DimensionError(f"conv1d input must be 2-D [channels, time], got {x.value.shape}")
    din, t = x.value.shape
    if din != params.in_channels:
        raise DimensionError(
            f"conv1d input has {din} channels but weight expects {params.in_channels}"
        )
    w, b = params.weight, params.bias
    k, pad = params.kernel, params.padding
    xp = np.pad(x.value, ((0, 0), (pad, pad)))
    acc = np.zeros((params.out_channels, t))
    for j in range(k):
        acc += w.value[:, :, j] @ xp[:, j : j + t]
    acc += b.value[:, None]
    out = Tensor(acc)

    def pull(g):
        _accumulate(b, g.sum(axis=1))
        if w.tracked:
            gw = np.empty_like(w.value)
            for j in range(k):
                gw[:, :, j] = g @ xp[:, j : j + t].T
            _accumulate(w, gw)
        if x.tracked:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + t] += w.value[:, :, j].T @ g
            _accumulate(x, gxp[:, pad : pad + t])

    _record(out, (x, w, b), pull)
    return out


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    *,
    sample_size: int = 120,
    seed: int = 0,
) -> float:
    """Compare tape gradients against central differences.

    ``loss_fn`` must be deterministic given the current parameter values; it is
    evaluated repeatedly while coordinates of ``params`` are nudged by ±h. A
    random subsample of coordinates is checked (all of them when the parameter
    space is small). Returns the max relative error, with the relative scale
    floored at 1e-8.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    if not params:
        raise ValueError("no parameters to check")

    zero_grads(params)
    with Tape() as tape:
        loss = loss_fn()
    base = loss.item()
    tape.backward(loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    if loss_fn().item() != base:
        raise NdiffError("loss_fn is not deterministic at fixed parameters")

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > sample_size:
        chosen = rng.choice(len(coords), size=sample_size, replace=False)
        coords = [coords[int(c)] for c in sorted(chosen)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        keep = flat[j]
        flat[j] = keep + h
        f_plus = loss_fn().item()
        flat[j] = keep - h
        f_minus = loss_fn().item()
        flat[j] = keep
        numeric = (f_plus - f_minus) / (2.0 * h)
        exact = analytic[i].reshape(-1)[j]
        rel = abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-8)
        worst = max(worst, rel)
    return worst
