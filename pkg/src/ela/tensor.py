"""Dense tensor substrate with a reverse-mode differentiation tape.

Tensors are immutable numpy-backed value objects restricted to f32/f64.
Every reduction (matmul inner products, sums, prefix sums) accumulates in
f64 regardless of the tensor precision; results are cast back to the input
precision. This is what lets the attention module's exactness tolerances
hold for f32 inputs.

Autodiff is a classic tape: while a Tape is active (``with Tape() as t:``)
every primitive op appends a record (output, parents, vjp). ``backward``
replays records in strict reverse order, accumulating cotangents keyed by
tensor identity. Leaves never touched by the loss read back zero gradients.

Elementwise ``exp`` is the one primitive allowed to return non-finite
values (it saturates to +Inf above ~709 in f64); callers are expected to
pre-stabilize. Set ELA_CHECK_FINITE=1 to validate every op output (used by
the test suite; off by default to keep training steps cheap).
"""

from __future__ import annotations

import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import FinitenessError, ShapeError, UsageError

PRECISIONS = {"f32": np.float32, "f64": np.float64}
_DTYPE_TO_PRECISION = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_uid = itertools.count(1)

_CHECK_ALL_OPS = os.environ.get("ELA_CHECK_FINITE", "0") == "1"


class Tensor:
    """Immutable dense array of f32 or f64 values."""

    __slots__ = ("data", "uid")

    def __init__(self, data, precision: str | None = None, check_finite: bool = True):
        if precision is not None and precision not in PRECISIONS:
            raise UsageError(f"unknown precision {precision!r}; expected f32 or f64")
        dtype = PRECISIONS[precision] if precision is not None else None
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_TO_PRECISION:
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if check_finite and not np.isfinite(arr).all():
            raise FinitenessError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr
        self.uid = next(_uid)

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
    def precision(self) -> str:
        return _DTYPE_TO_PRECISION[self.data.dtype]

    # [B, L, D] accessors, valid for rank-3 tensors only.
    @property
    def batch(self) -> int:
        self._require3()
        return self.data.shape[0]

    @property
    def length(self) -> int:
        self._require3()
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        self._require3()
        return self.data.shape[2]

    def _require3(self):
        if self.data.ndim != 3:
            raise ShapeError(f"rank-3 tensor required, got shape {self.data.shape}")

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self.data.astype(PRECISIONS[precision]), check_finite=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, {self.precision}, uid={self.uid})"


def tensor3(data, precision: str | None = None) -> Tensor:
    """Construct a [B, L, D] tensor, validating rank and finiteness."""
    t = Tensor(data, precision=precision)
    if t.ndim != 3:
        raise ShapeError(f"tensor3 requires rank 3, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"tensor3 dimensions must be >= 1, got {t.shape}")
    return t


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Single-owner record of primitive ops, replayed backward for gradients."""

    def __init__(self):
        self._records: list[tuple[int, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()
        self._grads: dict[int, np.ndarray] = {}
        self._ran_backward = False

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def record(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable):
        """vjp(g) must return one cotangent array (or None) per parent."""
        self._records.append((out.uid, tuple(parents), vjp))
        self._outputs.add(out.uid)

    def backward(self, loss: Tensor) -> None:
        if loss.uid not in self._outputs:
            raise UsageError("loss is not an output recorded on this tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._grads = {loss.uid: np.ones_like(loss.data)}
        for out_uid, parents, vjp in reversed(self._records):
            g = self._grads.get(out_uid)
            if g is None:
                continue  # not reachable from the loss
            cotangents = vjp(g)
            for parent, ct in zip(parents, cotangents):
                if ct is None:
                    continue
                if ct.shape != parent.data.shape:
                    raise ShapeError(
                        f"vjp produced shape {ct.shape} for parent {parent.data.shape}"
                    )
                acc = self._grads.get(parent.uid)
                self._grads[parent.uid] = ct if acc is None else acc + ct
        self._ran_backward = True

    def grad(self, t: Tensor) -> Tensor:
        """Gradient of the loss w.r.t. t; zeros if t never influenced the loss."""
        if not self._ran_backward:
            raise UsageError("backward() has not run on this tape")
        g = self._grads.get(t.uid)
        if g is None:
            g = np.zeros_like(t.data)
        return Tensor(np.asarray(g, dtype=t.data.dtype), check_finite=False)


_tape_stack: list[Tape] = []


def _push_tape(t: Tape):
    _tape_stack.append(t)


def _pop_tape(t: Tape):
    if not _tape_stack or _tape_stack[-1] is not t:
        raise UsageError("tape stack corrupted: exiting a tape that is not active")
    _tape_stack.pop()


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def record_op(out: Tensor, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Register a custom differentiable op on the active tape (if any)."""
    t = active_tape()
    if t is not None:
        t.record(out, parents, vjp)
    return out


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, detached from any tape history."""
    return Tensor(a.data, check_finite=False)


# ---------------------------------------------------------------------------
# Primitive ops


def _out(arr: np.ndarray, dtype, check_finite: bool | None = None) -> Tensor:
    check = _CHECK_ALL_OPS if check_finite is None else check_finite
    return Tensor(np.asarray(arr, dtype=dtype), check_finite=check)


def _coerce(a, like: Tensor) -> tuple[np.ndarray, Tensor | None]:
    """Return (array, tensor-or-None). Non-Tensor operands are constants."""
    if isinstance(a, Tensor):
        if a.data.dtype != like.data.dtype:
            raise UsageError(
                f"precision mismatch: {a.precision} vs {like.precision}"
            )
        return a.data, a
    return np.asarray(a, dtype=like.data.dtype), None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted cotangent back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a: Tensor, b, fwd, vjp_a, vjp_b) -> Tensor:
    b_arr, b_t = _coerce(b, a)
    out = _out(fwd(a.data, b_arr), a.data.dtype)
    parents = (a,) if b_t is None else (a, b_t)

    def vjp(g):
        ga = _unbroadcast(vjp_a(g, a.data, b_arr), a.data.shape)
        if b_t is None:
            return (ga,)
        gb = _unbroadcast(vjp_b(g, a.data, b_arr), b_t.data.shape)
        return (ga, gb)

    return record_op(out, parents, vjp)


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a: Tensor, b) -> Tensor:
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def exp(a: Tensor) -> Tensor:
    out_arr = np.exp(a.data)
    out = _out(out_arr, a.data.dtype, check_finite=False)
    return record_op(out, (a,), lambda g: (g * out_arr,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # stable two-branch form, selected elementwise; exp(-|x|) cannot overflow
    en = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + en), en / (1.0 + en))
    out = _out(s, a.data.dtype)
    return record_op(out, (a,), lambda g: (g * s * (1.0 - s),))


def rsqrt(a: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(a.data.astype(np.float64))
    out = _out(y, a.data.dtype)
    return record_op(out, (a,), lambda g: ((-0.5 * y**3 * g).astype(a.data.dtype),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; accumulates in f64."""
    if not isinstance(b, Tensor):
        raise UsageError("matmul requires two Tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires matrices, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise UsageError(f"precision mismatch: {a.precision} vs {b.precision}")
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = _out(a64 @ b64, a.data.dtype)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        return (
            (g64 @ b64.T).astype(a.data.dtype),
            (a64.T @ g64).astype(b.data.dtype),
        )

    return record_op(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of x with a [D, F] weight; f64 accumulation."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} x {w.shape}")
    if x.data.dtype != w.data.dtype:
        raise UsageError(f"precision mismatch: {x.precision} vs {w.precision}")
    x64 = x.data.astype(np.float64, copy=False)
    w64 = w.data.astype(np.float64, copy=False)
    out = _out(x64 @ w64, x.data.dtype)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        gx = (g64 @ w64.T).astype(x.data.dtype)
        gw = np.tensordot(
            x64.reshape(-1, x.shape[-1]), g64.reshape(-1, w.shape[1]), axes=(0, 0)
        ).astype(w.data.dtype)
        return gx, gw

    return record_op(out, (x, w), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_arr = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = _out(out_arr, a.data.dtype)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False).copy(),)

    return record_op(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.data.shape[axis]
    out_arr = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = _out(out_arr, a.data.dtype)

    def vjp(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False).copy(),)

    return record_op(out, (a,), vjp)


def cumsum_seq(x: Tensor) -> Tensor:
    """Inclusive prefix sum along the sequence axis of a [B, L, D] tensor."""
    x._require3()
    out_arr = np.cumsum(x.data, axis=1, dtype=np.float64)
    out = _out(out_arr, x.data.dtype)

    def vjp(g):
        # adjoint of prefix sum = suffix sum
        rev = np.cumsum(g[:, ::-1, :].astype(np.float64), axis=1)[:, ::-1, :]
        return (rev.astype(x.data.dtype),)

    return record_op(out, (x,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table[V, D] indexed by integer ids [B, L] -> [B, L, D]."""
    ids = np.asarray(ids)
    out = _out(table.data[ids], table.data.dtype)

    def vjp(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt.astype(table.data.dtype),)

    return record_op(out, (table,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _out(s, a.data.dtype)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        dot = (g64 * s).sum(axis=axis, keepdims=True)
        return ((s * (g64 - dot)).astype(a.data.dtype),)

    return record_op(out, (a,), vjp)


def take_along(a: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along an axis. Indices within a slice must be distinct."""
    idx = np.asarray(idx)
    out = _out(np.take_along_axis(a.data, idx, axis=axis), a.data.dtype)

    def vjp(g):
        ga = np.zeros(a.data.shape, dtype=a.data.dtype)
        np.put_along_axis(ga, idx, g, axis=axis)
        return (ga,)

    return record_op(out, (a,), vjp)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross-entropy (nats) of [B, L, V] logits vs [B, L] ids."""
    ids = np.asarray(targets)
    if ids.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {ids.shape} vs logits {logits.shape}")
    x = logits.data.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    log_probs = (x - m) - np.log(z)
    picked = np.take_along_axis(log_probs, ids[..., None], axis=-1)[..., 0]
    n = picked.size
    out = _out(-picked.sum() / n, logits.data.dtype)

    def vjp(g):
        probs = e / z
        flat = probs.reshape(-1, probs.shape[-1])
        flat[np.arange(n), ids.reshape(-1)] -= 1.0
        scale = float(np.asarray(g).reshape(-1)[0]) / n
        return ((scale * probs).astype(logits.data.dtype),)

    return record_op(out, (logits,), vjp)
