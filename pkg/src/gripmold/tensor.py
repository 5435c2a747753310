"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records operations as they run; :func:`backward` replays the
recorded local rules in reverse order, accumulating gradients on every value.
Arrays follow a column convention: feature vectors live along axis 0 and
entities (particles, edges, batch columns) along axis 1, so a bias broadcasts
over columns and aggregation ops act on columns.

The primitive set is deliberately small: affine (general matmul with
column-broadcast bias), relu, elementwise add/sub/mul, scale by a constant,
full sum, per-column squared norm, elementwise sqrt, row concatenation,
column gather, column scatter-sum, linear combination of constant matrices,
and custom-gradient nodes for set losses.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import AggregationError, ContractError, DimensionError, NumericError

__all__ = [
    "Tape",
    "Value",
    "affine",
    "relu",
    "concat_rows",
    "concat_cols",
    "gather_cols",
    "scatter_sum",
    "lincomb",
    "custom",
    "finite_diff_check",
]


@njit(cache=True)
def _scatter_add_cols(vals, idx, out):
    # out[:, idx[e]] += vals[:, e], row-major inner loops for contiguity
    d, n_cols = vals.shape
    for r in range(d):
        vr = vals[r]
        outr = out[r]
        for e in range(n_cols):
            outr[idx[e]] += vr[e]


def _as_array(x) -> np.ndarray:
    if isinstance(x, Value):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Value:
    """A float64 array plus its gradient slot and tape bookkeeping.

    ``grad`` always matches ``data`` in shape; it is allocated lazily so that
    non-recording forward passes carry no gradient memory.
    """

    __slots__ = ("data", "_grad", "tape", "_op_index")

    def __init__(self, data: np.ndarray, tape: "Tape", op_index: int):
        self.data = data
        self._grad = None
        self.tape = tape
        self._op_index = op_index

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self._op_index})"

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Value):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def sum(self):
        return self.tape.sum(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


class Tape:
    """Ordered record of operations for one forward/backward pass.

    A tape is single-writer. With ``recording=False`` the same ops run as
    plain numpy with no history kept, which is the fast path for rollouts
    that do not need gradients.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self._backs: list[Callable[[], None]] = []
        self._values: list[Value] = []

    # -- construction -----------------------------------------------------

    def leaf(self, data) -> Value:
        """Record an input array (parameter, observation, or constant)."""
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        return self._record(arr, None)

    def _record(self, data: np.ndarray, back: Callable[[], None] | None) -> Value:
        if not self.recording:
            return Value(data, self, -1)
        if back is not None:
            self._backs.append(back)
        v = Value(data, self, len(self._backs) - 1)
        self._values.append(v)
        return v

    # -- backward ---------------------------------------------------------

    def backward(self, seed: Value) -> None:
        """Accumulate d(seed)/d(leaf) into every value's ``grad``.

        Gradients are zeroed first, so repeated calls from the same tape
        state produce bitwise-identical results.
        """
        if not self.recording:
            raise ContractError("backward on a non-recording tape")
        if seed.tape is not self:
            raise ContractError("seed belongs to a different tape")
        if seed.data.size != 1:
            raise ContractError(f"backward seed must be scalar, got shape {seed.data.shape}")
        for v in self._values:
            if v._grad is not None:
                v._grad[...] = 0.0
        seed.grad[...] = 1.0
        for fn in reversed(self._backs[: seed._op_index + 1]):
            fn()


# The op set is defined as free functions taking the tape from their Value
# arguments; Tape gains thin method aliases afterwards.


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Value):
            return x.tape
    return None


def _binary_elementwise(a, b, fwd, back_a, back_b, name):
    tape = _tape_of(a, b)
    if tape is None:
        raise ContractError(f"{name}: no Value operand")
    ad, bd = _as_array(a), _as_array(b)
    if ad.shape != bd.shape:
        raise DimensionError(f"{name}: shapes {ad.shape} vs {bd.shape}")
    data = fwd(ad, bd)
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        g = out.grad
        if isinstance(a, Value):
            a.grad += back_a(g, ad, bd)
        if isinstance(b, Value):
            b.grad += back_b(g, ad, bd)

    out = tape._record(data, back)
    return out


def _add(a, b):
    return _binary_elementwise(
        a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add"
    )


def _sub(a, b):
    return _binary_elementwise(
        a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub"
    )


def _mul(a, b):
    return _binary_elementwise(
        a, b, lambda x, y: x * y, lambda g, x, y: y * g, lambda g, x, y: x * g, "mul"
    )


def _scale(x: Value, c: float) -> Value:
    tape = x.tape
    data = x.data * c
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        x.grad += c * out.grad

    out = tape._record(data, back)
    return out


def relu(x: Value) -> Value:
    """Elementwise max(0, x); subgradient 0 at exactly x = 0."""
    tape = x.tape
    data = np.maximum(x.data, 0.0)
    if not tape.recording:
        return Value(data, tape, -1)
    mask = x.data > 0.0

    def back():
        x.grad += mask * out.grad

    out = tape._record(data, back)
    return out


def affine(W, b, x) -> Value:
    """W @ x + b with b broadcast over columns of the product.

    W is [m, n], x is [n, k], b is [m] / [m, 1] / None. Any operand may be a
    Value; gradients flow to each Value operand.
    """
    tape = _tape_of(W, b, x)
    if tape is None:
        raise ContractError("affine: no Value operand")
    Wd, xd = _as_array(W), _as_array(x)
    if Wd.ndim != 2 or xd.ndim != 2 or Wd.shape[1] != xd.shape[0]:
        raise DimensionError(f"affine: W {Wd.shape} incompatible with x {xd.shape}")
    bd = None
    if b is not None:
        bd = _as_array(b).reshape(-1, 1)
        if bd.shape[0] != Wd.shape[0]:
            raise DimensionError(f"affine: b {bd.shape} incompatible with W {Wd.shape}")
    data = Wd @ xd
    if bd is not None:
        data = data + bd
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        g = out.grad
        if isinstance(W, Value):
            W.grad += g @ xd.T
        if isinstance(x, Value):
            x.grad += Wd.T @ g
        if isinstance(b, Value):
            b.grad += g.sum(axis=1).reshape(b.data.shape)

    out = tape._record(data, back)
    return out


def _sum_all(x: Value) -> Value:
    tape = x.tape
    data = np.array([[x.data.sum()]])
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        x.grad += out.grad[0, 0]

    out = tape._record(data, back)
    return out


def sqnorm_cols(x: Value) -> Value:
    """Per-column squared euclidean norm: [d, k] -> [1, k]."""
    tape = x.tape
    data = (x.data * x.data).sum(axis=0, keepdims=True)
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        x.grad += 2.0 * x.data * out.grad

    out = tape._record(data, back)
    return out


def sqrt(x: Value) -> Value:
    """Elementwise sqrt; gradient is 0 where x == 0 (one-sided)."""
    tape = x.tape
    data = np.sqrt(x.data)
    if not tape.recording:
        return Value(data, tape, -1)
    safe = np.where(data > 0.0, data, 1.0)
    mask = data > 0.0

    def back():
        x.grad += np.where(mask, 0.5 / safe, 0.0) * out.grad

    out = tape._record(data, back)
    return out


def concat_rows(parts: Sequence) -> Value:
    """Stack feature blocks along axis 0; all parts share the column count."""
    tape = _tape_of(*parts)
    if tape is None:
        raise ContractError("concat_rows: no Value operand")
    datas = [_as_array(p) for p in parts]
    cols = {d.shape[1] for d in datas}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ: {sorted(cols)}")
    data = np.concatenate(datas, axis=0)
    if not tape.recording:
        return Value(data, tape, -1)
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])

    def back():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Value):
                p.grad += g[lo:hi]

    out = tape._record(data, back)
    return out


def concat_cols(parts: Sequence) -> Value:
    """Stack entity blocks along axis 1; all parts share the row count."""
    tape = _tape_of(*parts)
    if tape is None:
        raise ContractError("concat_cols: no Value operand")
    datas = [_as_array(p) for p in parts]
    rows = {d.shape[0] for d in datas}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ: {sorted(rows)}")
    data = np.concatenate(datas, axis=1)
    if not tape.recording:
        return Value(data, tape, -1)
    offsets = np.cumsum([0] + [d.shape[1] for d in datas])

    def back():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Value):
                p.grad += g[:, lo:hi]

    out = tape._record(data, back)
    return out


def gather_cols(x: Value, idx: np.ndarray) -> Value:
    """Select columns by index: [d, n] -> [d, len(idx)]."""
    tape = x.tape
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise AggregationError(f"gather_cols: index {bad} out of range [0, {n})")
    data = x.data[:, idx]
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        _scatter_add_cols(np.ascontiguousarray(out.grad), idx, x.grad)

    out = tape._record(data, back)
    return out


def scatter_sum(x: Value, idx: np.ndarray, size: int) -> Value:
    """Sum columns into ``size`` bins: column j of the result is the sum of
    input columns whose index equals j."""
    tape = x.tape
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.data.shape[1]:
        raise DimensionError(
            f"scatter_sum: {idx.shape[0]} indices for {x.data.shape[1]} columns"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        bad = idx[(idx < 0) | (idx >= size)][0]
        raise AggregationError(f"scatter_sum: index {bad} out of range [0, {size})")
    data = np.zeros((x.data.shape[0], size))
    _scatter_add_cols(np.ascontiguousarray(x.data), idx, data)
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        x.grad += out.grad[:, idx]

    out = tape._record(data, back)
    return out


def lincomb(mats: Sequence[np.ndarray], coefs: Sequence) -> Value:
    """Sum of constant matrices weighted by scalar Values: sum_i c_i * M_i."""
    tape = _tape_of(*coefs)
    if tape is None:
        raise ContractError("lincomb: no Value coefficient")
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if len(mats) != len(coefs):
        raise DimensionError("lincomb: mats and coefs length mismatch")
    data = np.zeros_like(mats[0])
    cvals = [float(_as_array(c).reshape(-1)[0]) for c in coefs]
    for m, c in zip(mats, cvals):
        data = data + c * m
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        g = out.grad
        for m, c in zip(mats, coefs):
            if isinstance(c, Value):
                c.grad += (m * g).sum()

    out = tape._record(data, back)
    return out


def custom(inputs: Sequence[Value], data: np.ndarray, grad_fn) -> Value:
    """Attach a node with caller-supplied backward rule.

    ``grad_fn(g)`` must return one gradient array per entry of ``inputs``
    (None to skip). Used for the assignment/nearest-neighbour losses whose
    gradients come from envelope arguments rather than the primitive chain.
    """
    tape = _tape_of(*inputs)
    if tape is None:
        raise ContractError("custom: no Value input")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 0:
        data = data.reshape(1, 1)
    if not tape.recording:
        return Value(data, tape, -1)

    def back():
        grads = grad_fn(out.grad)
        for v, g in zip(inputs, grads):
            if isinstance(v, Value) and g is not None:
                v.grad += g

    out = tape._record(data, back)
    return out


# Method aliases so call sites can stay compact.
Tape.add = staticmethod(_add)
Tape.sub = staticmethod(_sub)
Tape.mul = staticmethod(_mul)
Tape.scale = staticmethod(_scale)
Tape.sum = staticmethod(_sum_all)


def finite_diff_check(f, x0: np.ndarray, eps: float, directions: np.ndarray | None = None) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    ``f(x)`` must return ``(value, grad)`` with ``grad`` flat and analytic.
    With ``directions`` (rows are unit-ish vectors) directional derivatives
    are checked instead of single coordinates. Returns the max relative
    error |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if eps <= 0:
        raise ContractError("finite_diff_check: eps must be positive")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    _, grad = f(x0)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != x0.shape:
        raise DimensionError(f"gradient shape {grad.shape} != x0 shape {x0.shape}")
    if directions is None:
        directions = np.eye(x0.size)
    worst = 0.0
    for d in np.atleast_2d(directions):
        fp, _ = f(x0 + eps * d)
        fm, _ = f(x0 - eps * d)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("finite_diff_check: non-finite function value")
        numeric = (fp - fm) / (2.0 * eps)
        analytic = float(grad @ d)
        err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
