"""Differentiable primitives.

Every op computes its forward value with numpy and, when any operand is
tracked, records a closure mapping the output gradient to operand gradients.
Shapes must match exactly unless an op says otherwise; the only implicit
broadcast is the leading batch dimension of :func:`matmul`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

from banlab.tensor.core import DimensionError, Tensor, as_tensor, tape_of


class EmptyGroupError(ValueError):
    """A softmax normalization group had no unmasked entry."""

    def __init__(self, msg: str = "empty attention group: every entry of a normalization group is masked"):
        super().__init__(msg)


_kink_monitors: list[list[np.ndarray]] = []


@contextmanager
def kink_monitor() -> Iterator[list[np.ndarray]]:
    """Collect signed distance-to-kink arrays from every non-smooth op."""
    log: list[np.ndarray] = []
    _kink_monitors.append(log)
    try:
        yield log
    finally:
        _kink_monitors.pop()


def _note_kink(dist: np.ndarray) -> None:
    if _kink_monitors:
        _kink_monitors[-1].append(np.array(dist, dtype=np.float64))


def record_op(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out`` as a Tensor, recording ``backward`` if any input is tracked."""
    tape = tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(name, out, inputs, backward)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # reverse of numpy broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Operands are ``[..., r, s]`` and ``[..., s, t]``; leading dims must agree
    or one operand must be a plain matrix shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        da = g @ np.swapaxes(B, -1, -2)
        db = np.swapaxes(A, -1, -2) @ g
        return _sum_to(da, A.shape), _sum_to(db, B.shape)

    return record_op("matmul", out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (materialized copy)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 dims, got {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return record_op("transpose", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return record_op("reshape", out.copy(), (a,), lambda g: (g.reshape(a.shape),))


# -- elementwise ------------------------------------------------------------

def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("hadamard", a, b)
    A, B = a.data, b.data
    return record_op("hadamard", A * B, (a, b), lambda g: (g * B, g * A))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return record_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return record_op("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    """max(a, 0); the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    _note_kink(a.data)
    pos = a.data > 0
    # np.maximum is several times faster than np.where on large arrays
    return record_op("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return record_op("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive entry")
    return record_op("log", np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    _note_kink(np.stack([a.data - lo, a.data - hi]))
    inside = (a.data >= lo) & (a.data <= hi)
    return record_op("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions and broadcasts ---------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op("reduce_sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axes), 1.0 / n)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximizer."""
    a = as_tensor(a)
    ax = _norm_axes(axis, a.ndim)[0]
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), ax).squeeze(ax)
    if _kink_monitors and a.shape[ax] > 1:
        top2 = -np.sort(-a.data, axis=ax).take([0, 1], axis=ax)
        _note_kink(top2.take(0, axis=ax) - top2.take(1, axis=ax))

    def backward(g):
        da = np.zeros(a.shape)
        np.put_along_axis(da, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
        return (da,)

    return record_op("reduce_max", out, (a,), backward)


def outer_broadcast(v: Tensor, n: int) -> Tensor:
    """Replicate ``v[..., k]`` into ``[..., k, n]`` columns (``v · 1ᵀ``)."""
    v = as_tensor(v)
    if n < 1:
        raise ValueError(f"outer_broadcast needs n >= 1, got {n}")
    out = np.repeat(v.data[..., None], n, axis=-1)
    return record_op("outer_broadcast", out, (v,), lambda g: (g.sum(axis=-1),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-rule broadcast; gradients are summed back."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    return record_op("broadcast_to", out, (a,), lambda g: (_sum_to(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup, top-k selection)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = _norm_axes(axis, a.ndim)[0]
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        da = np.zeros(a.shape)
        moved = np.moveaxis(da, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (da,)

    return record_op("take", out, (a,), backward)


def take_along(a: Tensor, indices, axis: int) -> Tensor:
    """Per-row gather, ``np.take_along_axis`` semantics."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take_along_axis(a.data, idx, axis)

    def backward(g):
        da = np.zeros(a.shape)
        # indices along the axis may repeat only if the caller asks for it
        np.add.at(da, _along_index(idx, axis, a.ndim), g)
        return (da,)

    return record_op("take_along", out, (a,), backward)


def _along_index(idx: np.ndarray, axis: int, ndim: int):
    axis %= ndim
    grids = list(np.indices(idx.shape, sparse=True))
    grids[axis] = idx
    return tuple(grids)


# -- attention normalization ------------------------------------------------

def masked_softmax(logits: Tensor, mask=None, axis=-1) -> Tensor:
    """Softmax over the group spanned by ``axis``, with masked entries forced to 0.

    ``mask`` is a boolean array of the logits' shape (``True`` = keep).
    Masked logits become -inf, so their probability is exactly zero and no
    gradient reaches them.
    """
    logits = as_tensor(logits)
    axes = _norm_axes(axis, logits.ndim)
    z = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            mask = np.broadcast_to(mask, logits.shape)
        if not np.all(np.any(mask, axis=axes)):
            raise EmptyGroupError()
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axes, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axes, keepdims=True)),)

    return record_op("masked_softmax", p, (logits,), backward)


def masked_fill(a: Tensor, keep, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by the constant ``value``."""
    a = as_tensor(a)
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
    return record_op("masked_fill", np.where(keep, a.data, value), (a,), lambda g: (g * keep,))
