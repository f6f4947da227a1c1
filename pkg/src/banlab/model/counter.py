"""Pluggable counting hook: ``c = Counter(s, α̃)`` and its per-glimpse embedding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from banlab.tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    masked_fill,
    matmul,
    reduce_max,
    relu,
    take_along,
    transpose,
)

TOP_OBJECTS = 10


class CounterPlugin(Protocol):
    def __call__(self, boxes: Tensor, alpha: Tensor) -> Tensor:
        """Map boxes ``[.., 4, k]`` and object logits ``[.., k]`` to ``[.., k + 1]``."""


class ZeroCounter:
    """Stub plugin that always reports the zero vector."""

    def __call__(self, boxes: Tensor, alpha: Tensor) -> Tensor:
        alpha = as_tensor(alpha)
        return Tensor(np.zeros(alpha.shape[:-1] + (alpha.shape[-1] + 1,)))


@dataclass
class ThresholdCounter:
    """Demo plugin: one-hot of how many objects have ``sigmoid(α̃) > 0.5``."""

    threshold: float = 0.0

    def __call__(self, boxes: Tensor, alpha: Tensor) -> Tensor:
        a = as_tensor(alpha).data
        n = (a > self.threshold).sum(axis=-1)
        out = np.zeros(a.shape[:-1] + (a.shape[-1] + 1,))
        np.put_along_axis(out, n[..., None], 1.0, axis=-1)
        return Tensor(out)


class ConfigurationError(ValueError):
    pass


def column_max(logits: Tensor) -> Tensor:
    """α̃: the maximum of each column (visual channel) of the bilinear logits."""
    return reduce_max(logits, axis=-2)


def select_top(alpha: Tensor, boxes, valid=None, k: int = TOP_OBJECTS) -> tuple[Tensor, Tensor, np.ndarray]:
    """Keep the ``k`` objects with the largest α̃; ties go to the lower index.

    Padded channels are never preferred over valid ones and reach the plugin
    with ``α̃ = -inf`` and zero boxes.  With fewer than ``k`` channels the
    missing slots are filled the same way, so the plugin always sees ``k``.
    """
    alpha = as_tensor(alpha)
    boxes = np.asarray(boxes.data if isinstance(boxes, Tensor) else boxes, dtype=np.float64)
    phi = alpha.shape[-1]
    valid = np.ones(alpha.shape, dtype=bool) if valid is None else np.broadcast_to(np.asarray(valid, dtype=bool), alpha.shape)
    if phi < k:
        extra = alpha.shape[:-1] + (k - phi,)
        alpha = concat([alpha, Tensor(np.zeros(extra))], axis=-1)
        boxes = np.concatenate([boxes, np.zeros(boxes.shape[:-1] + (k - phi,))], axis=-1)
        valid = np.concatenate([valid, np.zeros(extra, dtype=bool)], axis=-1)
    if not valid.all():
        alpha = masked_fill(alpha, valid, -np.inf)
    order = np.argsort(-alpha.data, axis=-1, kind="stable")[..., :k]
    alpha_sel = take_along(alpha, order, axis=-1)
    box_idx = np.broadcast_to(order[..., None, :], order.shape[:-1] + (boxes.shape[-2], k))
    box_sel = np.take_along_axis(boxes, box_idx, axis=-1)
    keep = np.take_along_axis(valid, order, axis=-1)
    box_sel = box_sel * keep[..., None, :]
    return Tensor(box_sel), alpha_sel, order


@dataclass
class CounterEmbedding:
    """``g_i(c) = relu(Wᵀc + b)`` with ``W[k + 1, K]``; no dropout in front."""

    W: Tensor
    b: Tensor

    def __post_init__(self):
        self.W, self.b = as_tensor(self.W), as_tensor(self.b)

    @classmethod
    def zeros(cls, k: int, K: int) -> "CounterEmbedding":
        return cls(np.zeros((k + 1, K)), np.zeros(K))

    @classmethod
    def init(cls, k: int, K: int, rng: np.random.Generator) -> "CounterEmbedding":
        bound = 1.0 / np.sqrt(k + 1)
        return cls(rng.uniform(-bound, bound, (k + 1, K)), np.zeros(K))

    def __call__(self, c: Tensor) -> Tensor:
        c = as_tensor(c)
        if c.ndim == 1:
            from banlab.tensor import reshape
            h = reshape(matmul(reshape(c, (1, -1)), self.W), (self.W.shape[1],))
        else:
            h = matmul(c, self.W)
        return relu(add(h, broadcast_to(self.b, h.shape)))


def count_features(logits: Tensor, boxes, plugin: CounterPlugin, valid=None, k: int = TOP_OBJECTS) -> Tensor:
    """Run the plugin on the top-k objects ranked by column-max logits."""
    alpha = column_max(logits)
    box_sel, alpha_sel, _ = select_top(alpha, boxes, valid, k)
    return plugin(box_sel, alpha_sel)


def embed_weight_from_linear(W_out_in) -> Tensor:
    """Convert an ``[out, in]`` weight into the ``[in, out]`` layout used above."""
    return transpose(as_tensor(W_out_in))
