"""Weight normalization and inverted dropout as differentiable ops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from banlab.tensor import Tensor, as_tensor, hadamard, record_op


@dataclass
class WeightNormParam:
    v: np.ndarray  # out x in direction
    g: np.ndarray  # per-output gain

    @classmethod
    def from_weight(cls, w: np.ndarray) -> "WeightNormParam":
        w = np.asarray(w, dtype=np.float64)
        return cls(w.copy(), np.linalg.norm(w, axis=1))


def weight_norm_apply(v, g) -> Tensor:
    """Row-wise ``w = g * v / ||v||``; differentiable in both ``v`` and ``g``."""
    if isinstance(v, WeightNormParam):
        v, g = v.v, v.g
    v, g = as_tensor(v), as_tensor(g)
    V, Gn = v.data, g.data
    if V.ndim != 2 or Gn.shape != (V.shape[0],):
        raise ValueError(f"weight norm needs v[out, in] and g[out], got {V.shape}, {Gn.shape}")
    norms = np.sqrt(np.sum(V * V, axis=1))
    if np.any(norms == 0):
        raise ValueError("weight norm direction has a zero-norm row")
    scale = Gn / norms
    w = V * scale[:, None]

    def backward(G):
        dot = np.sum(G * V, axis=1)
        dg = dot / norms
        dv = scale[:, None] * (G - (dot / norms**2)[:, None] * V)
        return dv, dg

    return record_op("weight_norm", w, (v, g), backward)


def dropout(t: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    t = as_tensor(t)
    if not training or p == 0:
        return t
    keep = rng.random(t.shape) >= p
    return hadamard(t, Tensor._wrap(keep / (1.0 - p)))
