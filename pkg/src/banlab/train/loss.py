from __future__ import annotations

import numpy as np

from banlab.tensor import DimensionError, Tensor, as_tensor, record_op


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy on logits, in the overflow-free form

    max(z, 0) - z*t + log(1 + exp(-|z|)).
    """
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {t.shape}")
    if np.any((t < 0) | (t > 1)):
        raise ValueError("bce targets must lie in [0, 1]")
    z = logits.data
    n = z.size
    val = np.sum(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))) / n
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record_op("bce", np.asarray(val), (logits,), lambda g: (g * (sig - t) / n,))
