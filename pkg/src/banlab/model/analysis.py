"""Evaluation probes: accuracy, first-n-glimpse ablation, attention entropy, grounding loss."""

from __future__ import annotations

import numpy as np

from banlab.attention import AttentionMap
from banlab.tensor import Tensor, as_tensor, clip, hadamard, log, reduce_sum, scale, sub


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predict(model, data, n_glimpses: int | None = None, batch_size: int = 256) -> np.ndarray:
    preds = []
    for sl in _batches(len(data), batch_size):
        out = model.forward(data.tokens[sl], data.Y[sl], data.mask[sl], data.boxes[sl], n_glimpses=n_glimpses)
        preds.append(np.argmax(out.logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def evaluate(model, data, batch_size: int = 256) -> float:
    """Top-1 accuracy against the single ground-truth answer."""
    return float(np.mean(predict(model, data, None, batch_size) == data.labels))


def ablate_eval(model, data, n: int, batch_size: int = 256) -> float:
    """Accuracy when only the first ``n`` residual glimpses feed the classifier."""
    cfg = model.config
    if cfg.kind != "bilinear" or cfg.mode != "residual":
        raise ValueError("ablation needs a residual bilinear model")
    if not 1 <= n <= cfg.G:
        raise ValueError(f"n must lie in 1..{cfg.G}, got {n}")
    return float(np.mean(predict(model, data, n, batch_size) == data.labels))


def ablation_sweep(model, data, batch_size: int = 256) -> list[float]:
    return [ablate_eval(model, data, n, batch_size) for n in range(1, model.config.G + 1)]


def attention_entropy(A) -> float | np.ndarray:
    """Entropy in nats over all cells of a map, with 0·log 0 = 0.

    Batched maps ``[B, ρ, φ]`` give one value per sample.
    """
    p = A.probs.data if isinstance(A, AttentionMap) else np.asarray(as_tensor(A).data)
    terms = np.zeros_like(p)
    pos = p > 0
    terms[pos] = -p[pos] * np.log(p[pos])
    h = terms.sum(axis=(-2, -1))
    return float(h) if np.ndim(h) == 0 else h


def mean_entropies(model, data, batch_size: int = 256) -> list[float]:
    """Mean per-glimpse attention entropy over a dataset (bilinear models)."""
    if model.config.kind != "bilinear":
        return []
    sums = np.zeros(model.config.G)
    for sl in _batches(len(data), batch_size):
        out = model.forward(data.tokens[sl], data.Y[sl], data.mask[sl], data.boxes[sl])
        for g, amap in enumerate(out.maps):
            sums[g] += float(np.sum(attention_entropy(amap)))
    return [float(v) for v in sums / max(len(data), 1)]


PROB_FLOOR = 1e-7


def phrase_localization_loss(A, targets, valid=None) -> Tensor:
    """Binary cross entropy between attention probabilities and a 0/1 target grid.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; the mean runs over
    valid cells only (``valid`` defaults to every cell).
    """
    probs = A.probs if isinstance(A, AttentionMap) else as_tensor(A)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise ValueError(f"targets {t.shape} do not match map {probs.shape}")
    w = np.ones(t.shape) if valid is None else np.broadcast_to(np.asarray(valid, dtype=np.float64), t.shape)
    count = float(w.sum())
    if count == 0:
        raise ValueError("no valid cells to score")
    p = clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ones = Tensor(np.ones(t.shape))
    ll = hadamard(Tensor(t), log(p)) + hadamard(Tensor(1.0 - t), log(sub(ones, p)))
    return scale(reduce_sum(hadamard(ll, Tensor(w))), -1.0 / count)
