"""Mini-batch training on the synthetic task with per-epoch metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from banlab.model import BanModel, BanStackConfig, ablation_sweep, attention_entropy
from banlab.tensor import Tape
from banlab.train.loss import bce_loss
from banlab.train.optim import AdamaxState, Schedule, adamax_step, clip_gradients, lr_at
from banlab.train.synthetic import SyntheticSplit, SyntheticTask

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    clip: float = 0.25
    lr_warmup: float = 1e-3
    lr_peak: float = 4e-3
    lr_decay_start: int = 11
    lr_decay_every: int = 2
    lr_decay_factor: float = 0.25
    lr_decay_stop: int = 13
    eval_batch: int = 256

    def schedule(self) -> Schedule:
        return Schedule(self.lr_warmup, self.lr_peak, self.lr_decay_start, self.lr_decay_every,
                        self.lr_decay_factor, self.lr_decay_stop)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    accuracy: float
    loss: float
    entropy: list[float]


@dataclass
class TrainReport:
    rows: list[EpochMetrics] = field(default_factory=list)
    ablation: list[float] = field(default_factory=list)
    model: BanModel | None = None

    def final(self, split: str = "val") -> EpochMetrics:
        return [r for r in self.rows if r.split == split][-1]

    def write_csv(self, path, glimpses: int) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", "accuracy", "loss"] + [f"entropy_g{g}" for g in range(1, glimpses + 1)])
            for r in self.rows:
                ent = [repr(float(e)) for e in r.entropy] + [""] * (glimpses - len(r.entropy))
                w.writerow([r.epoch, r.split, repr(float(r.accuracy)), repr(float(r.loss))] + ent)
        return path


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def evaluate_split(model: BanModel, data: SyntheticSplit, n_answers: int, batch: int = 256):
    """Accuracy, mean BCE loss and mean per-glimpse entropy (no dropout)."""
    correct, loss_sum = 0, 0.0
    ent = np.zeros(model.config.G) if model.config.kind == "bilinear" else np.zeros(0)
    for start in range(0, len(data), batch):
        sl = slice(start, min(start + batch, len(data)))
        out = model.forward(data.tokens[sl], data.Y[sl], data.mask[sl], data.boxes[sl])
        lab = data.labels[sl]
        correct += int(np.sum(np.argmax(out.logits.data, axis=-1) == lab))
        loss_sum += bce_loss(out.logits, one_hot(lab, n_answers)).item() * len(lab)
        for g, amap in enumerate(out.maps):
            ent[g] += float(np.sum(attention_entropy(amap)))
    n = max(len(data), 1)
    return correct / n, loss_sum / n, [float(v) for v in ent / n]


def train_loop(model_cfg: BanStackConfig, task: SyntheticTask, cfg: TrainConfig | None = None,
               plugin=None) -> TrainReport:
    """Train from scratch; fully determined by ``(model_cfg, task, cfg.seed)``.

    Epoch 0 rows hold the untrained evaluation. Each step clips the global
    gradient norm, then applies Adamax at the scheduled rate.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    model = BanModel(model_cfg, seed=int(rng.integers(2**31)), plugin=plugin)
    n_ans = task.n_answers
    if model_cfg.n_answers != n_ans:
        raise ValueError(f"model predicts {model_cfg.n_answers} answers, task has {n_ans}")
    schedule = cfg.schedule()
    state = AdamaxState()
    report = TrainReport(model=model)

    def record(epoch: int):
        for split, data in (("train", task.train), ("val", task.val)):
            acc, loss, ent = evaluate_split(model, data, n_ans, cfg.eval_batch)
            report.rows.append(EpochMetrics(epoch, split, acc, loss, ent))

    record(0)
    train = task.train
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, schedule)
        order = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = Tape()
            weights = {k: tape.watch(v, k) for k, v in model.params.items()}
            out = model.forward(train.tokens[idx], train.Y[idx], train.mask[idx], train.boxes[idx],
                                weights=weights, training=True, rng=rng)
            loss = bce_loss(out.logits, one_hot(train.labels[idx], n_ans))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size}")
            tape.backward(loss)
            grads = clip_gradients({k: tape.grad(t) for k, t in weights.items()}, cfg.clip)
            model.params = adamax_step(model.params, grads, state, lr)
        record(epoch)
        last = report.rows[-1]
        log.info("epoch %d lr=%.2e val_acc=%.4f val_loss=%.4f", epoch, lr, last.accuracy, last.loss)
    if model_cfg.kind == "bilinear" and model_cfg.mode == "residual":
        report.ablation = ablation_sweep(model, task.val, cfg.eval_batch)
    return report
