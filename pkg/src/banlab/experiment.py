"""Experiment matrix, timing benchmark and attention export driven by the CLI."""

from __future__ import annotations

import csv
import ctypes
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from banlab import attention
from banlab.config import from_kv, read_kv, to_kv, write_kv
from banlab.model import BanModel, BanStackConfig, load_tensors, save_tensors
from banlab.tensor import Tape, reduce_sum
from banlab.train.loop import DivergenceError, TrainConfig, TrainReport, train_loop
from banlab.train.synthetic import SyntheticTask, TaskConfig, gen_synthetic

log = logging.getLogger(__name__)

# -- configuration ------------------------------------------------------------

_MODEL_FROM_TASK = ("vocab_size", "n_answers", "M", "G", "kind", "mode")


@dataclass
class RunSpec:
    """One cell of the experiment matrix."""

    kind: str
    mode: str
    glimpses: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.mode}-g{self.glimpses}-s{self.seed}"


def load_values(path=None) -> dict[str, str]:
    return read_kv(path) if path else {}


def task_config(values: Mapping[str, str]) -> TaskConfig:
    return from_kv(TaskConfig, values)


def train_config(values: Mapping[str, str], seed: int) -> TrainConfig:
    return from_kv(TrainConfig, values, seed=seed)


def model_config(values: Mapping[str, str], task: SyntheticTask, kind: str, mode: str, glimpses: int) -> BanStackConfig:
    """Model sizes from the config file; vocabulary, answers and M come from the task."""
    return from_kv(
        BanStackConfig, {k: v for k, v in values.items() if k not in _MODEL_FROM_TASK},
        vocab_size=len(task.vocab), n_answers=task.n_answers, M=task.config.M,
        G=glimpses, kind=kind, mode=mode,
    )


def expand_matrix(kinds: Sequence[str], modes: Sequence[str], glimpses: Sequence[int],
                  seeds: Sequence[int]) -> list[RunSpec]:
    """Every (kind, mode, G, seed) cell; integration modes only vary bilinear runs."""
    if not seeds:
        raise ValueError("need at least one seed")
    cells = []
    for kind in kinds:
        cell_modes = modes if kind == "bilinear" else modes[:1]
        for mode in cell_modes:
            for g in glimpses:
                for s in seeds:
                    cells.append(RunSpec(kind, mode, int(g), int(s)))
    return cells


# -- experiment -----------------------------------------------------------------

@dataclass
class RunResult:
    spec: RunSpec
    report: TrainReport | None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class SummaryRow:
    kind: str
    mode: str
    glimpses: int
    runs: int
    failed: int
    val_mean: float
    val_std: float
    train_mean: float
    val_scores: list[float] = field(default_factory=list)
    ablation_mean: list[float] = field(default_factory=list)


@dataclass
class ExperimentResult:
    runs: list[RunResult]
    summary: list[SummaryRow]
    out_dir: Path

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.runs)

    def row(self, kind: str, mode: str | None = None, glimpses: int | None = None) -> SummaryRow:
        for r in self.summary:
            if r.kind == kind and (mode is None or r.mode == mode) and (glimpses is None or r.glimpses == glimpses):
                return r
        raise KeyError((kind, mode, glimpses))


def run_cell(spec: RunSpec, values: Mapping[str, str], out_dir: Path | None = None) -> RunResult:
    tcfg = task_config(values)
    task = gen_synthetic(spec.seed, tcfg)
    mcfg = model_config(values, task, spec.kind, spec.mode, spec.glimpses)
    cfg = train_config(values, spec.seed)
    t0 = time.perf_counter()
    try:
        report = train_loop(mcfg, task, cfg)
    except DivergenceError as exc:
        log.warning("%s diverged: %s", spec.name, exc)
        return RunResult(spec, None, str(exc))
    log.info("%s val=%.4f (%.1fs)", spec.name, report.final("val").accuracy, time.perf_counter() - t0)
    if out_dir is not None:
        run_dir = out_dir / "runs" / spec.name
        report.write_csv(run_dir / "metrics.csv", mcfg.G if mcfg.kind == "bilinear" else 0)
        save_tensors(run_dir / "checkpoint", report.model.params)
        write_kv(run_dir / "config.txt", {**to_kv(tcfg), **to_kv(mcfg), **to_kv(cfg)})
    return RunResult(spec, report)


def summarize(results: Sequence[RunResult]) -> list[SummaryRow]:
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.spec.kind, r.spec.mode, r.spec.glimpses), []).append(r)
    rows = []
    for (kind, mode, g), rs in groups.items():
        good = [r.report for r in rs if r.ok]
        val = [rep.final("val").accuracy for rep in good]
        train = [rep.final("train").accuracy for rep in good]
        abl = [rep.ablation for rep in good if rep.ablation]
        rows.append(SummaryRow(
            kind, mode, g, len(rs), len(rs) - len(good),
            float(np.mean(val)) if val else float("nan"),
            float(np.std(val, ddof=1)) if len(val) > 1 else 0.0,
            float(np.mean(train)) if train else float("nan"),
            val,
            list(np.mean(abl, axis=0)) if abl else [],
        ))
    return rows


def write_summary(rows: Sequence[SummaryRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "mode", "glimpses", "runs", "failed", "val_mean", "val_std", "train_mean", "ablation_mean"])
        for r in rows:
            w.writerow([r.kind, r.mode, r.glimpses, r.runs, r.failed, f"{r.val_mean:.6f}", f"{r.val_std:.6f}",
                        f"{r.train_mean:.6f}", ";".join(f"{a:.6f}" for a in r.ablation_mean)])
    return path


def run_experiment(values: Mapping[str, str], out_dir, kinds=("bilinear",), modes=("residual",),
                   glimpses=(1,), seeds=(0,)) -> ExperimentResult:
    """Train every cell, write per-run metrics/checkpoints and ``summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = [run_cell(spec, values, out_dir) for spec in expand_matrix(kinds, modes, glimpses, seeds)]
    rows = summarize(results)
    write_summary(rows, out_dir / "summary.csv")
    return ExperimentResult(results, rows, out_dir)


def format_summary(rows: Sequence[SummaryRow]) -> str:
    lines = [f"{'kind':<9} {'mode':<9} {'G':>2} {'runs':>4}  {'val mean':>8} {'± std':>7}  ablation"]
    for r in rows:
        abl = " ".join(f"{a:.3f}" for a in r.ablation_mean)
        lines.append(f"{r.kind:<9} {r.mode:<9} {r.glimpses:>2} {r.runs:>4}  {r.val_mean:8.4f} {r.val_std:7.4f}  {abl}")
    return "\n".join(lines)


# -- benchmark --------------------------------------------------------------------

@dataclass
class BenchRow:
    kind: str
    phase: str
    phi: int
    median_s: float


_M_TRIM_THRESHOLD, _M_MMAP_THRESHOLD = -1, -3


def pin_allocator(threshold: int = 1 << 28) -> bool:
    """Keep freed buffers in the heap instead of returning them to the OS (glibc only).

    With glibc's defaults every multi-megabyte temporary is mmapped and
    unmapped per call, so timings at large φ are dominated by minor page
    faults rather than arithmetic.  Returns False where ``mallopt`` is absent.
    """
    try:
        libc = ctypes.CDLL(None)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    return bool(mallopt(_M_MMAP_THRESHOLD, threshold)) and bool(mallopt(_M_TRIM_THRESHOLD, 2 * threshold))


def _interleaved_medians(fns: Mapping[tuple, Callable[[], object]], repeats: int, warmup: int) -> dict[tuple, float]:
    """Median wall time per function, timing all functions round-robin.

    Interleaving makes slow periods of a shared machine hit every
    configuration alike instead of inflating whichever ran at the time.
    """
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    times: dict[tuple, list[float]] = {key: [] for key in fns}
    for _ in range(repeats):
        for key, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            times[key].append(time.perf_counter() - t0)
    return {key: statistics.median(ts) for key, ts in times.items()}


def _bench_fns(kind: str, phi: int, N: int, M: int, K: int, rho: int, batch: int, seed: int):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(batch, N, rho))
    Y = rng.normal(size=(batch, M, phi))
    if kind == "bilinear":
        g = attention.GlimpseParams.init(N, M, K, 1, rng)

        def fwd(tape=None):
            y = tape.watch(Y) if tape else Y
            lg = attention.bilinear_logits(X, y, g, 0)
            return attention.ban_apply(X, y, attention.bilinear_attention_map(lg), g, 0)
    else:
        p = attention.UnitaryParams.init(N, M, K, 1, rng)
        q = X[..., -1]

        def fwd(tape=None):
            y = tape.watch(Y) if tape else Y
            return attention.unitary_attention(q, y, p)[0]

    def fwd_bwd():
        tape = Tape()
        tape.backward(reduce_sum(fwd(tape)))

    return fwd, fwd_bwd


def run_bench(phis=(32, 64, 128), repeats: int = 61, warmup: int = 2, N: int = 32, M: int = 48, K: int = 32,
              rho: int = 8, batch: int = 64, seed: int = 0) -> list[BenchRow]:
    """Median wall time of one attention block per (kind, phase, φ), warmup excluded."""
    if not pin_allocator():
        log.warning("could not pin the allocator; large-φ timings may include page-fault overhead")
    fns = {}
    for phi in (int(v) for v in phis):
        for kind in ("unitary", "bilinear"):
            fwd, fwd_bwd = _bench_fns(kind, phi, N, M, K, rho, batch, seed)
            fns[(kind, "forward", phi)] = fwd
            fns[(kind, "forward_backward", phi)] = fwd_bwd
    medians = _interleaved_medians(fns, repeats, warmup)
    return [BenchRow(kind, phase, phi, t) for (kind, phase, phi), t in medians.items()]


REFERENCE_COST_RATIO = 284 / 190
COST_RATIO_LIMIT = 3.0
SCALING_LIMIT = 2.5


def bench_ratios(rows: Sequence[BenchRow]) -> dict[str, float]:
    t = {(r.kind, r.phase, r.phi): r.median_s for r in rows}
    phis = sorted({r.phi for r in rows})
    out = {}
    for phase in ("forward", "forward_backward"):
        for a, b in zip(phis, phis[1:]):
            out[f"bilinear_{phase}_{b}/{a}"] = t[("bilinear", phase, b)] / t[("bilinear", phase, a)]
        for phi in phis:
            out[f"cost_{phase}_{phi}"] = t[("bilinear", phase, phi)] / t[("unitary", phase, phi)]
    return out


def write_bench(rows: Sequence[BenchRow], ratios: Mapping[str, float], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timing = out_dir / "bench.csv"
    with timing.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "phase", "phi", "median_seconds"])
        for r in rows:
            w.writerow([r.kind, r.phase, r.phi, f"{r.median_s:.6e}"])
    ratio_path = out_dir / "bench_ratios.csv"
    with ratio_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "value", "limit", "status"])
        for name, v in ratios.items():
            limit = SCALING_LIMIT if "/" in name else COST_RATIO_LIMIT
            w.writerow([name, f"{v:.4f}", limit, "PASS" if v <= limit else "FAIL"])
        w.writerow(["reference_cost_ratio", f"{REFERENCE_COST_RATIO:.4f}", "", ""])
    return timing, ratio_path


# -- export -----------------------------------------------------------------------

def load_run(run_dir) -> tuple[BanModel, SyntheticTask, dict[str, str]]:
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.txt"
    if not cfg_path.exists():
        raise FileNotFoundError(f"no run config at {cfg_path}")
    values = read_kv(cfg_path)
    tcfg = task_config(values)
    seed = int(values.get("seed", 0))
    task = gen_synthetic(seed, tcfg)
    mcfg = from_kv(BanStackConfig, values)
    params = load_tensors(run_dir / "checkpoint")
    return BanModel(mcfg, params=params), task, values


def export_attention(run_dir, sample: int, out_dir) -> list[Path]:
    """Per-glimpse ρ×φ grids and ranked marginals for one validation sample.

    Padded visual channels are dropped, so grids cover valid channels only.
    """
    model, task, _ = load_run(run_dir)
    if model.config.kind != "bilinear":
        raise ValueError("attention grids exist for bilinear models only")
    data = task.val
    if not 0 <= sample < len(data):
        raise IndexError(f"sample {sample} outside validation split of size {len(data)}")
    sl = slice(sample, sample + 1)
    out = model.forward(data.tokens[sl], data.Y[sl], data.mask[sl], data.boxes[sl])
    phi = int(data.mask[sample].sum())
    grids = [m.probs.data[0, :, :phi] for m in out.maps]
    stem = f"sample{sample}"
    paths = attention.write_attention_csv(grids, out_dir, f"{stem}_attention")
    paths += attention.write_marginal_csv(grids, out_dir, f"{stem}_marginal")
    return paths


def with_overrides(values: Mapping[str, str], **kw) -> dict[str, str]:
    out = dict(values)
    out.update({k: str(v) for k, v in kw.items()})
    return out


__all__ = [
    "BenchRow", "ExperimentResult", "RunResult", "RunSpec", "SummaryRow", "bench_ratios", "expand_matrix",
    "export_attention", "format_summary", "load_run", "load_values", "model_config", "run_bench",
    "run_cell", "run_experiment", "summarize", "task_config", "train_config", "with_overrides", "write_bench",
    "write_summary",
]
