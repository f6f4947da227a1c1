"""Central-difference gradient checking against tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from banlab.tensor.core import Tape, TapeError, Tensor
from banlab.tensor.ops import kink_monitor


@dataclass
class InputReport:
    shape: tuple[int, ...]
    max_rel_err: float
    checked: int
    excluded: list[tuple[int, ...]] = field(default_factory=list)
    failures: list[tuple[int, ...]] = field(default_factory=list)


@dataclass
class GradCheckReport:
    inputs: list[InputReport]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return all(not r.failures for r in self.inputs)

    def __str__(self) -> str:
        lines = [f"grad_check tol={self.tolerance:g} passed={self.passed}"]
        for i, r in enumerate(self.inputs):
            lines.append(
                f"  input {i} {r.shape}: max_rel_err={r.max_rel_err:.3e} "
                f"checked={r.checked} excluded={len(r.excluded)} failed={len(r.failures)}"
            )
        return "\n".join(lines)


def rel_err(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise TapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    return out.item()


def _crosses_kink(base: list[np.ndarray], moved: list[np.ndarray], kink_tol: float) -> bool:
    if len(base) != len(moved):
        return True
    for b, m in zip(base, moved):
        if b.shape != m.shape:
            return True
        changed = b != m
        if not changed.any():
            continue
        if np.any(np.sign(b[changed]) != np.sign(m[changed])):
            return True
        if np.any(np.abs(b[changed]) < kink_tol):
            return True
    return False


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    h: float = 1e-5,
    tol: float = 1e-4,
    kink_tol: float = 1e-4,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    Coordinates whose perturbation moves a ReLU/clip/max input that sits
    within ``kink_tol`` of its kink, or flips its branch, are excluded.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]

    tape = Tape()
    leaves = [tape.watch(a) for a in arrays]
    out = fn(*leaves)
    _scalar(out)
    tape.backward(out)
    analytic = [tape.grad(t) for t in leaves]

    def evaluate(args: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
        with kink_monitor() as log:
            val = _scalar(fn(*[Tensor(a) for a in args]))
        return val, log

    _, base_kinks = evaluate(arrays)

    reports = []
    for i, arr in enumerate(arrays):
        rep = InputReport(arr.shape, 0.0, 0)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp, kp = evaluate(arrays)
            arr[idx] = orig - h
            fm, km = evaluate(arrays)
            arr[idx] = orig
            if _crosses_kink(base_kinks, kp, kink_tol) or _crosses_kink(base_kinks, km, kink_tol):
                rep.excluded.append(idx)
                continue
            numeric = (fp - fm) / (2 * h)
            err = rel_err(float(analytic[i][idx]), numeric, floor)
            rep.checked += 1
            rep.max_rel_err = max(rep.max_rel_err, err)
            if err > tol:
                rep.failures.append(idx)
        reports.append(rep)
    return GradCheckReport(reports, tol)
