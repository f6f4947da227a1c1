"""Self-contained property suite behind ``banlab verify``.

Each check group runs a handful of small randomized or hand-built cases
against an independent oracle and returns ``(passed, detail)``. Kernels are
looked up through their modules at call time so a patched kernel is caught.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from banlab import attention, embed, pooling
from banlab.tensor import (
    Tensor,
    clip,
    concat,
    grad_check,
    hadamard,
    masked_softmax,
    matmul,
    outer_broadcast,
    reduce_max,
    reduce_sum,
    relu,
    sigmoid,
    tanh,
    transpose,
)


@dataclass
class CheckResult:
    group: str
    passed: bool
    detail: str
    seconds: float


CHECKS: dict[str, Callable[[np.random.Generator], tuple[bool, str]]] = {}


def check(name: str):
    def register(fn):
        CHECKS[name] = fn
        return fn
    return register


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)))


@check("pooling_factorization")
def _pooling_factorization(rng):
    worst = 0.0
    for _ in range(50):
        N, M, c = rng.integers(2, 8, 3)
        d = int(rng.integers(1, min(N, M) + 1))
        p = pooling.LowRankPoolingParams.init(N, M, d, c, rng)
        x, y = rng.normal(size=N), rng.normal(size=M)
        got = pooling.low_rank_pool(x, y, p).data
        want = pooling.full_bilinear_oracle(x, y, pooling.explicit_weights(p))
        worst = max(worst, float(np.max(np.abs(got - want))))
    return worst <= 1e-12, f"max abs err {worst:.2e}"


@check("mfb_composition")
def _mfb(rng):
    worst = 0.0
    for _ in range(30):
        N, M, c, k = (int(v) for v in rng.integers(2, 6, 4))
        U, V = rng.normal(size=(N, k * c)), rng.normal(size=(M, k * c))
        x, y = rng.normal(size=N), rng.normal(size=M)
        got = pooling.mfb_pool(x, y, pooling.MfbParams(U, V, k)).data
        want = ((U.T @ x) * (V.T @ y)).reshape(c, k).sum(axis=1)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return worst <= 1e-12, f"max abs err {worst:.2e}"


@check("ban_oracle")
def _ban_oracle(rng):
    worst = 0.0
    for _ in range(40):
        N, M, K, rho, phi = (int(v) for v in rng.integers(2, 7, 5))
        g = attention.GlimpseParams.init(N, M, K, 1, rng)
        X, Y = rng.normal(size=(N, rho)), rng.normal(size=(M, phi))
        A = rng.dirichlet(np.ones(rho * phi)).reshape(rho, phi)
        got = attention.ban_apply(X, Y, Tensor(A), g, 0).data
        worst = max(worst, _rel(got, attention.ban_oracle(X, Y, A, g, 0)))
    return worst <= 1e-10, f"max rel err {worst:.2e}"


@check("masked_softmax")
def _masked_softmax(rng):
    logits = rng.normal(size=(3, 4, 6)) * 5
    mask = np.ones((3, 4, 6), dtype=bool)
    mask[:, :, 4:] = False
    p = masked_softmax(Tensor(logits), mask, axis=(-2, -1)).data
    zero = bool(np.all(p[:, :, 4:] == 0.0))
    total = float(np.max(np.abs(p.sum(axis=(-2, -1)) - 1.0)))
    e = np.exp(logits[:, :, :4] - logits[:, :, :4].max(axis=(-2, -1), keepdims=True))
    ref = e / e.sum(axis=(-2, -1), keepdims=True)
    err = float(np.max(np.abs(p[:, :, :4] - ref)))
    return zero and total <= 1e-12 and err <= 1e-12, f"masked mass zero={zero}, sum err {total:.1e}, ref err {err:.1e}"


@check("attention_map")
def _attention_map(rng):
    g = attention.GlimpseParams.init(5, 6, 4, 2, rng)
    X, Y = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 6, 5))
    valid = attention.ChannelMask.from_counts([5, 3], 5)
    ok, worst = True, 0.0
    for lg in attention.bilinear_logits_all(X, Y, g):
        for scope, axes in (("joint", (-2, -1)), ("row", -1)):
            amap = attention.bilinear_attention_map(lg, valid, scope)
            ok &= bool(np.all(amap.probs.data[1, :, 3:] == 0.0))
            worst = max(worst, float(np.max(np.abs(amap.probs.data.sum(axis=axes) - 1.0))))
    return ok and worst <= 1e-12, f"padding exact zero={ok}, normalization err {worst:.1e}"


def _primitive_cases(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    v = rng.normal(size=3)
    yield "matmul", lambda x, y: reduce_sum(hadamard(matmul(x, y), matmul(x, y))), [a, b]
    yield "sigmoid", lambda x: reduce_sum(sigmoid(x)), [a]
    yield "tanh", lambda x: reduce_sum(tanh(x)), [a]
    yield "relu", lambda x: reduce_sum(hadamard(relu(x), relu(x))), [a]
    yield "clip", lambda x: reduce_sum(hadamard(clip(x, -0.5, 0.5), x)), [a]
    yield "reduce_max", lambda x: reduce_sum(reduce_max(hadamard(x, x), axis=0)), [a]
    yield "transpose", lambda x: reduce_sum(hadamard(transpose(x), rng_fixed_t)), [a]
    yield "outer_broadcast", lambda x: reduce_sum(hadamard(outer_broadcast(x, 4), outer_broadcast(x, 4))), [v]
    yield "concat", lambda x, y: reduce_sum(hadamard(concat([x, y], axis=-1), concat([y, x], axis=-1))), [a, a + 1]
    yield "masked_softmax", lambda x: reduce_sum(hadamard(masked_softmax(x, fixed_mask, axis=(-2, -1)), rng_fixed)), [a]


rng_fixed = Tensor(np.linspace(-1.0, 1.0, 12).reshape(3, 4))
rng_fixed_t = Tensor(np.linspace(-1.0, 1.0, 12).reshape(4, 3))
fixed_mask = np.array([[True, True, False, True]] * 3)


@check("grad_primitives")
def _grad_primitives(rng):
    worst, bad = 0.0, []
    for name, fn, inputs in _primitive_cases(rng):
        rep = grad_check(fn, inputs)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            bad.append(name)
    return not bad, f"max rel err {worst:.1e}" + (f"; failing {bad}" if bad else "")


@check("grad_end_to_end")
def _grad_end_to_end(rng):
    from banlab.model import BanModel, BanStackConfig
    from banlab.train.loss import bce_loss

    cfg = BanStackConfig(N=4, M=5, K=4, K_att=6, C=4, G=2, E=3, vocab_size=6, n_answers=3)
    model = BanModel(cfg, seed=int(rng.integers(1000)))
    tok = rng.integers(0, 6, (2, 3))
    Y = rng.normal(size=(2, 5, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
    names = list(model.params)

    def loss(*ws):
        out = model.forward(tok, Y, mask, weights=dict(zip(names, ws)))
        return bce_loss(out.logits, np.eye(3)[[0, 2]])

    rep = grad_check(loss, [model.params[n] for n in names])
    return rep.passed, f"max rel err {rep.max_rel_err:.1e} over {len(names)} tensors"


@check("optimizer_golden")
def _optimizer(rng):
    from banlab.train.optim import AdamaxState, adamax_step, clip_gradients, lr_at

    lrs = [lr_at(e) for e in (1, 4, 11, 13)]
    sched = lrs == [1e-3, 4e-3, 1e-3, 2.5e-4]
    clipped = clip_gradients({"w": np.array([3.0, 4.0])}, 0.25)["w"]
    clip_ok = clipped.tolist() == [0.15, 0.2]
    moved = adamax_step({"w": np.zeros(1)}, {"w": np.ones(1)}, AdamaxState(), 1e-3)["w"][0]
    adam_ok = abs(moved + 1e-3) <= 1e-15
    return sched and clip_ok and adam_ok, f"schedule={sched} clip={clip_ok} adamax={adam_ok}"


@check("weight_norm")
def _weight_norm(rng):
    from banlab.train.regularize import weight_norm_apply

    v, g = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, 3)
    w1 = weight_norm_apply(v, g).data
    w2 = weight_norm_apply(10.0 * v, g).data
    norms = np.linalg.norm(w1, axis=1)
    err = max(float(np.max(np.abs(w1 - w2))), float(np.max(np.abs(norms - g))))
    rep = grad_check(lambda a, b: reduce_sum(hadamard(weight_norm_apply(a, b), rng_fixed)), [v, g])
    return err <= 1e-12 and rep.passed, f"scale invariance/norm err {err:.1e}, grad rel err {rep.max_rel_err:.1e}"


@check("bce_loss")
def _bce(rng):
    from banlab.train.loss import bce_loss

    half = bce_loss(Tensor(np.zeros((2, 3))), np.full((2, 3), 0.5)).item()
    big = bce_loss(Tensor(np.array([[40.0]])), np.array([[1.0]])).item()
    z, t = rng.normal(size=(4, 5)), rng.uniform(size=(4, 5))
    s = 1.0 / (1.0 + np.exp(-z))
    naive = float(np.mean(-(t * np.log(s) + (1 - t) * np.log(1 - s))))
    err = abs(bce_loss(Tensor(z), t).item() - naive)
    ok = abs(half - np.log(2.0)) <= 1e-15 and 0 <= big < 1e-15 and err <= 1e-10
    return ok, f"ln2 err {abs(half - np.log(2.0)):.1e}, large-logit loss {big:.1e}, naive err {err:.1e}"


@check("entropy_bounds")
def _entropy(rng):
    from banlab.model import attention_entropy

    rho, phi = 3, 5
    uni = attention_entropy(np.full((rho, phi), 1.0 / (rho * phi)))
    spike = np.zeros((rho, phi))
    spike[1, 2] = 1.0
    rand = [attention_entropy(rng.dirichlet(np.ones(rho * phi) * 0.3).reshape(rho, phi)) for _ in range(20)]
    bound = np.log(rho * phi)
    ok = abs(uni - bound) <= 1e-12 and attention_entropy(spike) == 0.0 and all(0 <= h <= bound + 1e-12 for h in rand)
    return ok, f"uniform err {abs(uni - bound):.1e}"


@check("embedding_mixer")
def _embedding(rng):
    corpus = [["a", "b", "c"], ["a", "c"], ["b", "d"]]
    assoc = embed.build_association(corpus, ["a", "b", "c", "d"])
    want = np.array([
        [0, 1 / 3, 2 / 3, 0],
        [1 / 3, 0, 1 / 3, 1 / 3],
        [2 / 3, 1 / 3, 0, 0],
        [0, 1, 0, 0],
    ])
    err = float(np.max(np.abs(assoc.matrix - want)))
    W = rng.normal(size=(4, 3))
    mixed = embed.mix_embeddings(assoc, W).data
    loop = np.array([[sum(assoc.matrix[i, k] * W[k, j] for k in range(4)) for j in range(3)] for i in range(4)])
    mix_err = float(np.max(np.abs(mixed - loop)))
    return err <= 1e-15 and mix_err <= 1e-12, f"matrix err {err:.1e}, mix err {mix_err:.1e}"


@check("counter_hook")
def _counter(rng):
    from banlab.model import CounterEmbedding, ZeroCounter, column_max, residual_step, residual_step_with_counter, select_top

    N = K = 4
    g = attention.GlimpseParams.init(N, 5, K, 1, rng)
    X, Y = rng.normal(size=(N, 3)), rng.normal(size=(5, 12))
    logits = attention.bilinear_logits(X, Y, g, 0)
    amap = attention.bilinear_attention_map(logits)
    boxes = rng.uniform(size=(4, 12))
    plain = residual_step(X, Y, amap, g, 0).data
    hooked = residual_step_with_counter(X, Y, amap, g, 0, boxes, ZeroCounter(), CounterEmbedding.zeros(10, K)).data
    same = bool(np.array_equal(plain, hooked))
    colmax = bool(np.array_equal(column_max(logits).data, logits.data.max(axis=0)))
    _, alpha_sel, order = select_top(column_max(logits), boxes)
    top = list(order) == list(np.argsort(-logits.data.max(axis=0), kind="stable")[:10])
    return same and colmax and top, f"bit-identical={same} colmax={colmax} top10={top}"


@check("checkpoint_roundtrip")
def _checkpoint(rng):
    import tempfile

    from banlab.model import load_tensors, save_tensors

    tensors = {"a": rng.normal(size=(2, 3)), "b.c": rng.normal(size=4), "s": np.array(1.5)}
    with tempfile.TemporaryDirectory() as d:
        back = load_tensors(save_tensors(d, tensors))
    ok = set(back) == set(tensors) and all(np.array_equal(back[k], tensors[k]) for k in tensors)
    return ok, "bitwise round trip" if ok else "mismatch"


@check("dropout")
def _dropout(rng):
    from banlab.train.regularize import dropout

    x = Tensor(np.ones(100_000))
    y = dropout(x, 0.2, rng, True).data
    keep = float(np.mean(y != 0))
    scaled = bool(np.allclose(y[y != 0], 1.25, rtol=0, atol=1e-15))
    ident = dropout(x, 0.5, rng, False) is x or bool(np.array_equal(dropout(x, 0.5, rng, False).data, x.data))
    ok = abs(keep - 0.8) <= 0.008 and scaled and ident
    return ok, f"keep rate {keep:.4f}"


def run_checks(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    unknown = sorted(set(only or ()) - set(CHECKS))
    if unknown:
        raise ValueError(f"unknown check group(s): {', '.join(unknown)}")
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def write_report(results: list[CheckResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "status", "seconds", "detail"])
        for r in results:
            w.writerow([r.group, "PASS" if r.passed else "FAIL", f"{r.seconds:.3f}", r.detail])
    return path
