"""``banlab`` command line: verify, experiment, bench, export."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from banlab import experiment, verify


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _words(text: str) -> list[str]:
    vals = [x.strip() for x in text.split(",") if x.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="banlab", description="Bilinear attention over question and visual channels, on numpy.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default: str):
        p.add_argument("--config", type=Path, help="flat key=value config file")
        p.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
        p.add_argument("--seeds", type=_ints, default=[0], help="comma-separated seeds")

    p = sub.add_parser("verify", help="run the property and oracle suite")
    common(p, "out/verify")
    p.add_argument("--only", type=_words, help="restrict to these check groups")

    p = sub.add_parser("experiment", help="train the kind x mode x glimpse x seed matrix")
    common(p, "out/experiment")
    p.add_argument("--kinds", type=_words, default=["bilinear"], help="attention kinds: bilinear,unitary,co")
    p.add_argument("--modes", type=_words, default=["residual"], help="glimpse integration: residual,sum,concat")
    p.add_argument("--glimpses", type=_ints, default=[1], help="glimpse counts to sweep, e.g. 1,2,4")

    p = sub.add_parser("bench", help="time unitary vs bilinear attention across phi")
    common(p, "out/bench")
    p.add_argument("--phi", type=_ints, default=[32, 64, 128], help="visual channel counts to time")
    p.add_argument("--repeats", type=int, default=61, help="timed calls per configuration")
    p.add_argument("--warmup", type=int, default=2, help="untimed calls per configuration")

    p = sub.add_parser("export", help="write attention grids and marginals for one sample")
    common(p, "out/export")
    p.add_argument("--checkpoint", type=Path, required=True, help="run directory written by 'experiment'")
    p.add_argument("--sample", type=int, default=0, help="validation sample id")
    return ap


def cmd_verify(args) -> int:
    results = verify.run_checks(seed=args.seeds[0], only=args.only)
    report = verify.write_report(results, args.out / "verify.csv")
    width = max(len(r.group) for r in results)
    for r in results:
        print(f"{r.group:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = [r.group for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} check groups passed; report at {report}")
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
    return 1 if failed else 0


def cmd_experiment(args) -> int:
    values = experiment.load_values(args.config)
    res = experiment.run_experiment(values, args.out, args.kinds, args.modes, args.glimpses, args.seeds)
    print(experiment.format_summary(res.summary))
    for r in res.runs:
        if not r.ok:
            print(f"{r.spec.name}: {r.error}", file=sys.stderr)
    return 0 if res.ok else 1


def cmd_bench(args) -> int:
    values = experiment.load_values(args.config)
    sizes = {k: int(values[k]) for k in ("N", "M", "K", "batch") if k in values}
    rows = experiment.run_bench(args.phi, args.repeats, args.warmup, seed=args.seeds[0], **sizes)
    ratios = experiment.bench_ratios(rows)
    experiment.write_bench(rows, ratios, args.out)
    for r in rows:
        print(f"{r.kind:<9} {r.phase:<17} phi={r.phi:<4} {r.median_s * 1e3:9.3f} ms")
    ok = True
    for name, v in ratios.items():
        limit = experiment.SCALING_LIMIT if "/" in name else experiment.COST_RATIO_LIMIT
        ok &= v <= limit
        print(f"{name:<32} {v:6.3f}  (limit {limit})")
    print(f"reference bilinear/unitary cost ratio {experiment.REFERENCE_COST_RATIO:.3f}")
    return 0 if ok else 1


def cmd_export(args) -> int:
    paths = experiment.export_attention(args.checkpoint, args.sample, args.out)
    for p in paths:
        print(p)
    return 0


COMMANDS = {"verify": cmd_verify, "experiment": cmd_experiment, "bench": cmd_bench, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, IndexError) as exc:
        print(f"banlab {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
