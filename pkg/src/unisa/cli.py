"""Command line entry point: ``unisa run|ablate|bench|oracle``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import RunConfig, default_config, parse_config
from .errors import UnisaError
from .experiment import ablation_suite, run_seeds, scaling_benchmark
from .metrics import report
from .oracles import derived_values


def _load(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    if args.seed:
        cfg = dataclasses.replace(cfg, seeds=tuple(args.seed))
    if args.shots is not None:
        if args.shots < 1:
            raise SystemExit("--shots must be >= 1")
        cfg = dataclasses.replace(cfg, split=dataclasses.replace(cfg.split, shots=args.shots))
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _violations(results) -> int:
    return sum(r.clamp_violations for runs in results.values() for r in runs)


def _print_table(results, reference=None):
    ref = None
    if reference:
        runs = results[reference]
        ref = 100 * sum(r.average for r in runs) / len(runs)
    for name, runs in results.items():
        avg = 100 * sum(r.average for r in runs) / len(runs)
        gap = f"  gap {avg - ref:+.2f}" if ref is not None and name != reference else ""
        print(f"{name:12s} avg {avg:6.2f}{gap}")


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runlog.jsonl", "w") as log:
        results = {"full": run_seeds(cfg, cfg.seeds, log)}
    report(results, out, cfg.echo())
    _print_table(results)
    bad = _violations(results)
    if bad:
        print(f"clamp invariant violated {bad} time(s)", file=sys.stderr)
    return 1 if bad else 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runlog.jsonl", "w") as log:
        results = ablation_suite(cfg, cfg.seeds, log)
    report(results, out, cfg.echo(), reference="full")
    _print_table(results, reference="full")
    bad = _violations(results)
    if bad:
        print(f"clamp invariant violated {bad} time(s)", file=sys.stderr)
    return 1 if bad else 0


def cmd_bench(args) -> int:
    cfg = _load(args)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs_base=args.epochs))
    res = scaling_benchmark(cfg, args.sizes)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = dataclasses.asdict(res)
    (out / "bench.json").write_text(json.dumps(payload, indent=2) + "\n")
    for n, t in zip(res.sizes, res.seconds):
        print(f"N={n:6d}  {t:8.3f} s")
    print(f"time = {res.slope:.3e} * N + {res.intercept:.3f}   R^2 = {res.r_squared:.4f}")
    return 0


def cmd_oracle(args) -> int:
    seed = args.seed[0] if args.seed else 0
    print(json.dumps(derived_values(seed), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file ([section] / key = value)")
    common.add_argument("--seed", type=int, action="append", help="seed; repeat for several runs")
    common.add_argument("--out", help="output directory")
    common.add_argument("--shots", type=int, help="override K in the N-way K-shot tasks")

    p = argparse.ArgumentParser(prog="unisa", description="Unsupervised few-shot continual learning on synthetic tasks.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("run", parents=[common], help="train and evaluate one configuration").set_defaults(fn=cmd_run)
    sub.add_parser("ablate", parents=[common], help="full method, single-term ablations and frozen baseline"
                   ).set_defaults(fn=cmd_ablate)
    b = sub.add_parser("bench", parents=[common], help="runtime against dataset size")
    b.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 4000, 8000])
    b.add_argument("--epochs", type=int, help="override base epochs for the benchmark")
    b.set_defaults(fn=cmd_bench)
    sub.add_parser("oracle", parents=[common], help="print reference values").set_defaults(fn=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UnisaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
