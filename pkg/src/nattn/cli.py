"""``nattn`` command line: benchmark, summarize, tune and correctness-check problem grids.

Exit codes: 0 success, 1 correctness-gate failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from nattn import autotune, bench
from nattn.errors import CorrectnessGate, EmptyInput, InvalidGrid, InvalidParams

EXIT_OK, EXIT_GATE, EXIT_CONFIG = 0, 1, 2


def _formats(value: str) -> list[str]:
    formats = [f.strip() for f in value.split(",") if f.strip()]
    bad = [f for f in formats if f not in ("csv", "markdown", "json")]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown format(s): {', '.join(bad)}")
    return formats


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    bench_p = sub.add_parser("bench", help="run or summarize benchmarks")
    bench_sub = bench_p.add_subparsers(dest="bench_command", required=True)
    run = bench_sub.add_parser("run", help="time every problem in a grid")
    run.add_argument("--grid", required=True, help="grid JSON file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--format", type=_formats, default=["csv", "markdown", "json"],
                     help="comma-separated subset of csv,markdown,json")
    run.add_argument("--deterministic", action="store_true",
                     help="pin BLAS and strategy threads to 1")
    run.add_argument("--threads", type=int, default=1)

    summ = bench_sub.add_parser("summarize", help="rebuild summary tables from results.json")
    summ.add_argument("--in", dest="inp", required=True)
    summ.add_argument("--format", choices=("markdown", "json"), default="markdown")

    tune = sub.add_parser("tune", help="auto-tune tile shapes for every problem in a grid")
    tune.add_argument("--grid", required=True)
    tune.add_argument("--thorough", action="store_true")
    tune.add_argument("--cache", help="cache file (default: $NATTN_TUNE_CACHE or ~/.cache/nattn)")

    check = sub.add_parser("check", help="correctness-only sweep of a grid")
    check.add_argument("--grid", required=True)
    return parser


def _bench_run(args) -> int:
    spec = bench.GridSpec.from_json(args.grid)
    threads = 1 if args.deterministic else max(1, args.threads)
    records = bench.run_grid(spec, threads=threads, progress=logging.getLogger("nattn").info)
    tables = bench.summarize(records) if any(r.error is None for r in records) else None
    meta = bench.environment(threads, args.deterministic)
    paths = bench.emit(tables, records, args.format, args.out, meta, spec)
    for fmt, path in paths.items():
        print(f"{fmt}: {path}")
    if tables is not None:
        print(bench.to_markdown(tables))
    return EXIT_OK


def _bench_summarize(args) -> int:
    tables = bench.summarize(bench.load_records(args.inp))
    if args.format == "json":
        print(json.dumps(tables.to_dict(), indent=1))
    else:
        print(bench.to_markdown(tables))
    return EXIT_OK


def _tune(args) -> int:
    spec = bench.GridSpec.from_json(args.grid)
    cache = autotune.TuneCache.load(args.cache)
    problems, _ = spec.problems()
    for i, (problem, params) in enumerate(problems):
        x = bench.make_inputs(problem, spec.dtype, spec.seed + i)
        key = autotune.ProblemKey.make("fused", problem, params, spec.dtype)
        cfg = autotune.tune(key, (x.q, x.k, x.v), cache, thorough=args.thorough)
        print(f"extents={problem.extents} window={params.windows} dilation={params.dilations} "
              f"causal={params.causal} -> q_tile={cfg.q_tile} kv_tile={cfg.kv}")
    path = cache.save(args.cache)
    print(f"cache: {path}")
    return EXIT_OK


def _check(args) -> int:
    spec = bench.GridSpec.from_json(args.grid)
    n = bench.check_grid(spec)
    print(f"{n} problems agree with the reference across {', '.join(spec.strategies)}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        if args.command == "bench":
            return _bench_run(args) if args.bench_command == "run" else _bench_summarize(args)
        if args.command == "tune":
            return _tune(args)
        return _check(args)
    except CorrectnessGate as exc:
        print(f"correctness gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (InvalidGrid, InvalidParams, EmptyInput, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
