"""Benchmark harness: sweep a problem grid over strategies and summarize the timings.

Summaries come in two shapes:

* a "% of problems matched or outperformed" matrix per spatial rank (row
  strategy vs column strategy, blank diagonal), and
* an average/min/max improvement breakdown per rank for every
  (newer strategy over older strategy) pair.

A strategy "matches" another when its median is within ``MATCH_TOLERANCE`` of
the other's.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from nattn import __version__, core, fused, reference, tiled
from nattn.core import NaParams, ProblemSpec
from nattn.errors import CorrectnessGate, EmptyInput, InvalidGrid, InvalidParams
from nattn.roofline import CostModelInput, roofline

log = logging.getLogger(__name__)

PASS_KINDS = ("forward", "forward+backward")
DTYPES = {"fp32": np.float32, "fp64": np.float64}
GATE_TOLERANCE = {"fp32": 1e-4, "fp64": 1e-10}
MATCH_TOLERANCE = 0.02
WARMUP = 3
REPEATS = 10
STRATEGY_ORDER = ("naive", "tiled", "fused")


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


class Inputs(NamedTuple):
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    d_out: np.ndarray


class StrategyResult(NamedTuple):
    out: np.ndarray
    grads: tuple | None
    peak_bytes: int | None


def run_naive(x: Inputs, problem, params, pass_kind, threads=1) -> StrategyResult:
    out, _, p = reference.na_forward(x.q, x.k, x.v, problem, params)
    grads = None
    if pass_kind == "forward+backward":
        grads = reference.na_backward(x.d_out, x.q, x.k, x.v, p, out, problem, params)
    return StrategyResult(out, grads, None)


def run_tiled(x: Inputs, problem, params, pass_kind, threads=1) -> StrategyResult:
    out, _, p, ledger = tiled.tiled_forward(x.q, x.k, x.v, problem, params, threads=threads)
    grads = None
    if pass_kind == "forward+backward":
        grads = tiled.tiled_backward(x.d_out, x.q, x.k, x.v, p, out, problem, params, threads=threads)
    return StrategyResult(out, grads, ledger.peak_bytes)


def run_fused(x: Inputs, problem, params, pass_kind, threads=1) -> StrategyResult:
    out, lse, ledger = fused.fused_forward(x.q, x.k, x.v, problem, params, threads=threads)
    grads = None
    if pass_kind == "forward+backward":
        grads = fused.fused_backward_composed(x.d_out, x.q, x.k, x.v, out, lse, problem, params,
                                              threads=threads)
    return StrategyResult(out, grads, ledger.peak_bytes)


STRATEGIES: dict[str, Callable[..., StrategyResult]] = {
    "naive": run_naive,
    "tiled": run_tiled,
    "fused": run_fused,
}


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


def _per_axis(value, rank: int):
    """Broadcast a scalar to ``rank`` axes; a list applies only to problems of its own rank."""
    if isinstance(value, (list, tuple)):
        return tuple(value) if len(value) == rank else None
    return (value,) * rank


@dataclass
class GridSpec:
    extents: list[tuple[int, ...]]
    batch: list[int] = field(default_factory=lambda: [1])
    heads: list[int] = field(default_factory=lambda: [1])
    head_dims: list[int] = field(default_factory=lambda: [32])
    windows: list = field(default_factory=lambda: [3])
    dilations: list = field(default_factory=lambda: [1])
    causal: list = field(default_factory=lambda: [False])
    strategies: list[str] = field(default_factory=lambda: list(STRATEGY_ORDER))
    dtype: str = "fp32"
    passes: list[str] = field(default_factory=lambda: ["forward"])
    warmup: int = WARMUP
    repeats: int = REPEATS
    gate_fraction: float = 0.05
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidGrid(f"unknown grid fields: {sorted(unknown)}")
        if "extents" not in d:
            raise InvalidGrid("grid needs 'extents'")
        try:
            spec = cls(**{**d, "extents": [tuple(int(e) for e in ext) for ext in d["extents"]]})
        except (TypeError, ValueError) as exc:
            raise InvalidGrid(str(exc)) from exc
        spec.check()
        return spec

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "GridSpec":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidGrid(f"cannot read grid {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extents"] = [list(e) for e in self.extents]
        return d

    def check(self) -> None:
        if self.dtype not in DTYPES:
            raise InvalidGrid(f"dtype must be one of {sorted(DTYPES)}")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise InvalidGrid(f"unknown strategies {bad}; known: {sorted(STRATEGIES)}")
        bad = [p for p in self.passes if p not in PASS_KINDS]
        if bad:
            raise InvalidGrid(f"unknown pass kinds {bad}; known: {PASS_KINDS}")
        if not self.extents or not self.strategies or not self.passes:
            raise InvalidGrid("extents, strategies and passes must be non-empty")
        if self.warmup < 0 or self.repeats < 1 or not 0 < self.gate_fraction <= 1:
            raise InvalidGrid("need warmup >= 0, repeats >= 1 and 0 < gate_fraction <= 1")

    def problems(self) -> tuple[list[tuple[ProblemSpec, NaParams]], list[tuple[str, str]]]:
        """Valid ``(problem, params)`` pairs and ``(description, reason)`` for skipped ones."""
        valid, skipped, seen = [], [], set()
        for ext, b, h, d, w, dil, c in itertools.product(
            self.extents, self.batch, self.heads, self.head_dims,
            self.windows, self.dilations, self.causal,
        ):
            rank = len(ext)
            axes = [_per_axis(x, rank) for x in (w, dil, c)]
            if any(a is None for a in axes):
                continue
            problem = ProblemSpec(b, h, ext, d)
            params = NaParams.build(list(axes[0]), list(axes[1]), list(axes[2]))
            if (problem, params) in seen:
                continue
            seen.add((problem, params))
            try:
                core.validate(problem, params)
            except InvalidParams as exc:
                desc = f"extents={ext} window={axes[0]} dilation={axes[1]} causal={axes[2]}"
                skipped.append((desc, f"{type(exc).__name__}: {exc}"))
                continue
            valid.append((problem, params))
        return valid, skipped


def default_grid() -> GridSpec:
    """Desk-scale grid: 1-D up to 4096 tokens, 2-D up to 64x64, 3-D up to 16^3."""
    return GridSpec(
        extents=[(1024,), (4096,), (32, 32), (64, 64), (8, 8, 8), (16, 16, 16)],
        batch=[1], heads=[4], head_dims=[32, 64],
        windows=[3, 5, 7, 13], dilations=[1, 2, 4], causal=[False],
    )


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRecord:
    rank: int
    batch: int
    heads: int
    extents: tuple[int, ...]
    head_dim: int
    windows: tuple[int, ...]
    dilations: tuple[int, ...]
    causal: tuple[bool, ...]
    dtype: str
    strategy: str
    pass_kind: str
    median_seconds: float
    repeats: int
    peak_transient_bytes: int | None
    flops: int
    bytes: int
    intensity: float
    error: str | None = None

    @property
    def problem_id(self) -> tuple:
        return (self.batch, self.heads, self.extents, self.head_dim, self.windows,
                self.dilations, self.causal, self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("extents", "windows", "dilations", "causal"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchRecord":
        d = dict(d)
        for k in ("extents", "windows", "dilations", "causal"):
            d[k] = tuple(d[k])
        return cls(**d)


CSV_COLUMNS = (
    "rank", "batch", "heads", "extents", "head_dim", "windows", "dilations", "causal", "dtype",
    "strategy", "pass_kind", "median_seconds", "repeats", "peak_transient_bytes", "flops",
    "bytes", "intensity", "error",
)


def _csv_row(r: BenchRecord) -> list:
    def axes(t):
        return "x".join(str(int(v)) for v in t)

    return [r.rank, r.batch, r.heads, axes(r.extents), r.head_dim, axes(r.windows),
            axes(r.dilations), axes(r.causal), r.dtype, r.strategy, r.pass_kind,
            repr(r.median_seconds), r.repeats,
            "" if r.peak_transient_bytes is None else r.peak_transient_bytes,
            r.flops, r.bytes, repr(r.intensity), r.error or ""]


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def make_inputs(problem: ProblemSpec, dtype: str, seed: int) -> Inputs:
    rng = np.random.default_rng(seed)
    return Inputs(*(rng.standard_normal(problem.shape).astype(DTYPES[dtype]) for _ in range(4)))


def _max_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(1.0, float(np.abs(b).max())))


def check_problem(problem: ProblemSpec, params: NaParams, x: Inputs, strategies: dict,
                  passes: Sequence[str], dtype: str) -> None:
    """Compare every strategy against the reference; raise :class:`CorrectnessGate` on mismatch."""
    tol = GATE_TOLERANCE[dtype]
    for pass_kind in passes:
        expected = run_naive(x, problem, params, pass_kind)
        for name, fn in strategies.items():
            got = fn(x, problem, params, pass_kind)
            errs = [_max_err(got.out, expected.out)]
            if pass_kind == "forward+backward":
                errs += [_max_err(g, e) for g, e in zip(got.grads, expected.grads)]
            if max(errs) > tol:
                raise CorrectnessGate(
                    f"{name} ({pass_kind}) disagrees with reference by {max(errs):.3g} "
                    f"on extents={problem.extents} params={params}"
                )


def _time(fn: Callable[[], object], warmup: int, repeats: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _select(spec: GridSpec, strategies: dict | None) -> dict:
    registry = STRATEGIES if strategies is None else {**STRATEGIES, **strategies}
    return {name: registry[name] for name in spec.strategies}


def check_grid(spec: GridSpec, strategies: dict | None = None) -> int:
    """Correctness-only sweep over every valid problem; returns the number checked."""
    chosen = _select(spec, strategies)
    problems, skipped = spec.problems()
    for desc, reason in skipped:
        log.info("skipping %s: %s", desc, reason)
    for i, (problem, params) in enumerate(problems):
        check_problem(problem, params, make_inputs(problem, spec.dtype, spec.seed + i), chosen,
                      spec.passes, spec.dtype)
    return len(problems)


def run_grid(spec: GridSpec, *, strategies: dict | None = None, threads: int = 1,
             progress: Callable[[str], None] | None = None) -> list[BenchRecord]:
    """Gate a random subsample for correctness, then time every problem x strategy x pass."""
    chosen = _select(spec, strategies)
    problems, skipped = spec.problems()
    for desc, reason in skipped:
        log.info("skipping %s: %s", desc, reason)
    if not problems:
        return []

    rng = np.random.default_rng(spec.seed)
    n_gate = max(1, math.ceil(spec.gate_fraction * len(problems)))
    for i in sorted(rng.choice(len(problems), size=n_gate, replace=False)):
        problem, params = problems[i]
        check_problem(problem, params, make_inputs(problem, spec.dtype, spec.seed + int(i)),
                      chosen, spec.passes, spec.dtype)
    log.info("correctness gate passed on %d of %d problems", n_gate, len(problems))

    records = []
    dtype_size = np.dtype(DTYPES[spec.dtype]).itemsize
    with threadpool_limits(limits=threads):
        for i, (problem, params) in enumerate(problems):
            x = make_inputs(problem, spec.dtype, spec.seed + i)
            for name, fn in chosen.items():
                model = roofline(CostModelInput(problem, params, dtype_size, fused=name == "fused"))
                for pass_kind in spec.passes:
                    error, peak = None, None
                    try:
                        peak = fn(x, problem, params, pass_kind, threads).peak_bytes
                        median = _time(lambda: fn(x, problem, params, pass_kind, threads),
                                       spec.warmup, spec.repeats)
                    except Exception as exc:  # noqa: BLE001 - recorded, run continues
                        log.warning("%s failed on %s: %s", name, problem, exc)
                        error, median = f"{type(exc).__name__}: {exc}", math.nan
                    records.append(BenchRecord(
                        problem.rank, problem.batch, problem.heads, problem.extents,
                        problem.head_dim, params.windows, params.dilations, params.causal,
                        spec.dtype, name, pass_kind, median, spec.repeats, peak,
                        model.flops, model.bytes, model.intensity, error,
                    ))
            if progress:
                progress(f"[{i + 1}/{len(problems)}] extents={problem.extents} window={params.windows}")
    return records


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def improvement_pct(t_base: float, t_new: float) -> float:
    """Percent speedup of ``t_new`` over ``t_base``: positive when ``t_new`` is faster."""
    if t_base <= 0 or t_new <= 0:
        raise ValueError("times must be positive")
    return (t_base / t_new - 1.0) * 100.0


def _pair_name(new: str, base: str) -> str:
    return f"{new} over {base}"


@dataclass
class SummaryTables:
    """``matched[pass][rank][row][col]`` percentages and ``improvement[pass][rank][pair]`` stats."""

    strategies: list[str]
    matched: dict
    improvement: dict

    def to_dict(self) -> dict:
        def str_keys(d):
            return {p: {str(r): v for r, v in by_rank.items()} for p, by_rank in d.items()}

        return {"strategies": self.strategies, "matched": str_keys(self.matched),
                "improvement": str_keys(self.improvement)}

    @classmethod
    def from_dict(cls, d: dict) -> "SummaryTables":
        def int_keys(x):
            return {p: {int(r): v for r, v in by_rank.items()} for p, by_rank in x.items()}

        return cls(list(d["strategies"]), int_keys(d["matched"]), int_keys(d["improvement"]))


def _ordered_strategies(records: Iterable[BenchRecord]) -> list[str]:
    present = []
    for r in records:
        if r.strategy not in present:
            present.append(r.strategy)
    known = [s for s in STRATEGY_ORDER if s in present]
    return known + [s for s in present if s not in known]


def summarize(records: Sequence[BenchRecord]) -> SummaryTables:
    good = [r for r in records if r.error is None]
    if not good:
        raise EmptyInput("no successful benchmark records to summarize")
    strategies = _ordered_strategies(good)

    times: dict = {}
    for r in good:
        times.setdefault(r.pass_kind, {}).setdefault(r.rank, {}).setdefault(r.problem_id, {})[r.strategy] = r.median_seconds

    matched: dict = {}
    improvement: dict = {}
    for pass_kind in [p for p in PASS_KINDS if p in times] + [p for p in times if p not in PASS_KINDS]:
        for rank in sorted(times[pass_kind]):
            problems = list(times[pass_kind][rank].values())
            present = [s for s in strategies if any(s in t for t in problems)]
            matrix = {}
            for row in present:
                matrix[row] = {}
                for col in present:
                    if row == col:
                        matrix[row][col] = None
                        continue
                    pairs = [(t[row], t[col]) for t in problems if row in t and col in t]
                    hits = sum(1 for a, b in pairs if a <= b * (1 + MATCH_TOLERANCE))
                    matrix[row][col] = 100.0 * hits / len(pairs) if pairs else None
            matched.setdefault(pass_kind, {})[rank] = matrix

            stats = {}
            for i, base in enumerate(present):
                for new in present[i + 1:]:
                    values = [improvement_pct(t[base], t[new]) for t in problems if base in t and new in t]
                    if values:
                        stats[_pair_name(new, base)] = {
                            "average": statistics.fmean(values), "min": min(values),
                            "max": max(values), "count": len(values),
                        }
            improvement.setdefault(pass_kind, {})[rank] = stats
    return SummaryTables(strategies, matched, improvement)


def _title(name: str) -> str:
    return name[:1].upper() + name[1:]


def format_pct_cell(value: float | None) -> str:
    """Matched-or-outperformed cell, e.g. ``98.7 %``; ``-`` for blank."""
    return "-" if value is None else f"{value:.1f} %"


def format_improvement_cell(value: float | None) -> str:
    """Improvement cell rounded to a whole percent, e.g. ``548`` or ``-53``."""
    return "-" if value is None else f"{round(value):d}"


def to_markdown(tables: SummaryTables) -> str:
    lines = []
    cols = tables.strategies
    for pass_kind, by_rank in tables.matched.items():
        lines += [f"### {pass_kind} pass: % of problems matched or outperformed", ""]
        lines.append("| NA Kernel | " + " | ".join(f"**{_title(c)}**" for c in cols) + " |")
        lines.append("|---" * (len(cols) + 1) + "|")
        for rank, matrix in by_rank.items():
            lines.append(f"| *{rank}-dimensional neighborhood attention* |" + " |" * len(cols))
            for row in cols:
                if row not in matrix:
                    continue
                cells = [format_pct_cell(matrix[row].get(col)) for col in cols]
                lines.append(f"| **{_title(row)}** | " + " | ".join(cells) + " |")
        lines.append("")

    for pass_kind, by_rank in tables.improvement.items():
        pairs = []
        for stats in by_rank.values():
            pairs += [p for p in stats if p not in pairs]
        if not pairs:
            continue
        lines += [f"### {pass_kind} pass: benchmark breakdown (% improvement)", ""]
        header = ["**Dim**"]
        for p in pairs:
            header += [f"**{_title(p)}** Average", "Min", "Max"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|---" * len(header) + "|")
        for rank, stats in by_rank.items():
            cells = [f"**{rank}-D**"]
            for p in pairs:
                s = stats.get(p)
                cells += [format_improvement_cell(s and s[k]) for k in ("average", "min", "max")]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def environment(threads: int = 1, deterministic: bool = False) -> dict:
    return {
        "cpu": _cpu_model(),
        "cpu_count": os.cpu_count(),
        "threads": threads,
        "deterministic": deterministic,
        "nattn_version": __version__,
        "numpy_version": np.__version__,
        "python": platform.python_version(),
    }


def emit(tables: SummaryTables | None, records: Sequence[BenchRecord], formats: Iterable[str],
         out_dir: str | os.PathLike, meta: dict | None = None, grid: GridSpec | None = None) -> dict[str, Path]:
    """Write ``records.csv``, ``summary.md`` and/or ``results.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for fmt in formats:
        if fmt == "csv":
            path = out_dir / "records.csv"
            with open(path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(CSV_COLUMNS)
                writer.writerows(_csv_row(r) for r in records)
        elif fmt == "markdown":
            path = out_dir / "summary.md"
            path.write_text(to_markdown(tables) if tables is not None else "")
        elif fmt == "json":
            path = out_dir / "results.json"
            payload = {
                "version": 1,
                "environment": meta if meta is not None else environment(),
                "grid": grid.to_dict() if grid is not None else None,
                "records": [r.to_dict() for r in records],
                "tables": tables.to_dict() if tables is not None else None,
            }
            path.write_text(json.dumps(payload, indent=1))
        else:
            raise ValueError(f"unknown output format {fmt!r}")
        written[fmt] = path
    return written


def load_records(path: str | os.PathLike) -> list[BenchRecord]:
    """Records from a ``results.json`` dump or a bare JSON list of records."""
    with open(path) as f:
        data = json.load(f)
    rows = data["records"] if isinstance(data, dict) else data
    return [BenchRecord.from_dict(r) for r in rows]
