"""Tile-shape auto-tuner with a per-process cache and optional JSON persistence.

On a cache miss every candidate tile shape is timed (warmup runs, then the
median of repeated runs) and the fastest is cached. Candidates are the
factorizations of a base row-tile volume across the spatial axes.

Cache file format::

    {"version": 1,
     "entries": [{"strategy": ..., "batch": ..., "heads": ..., "extents": [...],
                  "head_dim": ..., "window": [...], "dilation": [...], "causal": [...],
                  "dtype": "fp32", "tile": [...], "kv_tile": [...], "measured_s": 0.0012}]}

Saving merges with whatever is already on disk, last writer wins per key.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from nattn import core, fused, tiled
from nattn.core import AxisParams, NaParams, ProblemSpec, TileConfig
from nattn.errors import NoCandidates

log = logging.getLogger(__name__)

CACHE_VERSION = 1
CACHE_ENV = "NATTN_TUNE_CACHE"
BASE_VOLUME = 64
THOROUGH_VOLUMES = (32, 128)
WARMUP = 2
REPEATS = 5
STRATEGY_KINDS = ("tiled-pn", "tiled-nn", "tiled-in", "fused")
DTYPE_NAMES = {"fp32": np.float32, "fp64": np.float64}


def dtype_name(dtype) -> str:
    return {np.dtype(np.float32): "fp32", np.dtype(np.float64): "fp64"}[np.dtype(dtype)]


@dataclass(frozen=True)
class ProblemKey:
    strategy: str
    batch: int
    heads: int
    extents: tuple[int, ...]
    head_dim: int
    windows: tuple[int, ...]
    dilations: tuple[int, ...]
    causal: tuple[bool, ...]
    dtype: str

    @classmethod
    def make(cls, strategy: str, problem: ProblemSpec, params: NaParams, dtype) -> "ProblemKey":
        if strategy not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {strategy!r}")
        return cls(strategy, problem.batch, problem.heads, problem.extents, problem.head_dim,
                   params.windows, params.dilations, params.causal,
                   dtype if isinstance(dtype, str) else dtype_name(dtype))

    @property
    def problem(self) -> ProblemSpec:
        return ProblemSpec(self.batch, self.heads, self.extents, self.head_dim)

    @property
    def params(self) -> NaParams:
        return NaParams(tuple(AxisParams(w, d, c) for w, d, c in zip(self.windows, self.dilations, self.causal)))

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy, "batch": self.batch, "heads": self.heads,
            "extents": list(self.extents), "head_dim": self.head_dim,
            "window": list(self.windows), "dilation": list(self.dilations),
            "causal": list(self.causal), "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemKey":
        return cls(d["strategy"], int(d["batch"]), int(d["heads"]), tuple(d["extents"]),
                   int(d["head_dim"]), tuple(d["window"]), tuple(d["dilation"]),
                   tuple(bool(c) for c in d["causal"]), d["dtype"])


def default_cache_path() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "nattn" / "tune_cache.json"


class TuneCache:
    """Thread-safe map from :class:`ProblemKey` to ``(TileConfig, measured seconds)``.

    Entries are immutable: the first write for a key wins and later writes are
    discarded. ``benchmark_runs`` counts every timed candidate execution.
    """

    def __init__(self, entries: dict | None = None):
        self._entries: dict[ProblemKey, tuple[TileConfig, float | None]] = dict(entries or {})
        self._lock = threading.Lock()
        self.benchmark_runs = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def get(self, key: ProblemKey):
        with self._lock:
            return self._entries.get(key)

    def put(self, key: ProblemKey, cfg: TileConfig, seconds: float | None):
        """Publish a result; returns whichever entry ends up cached for ``key``."""
        with self._lock:
            return self._entries.setdefault(key, (cfg, seconds))

    def items(self):
        with self._lock:
            return list(self._entries.items())

    def count_run(self, n: int = 1) -> None:
        with self._lock:
            self.benchmark_runs += n

    # -- persistence -------------------------------------------------------

    def to_json(self) -> dict:
        entries = []
        for key, (cfg, seconds) in self.items():
            entry = key.to_dict()
            entry["tile"] = list(cfg.q_tile)
            entry["kv_tile"] = list(cfg.kv)
            entry["measured_s"] = seconds
            entries.append(entry)
        return {"version": CACHE_VERSION, "entries": entries}

    @staticmethod
    def _parse(data: dict) -> dict:
        if data.get("version") != CACHE_VERSION:
            raise ValueError(f"unsupported tune cache version {data.get('version')!r}")
        out = {}
        for entry in data["entries"]:
            cfg = TileConfig(tuple(entry["tile"]), tuple(entry.get("kv_tile") or entry["tile"]))
            out[ProblemKey.from_dict(entry)] = (cfg, entry.get("measured_s"))
        return out

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "TuneCache":
        path = Path(path) if path is not None else default_cache_path()
        if not path.exists():
            return cls()
        with open(path) as f:
            return cls(cls._parse(json.load(f)))

    def save(self, path: str | os.PathLike | None = None) -> Path:
        """Merge into the file at ``path`` (entries from this cache win) and write atomically."""
        path = Path(path) if path is not None else default_cache_path()
        merged = {}
        if path.exists():
            with open(path) as f:
                merged = self._parse(json.load(f))
        merged.update(dict(self.items()))
        data = TuneCache(merged).to_json()
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            json.dump(data, f, indent=1)
        os.replace(tmp, path)
        return path


def _squareness(tile: Sequence[int]):
    return (max(tile) / min(tile), tuple(tile))


def candidate_configs(problem: ProblemSpec, params: NaParams, thorough: bool = False) -> list[TileConfig]:
    """Factorizations of the base row-tile volume that fit the problem, squarest first.

    Extents are those of the largest residue class, since tiles are laid over the
    undilated sub-problems.
    """
    extents = [-(-e // d) for e, d in zip(problem.extents, params.dilations)]
    volumes = (BASE_VOLUME, *THOROUGH_VOLUMES) if thorough else (BASE_VOLUME,)
    seen, out = set(), []
    for volume in volumes:
        fits = [f for f in core.factorizations(volume, problem.rank)
                if all(t <= e for t, e in zip(f, extents))]
        for f in sorted(fits, key=_squareness):
            if f not in seen:
                seen.add(f)
                out.append(TileConfig(f, f))
    if not out:
        base = core.squarest_factorization(BASE_VOLUME, problem.rank)
        clamped = tuple(min(t, e) for t, e in zip(base, extents))
        out.append(TileConfig(clamped, clamped))
    return out


def make_runner(key: ProblemKey, inputs: Sequence) -> Callable[[TileConfig], None]:
    """A callable executing ``key.strategy`` on ``inputs`` with a given tile config."""
    problem, params = key.problem, key.params
    if key.strategy == "fused":
        q, k, v = inputs
        return lambda cfg: fused.fused_forward(q, k, v, problem, params, cfg)
    a, b = inputs
    op = {"tiled-pn": tiled.tiled_pn, "tiled-nn": tiled.tiled_nn, "tiled-in": tiled.tiled_in}[key.strategy]
    return lambda cfg: op(a, b, problem, params, cfg)


def wall_clock(run: Callable[[TileConfig], None]) -> Callable[[TileConfig], float]:
    def measure(cfg: TileConfig) -> float:
        t0 = time.perf_counter()
        run(cfg)
        return time.perf_counter() - t0
    return measure


def tune(key: ProblemKey, inputs: Sequence | None, cache: TuneCache, *, thorough: bool = False,
         measure: Callable[[TileConfig], float] | None = None, warmup: int = WARMUP,
         repeats: int = REPEATS) -> TileConfig:
    """Return the cached tile config for ``key``, benchmarking the candidates on a miss.

    ``measure(cfg)`` times one execution and returns seconds; by default it runs the
    strategy on ``inputs`` under a wall-clock timer. Ties go to the earlier candidate.
    """
    hit = cache.get(key)
    if hit is not None:
        return hit[0]
    candidates = candidate_configs(key.problem, key.params, thorough)
    if not candidates:
        raise NoCandidates(f"no tile candidates for {key}")
    if len(candidates) == 1:
        return cache.put(key, candidates[0], None)[0]
    if measure is None:
        measure = wall_clock(make_runner(key, inputs))

    best, best_time = None, None
    for cfg in candidates:
        for _ in range(warmup):
            measure(cfg)
        samples = [measure(cfg) for _ in range(repeats)]
        cache.count_run(warmup + repeats)
        median = statistics.median(samples)
        log.debug("tune %s %s: %.3g s", key.strategy, cfg.q_tile, median)
        if best_time is None or median < best_time:
            best, best_time = cfg, median
    return cache.put(key, best, best_time)[0]
