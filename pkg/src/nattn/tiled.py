"""Unfused strategy: neighborhood attention operators as batched, space-aware GEMMs.

Queries are tiled along their original multi-dimensional layout. Each query
tile is paired with its halo (the minimal context block its windows cover),
both are copied into contiguous scratch, multiplied as matrices, and the
``tile x halo`` product is scattered into (or gathered from) compact weights.
The compact weights themselves live in main memory, which is the structural
cost of every unfused implementation.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from nattn import core, reference
from nattn.core import AxisParams, NaParams, ProblemSpec, TileConfig
from nattn.errors import BadDilation, ShapeMismatch
from nattn.memory import AllocationLedger
from nattn.reference import CompactWeights

# (rows, cols, inner) block of the cache-blocked GEMM.
GEMM_BLOCK = (256, 256, 256)


def microkernel_gemm(a: np.ndarray, b: np.ndarray, c: np.ndarray, *, transpose_b: bool = False,
                     accumulate: bool = True, block: Sequence[int] = GEMM_BLOCK) -> np.ndarray:
    """Blocked ``c (+)= a @ b`` (or ``a @ b.T``) over the last two axes.

    Leading axes broadcast as a batch. All operands must share one dtype, which is
    also the accumulation dtype.
    """
    if transpose_b:
        b = np.swapaxes(b, -1, -2)
    if not (a.dtype == b.dtype == c.dtype):
        raise ShapeMismatch(f"gemm operands disagree on dtype: {a.dtype}, {b.dtype}, {c.dtype}")
    m, k = a.shape[-2:]
    k2, n = b.shape[-2:]
    if k != k2 or c.shape[-2:] != (m, n):
        raise ShapeMismatch(f"gemm shapes {a.shape} x {b.shape} -> {c.shape}")
    mc, nc, kc = block
    if m <= mc and n <= nc and k <= kc:
        if accumulate:
            c += np.matmul(a, b)
        else:
            np.matmul(a, b, out=c)
        return c
    if not accumulate:
        c[...] = 0
    for i in range(0, m, mc):
        for j in range(0, n, nc):
            cij = c[..., i:i + mc, j:j + nc]
            for p in range(0, k, kc):
                cij += np.matmul(a[..., i:i + mc, p:p + kc], b[..., p:p + kc, j:j + nc])
    return c


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileWorkItem:
    batch: int
    head: int
    q_range: tuple[tuple[int, int], ...]
    halo: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class _Tile:
    """A spatial tile plus its precomputed scatter table.

    For query tiles ``local[t, w]`` is the position of slot ``w`` of tile query ``t``
    inside the flattened halo, or ``halo_volume`` for an invalid slot. For context
    tiles (inverse-neighborhood) the roles swap: rows are the queries of ``halo`` and
    ``local`` points into the flattened tile, or ``volume`` when the pair falls outside.
    """

    rng: tuple[tuple[int, int], ...]
    halo: tuple[tuple[int, int], ...]
    local: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in self.rng)

    @property
    def halo_shape(self) -> tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in self.halo)

    @property
    def volume(self) -> int:
        return math.prod(self.shape)

    @property
    def halo_volume(self) -> int:
        return math.prod(self.halo_shape)

    @property
    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(lo, hi + 1) for lo, hi in self.rng)

    @property
    def halo_slices(self) -> tuple[slice, ...]:
        return tuple(slice(lo, hi + 1) for lo, hi in self.halo)


def _axis_ranges(extent: int, tile: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + tile, extent) - 1) for lo in range(0, extent, tile)]


@lru_cache(maxsize=256)
def _query_plan(extents: tuple[int, ...], axes: tuple[AxisParams, ...],
                q_tile: tuple[int, ...]) -> tuple[_Tile, ...]:
    problem = ProblemSpec(1, 1, extents, 1)
    params = NaParams(axes)
    tables = [core.axis_table(e, a) for e, a in zip(extents, axes)]
    tiles = []
    for rng in itertools.product(*(_axis_ranges(e, t) for e, t in zip(extents, q_tile))):
        halo = core.halo_range(rng, problem, params)
        per_axis = [coords[lo:hi + 1] - h_lo for (coords, _), (lo, hi), (h_lo, _) in zip(tables, rng, halo)]
        valid = [v[lo:hi + 1] for (_, v), (lo, hi) in zip(tables, rng)]
        halo_shape = [hi - lo + 1 for lo, hi in halo]
        local, ok = core.combine_axes(per_axis, valid, halo_shape)
        local = np.where(ok, local, math.prod(halo_shape))
        local.setflags(write=False)
        tiles.append(_Tile(rng, halo, local))
    return tuple(tiles)


@lru_cache(maxsize=256)
def _context_plan(extents: tuple[int, ...], axes: tuple[AxisParams, ...],
                  c_tile: tuple[int, ...]) -> tuple[_Tile, ...]:
    problem = ProblemSpec(1, 1, extents, 1)
    params = NaParams(axes)
    tables = [core.axis_table(e, a) for e, a in zip(extents, axes)]
    tiles = []
    for rng in itertools.product(*(_axis_ranges(e, t) for e, t in zip(extents, c_tile))):
        q_halo = core.inverse_halo_range(rng, problem, params)
        per_axis, valid = [], []
        for (coords, v), (lo, hi), (q_lo, q_hi) in zip(tables, rng, q_halo):
            c = coords[q_lo:q_hi + 1] - lo
            inside = v[q_lo:q_hi + 1] & (c >= 0) & (c <= hi - lo)
            per_axis.append(np.clip(c, 0, hi - lo))
            valid.append(inside)
        shape = [hi - lo + 1 for lo, hi in rng]
        local, ok = core.combine_axes(per_axis, valid, shape)
        local = np.where(ok, local, math.prod(shape))
        local.setflags(write=False)
        tiles.append(_Tile(rng, q_halo, local))
    return tuple(tiles)


def _clamp_tile(tile: Sequence[int], extents: Sequence[int]) -> tuple[int, ...]:
    return tuple(min(t, e) for t, e in zip(tile, extents))


def plan_tiles(problem: ProblemSpec, params: NaParams, cfg: TileConfig | None = None) -> list[TileWorkItem]:
    """Disjoint cover of the query space by ``cfg.q_tile`` blocks, one item per (batch, head, tile)."""
    core.validate(problem, params)
    if params.is_dilated:
        raise BadDilation("plan_tiles expects an undilated problem; partition_dilated first")
    cfg = cfg or core.default_tile_config(problem.rank)
    cfg.check(problem.rank)
    tiles = _query_plan(problem.extents, params.axes, _clamp_tile(cfg.q_tile, problem.extents))
    return [
        TileWorkItem(b, h, t.rng, t.halo)
        for b, h, t in itertools.product(range(problem.batch), range(problem.heads), tiles)
    ]


def _run(tiles: Sequence[_Tile], fn: Callable[[_Tile], None], threads: int) -> None:
    if threads <= 1 or len(tiles) <= 1:
        for tile in tiles:
            fn(tile)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(fn, tiles))


def _load(ledger: AllocationLedger, src: np.ndarray, shape, volume: int, label: str) -> np.ndarray:
    """Copy a ``[B, H, *shape, X]`` block into contiguous ``[B, H, volume, X]`` scratch."""
    b, h, x = src.shape[0], src.shape[1], src.shape[-1]
    scratch = ledger.allocate((b, h, volume, x), src.dtype, label)
    np.copyto(scratch.reshape(b, h, *shape, x), src)
    return scratch


def _prepare(problem, params, cfg):
    core.validate(problem, params)
    cfg = cfg or core.default_tile_config(problem.rank)
    cfg.check(problem.rank)
    return cfg


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def tiled_pn(a: np.ndarray, b: np.ndarray, problem: ProblemSpec, params: NaParams,
             cfg: TileConfig | None = None, *, scale: float | None = None, threads: int = 1,
             ledger: AllocationLedger | None = None) -> CompactWeights:
    """Tiled equivalent of :func:`nattn.reference.pn`."""
    cfg = _prepare(problem, params, cfg)
    core.check_tensor(a, problem, "a")
    core.check_tensor(b, problem, "b")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    ledger = ledger if ledger is not None else AllocationLedger()
    dtype = a.dtype
    scale = dtype.type(params.softmax_scale(problem.head_dim) if scale is None else scale)
    fill = reference.sentinel(dtype)
    L = params.window_volume
    out = ledger.allocate((*a.shape[:-1], L), dtype, "compact_weights")
    B, H = problem.batch, problem.heads

    for sub in core.partition_dilated(problem, params):
        av, bv, ov = sub.view(a), sub.view(b), sub.view(out)
        plan = _query_plan(sub.problem.extents, sub.params.axes, _clamp_tile(cfg.q_tile, sub.problem.extents))

        def work(t: _Tile, av=av, bv=bv, ov=ov):
            q_s = _load(ledger, av[(slice(None), slice(None), *t.slices)], t.shape, t.volume, "q_tile")
            k_s = _load(ledger, bv[(slice(None), slice(None), *t.halo_slices)], t.halo_shape,
                        t.halo_volume, "k_halo")
            s = ledger.allocate((B, H, t.volume, t.halo_volume + 1), dtype, "tile_product")
            hv = t.halo_volume
            microkernel_gemm(q_s, k_s, s[..., :hv], transpose_b=True, accumulate=False)
            s[..., :hv] *= scale
            s[..., hv] = fill
            rows = np.arange(t.volume)[:, None]
            ov[(slice(None), slice(None), *t.slices)] = s[:, :, rows, t.local].reshape(B, H, *t.shape, L)
            ledger.release(q_s, k_s, s)

        _run(plan, work, threads)
    return CompactWeights(out, np.broadcast_to(reference.slot_validity(problem, params), out.shape))


def tiled_nn(a: CompactWeights, b: np.ndarray, problem: ProblemSpec, params: NaParams,
             cfg: TileConfig | None = None, *, threads: int = 1,
             ledger: AllocationLedger | None = None) -> np.ndarray:
    """Tiled equivalent of :func:`nattn.reference.nn`."""
    cfg = _prepare(problem, params, cfg)
    reference._check_weights(a, problem, params)
    core.check_tensor(b, problem, "b")
    ledger = ledger if ledger is not None else AllocationLedger()
    dtype = b.dtype
    L = params.window_volume
    B, H, d = problem.batch, problem.heads, problem.head_dim
    out = np.empty_like(b)

    for sub in core.partition_dilated(problem, params):
        wv, bv, ov = sub.view(a.data), sub.view(b), sub.view(out)
        plan = _query_plan(sub.problem.extents, sub.params.axes, _clamp_tile(cfg.q_tile, sub.problem.extents))

        def work(t: _Tile, wv=wv, bv=bv, ov=ov):
            hv = t.halo_volume
            dense = ledger.allocate((B, H, t.volume, hv + 1), dtype, "dense_weights", zero=True)
            rows = np.arange(t.volume)[:, None]
            dense[:, :, rows, t.local] = wv[(slice(None), slice(None), *t.slices)].reshape(B, H, t.volume, L)
            v_s = _load(ledger, bv[(slice(None), slice(None), *t.halo_slices)], t.halo_shape, hv, "v_halo")
            o_s = ledger.allocate((B, H, t.volume, d), dtype, "out_tile")
            microkernel_gemm(dense[..., :hv], v_s, o_s, accumulate=False)
            ov[(slice(None), slice(None), *t.slices)] = o_s.reshape(B, H, *t.shape, d)
            ledger.release(dense, v_s, o_s)

        _run(plan, work, threads)
    return out


def tiled_in(a: CompactWeights, b: np.ndarray, problem: ProblemSpec, params: NaParams,
             cfg: TileConfig | None = None, *, threads: int = 1,
             ledger: AllocationLedger | None = None) -> np.ndarray:
    """Tiled equivalent of :func:`nattn.reference.in_`, tiling over context coordinates.

    Every output tile has a single writer, so no atomics or reductions across tiles.
    """
    cfg = _prepare(problem, params, cfg)
    reference._check_weights(a, problem, params)
    core.check_tensor(b, problem, "b")
    ledger = ledger if ledger is not None else AllocationLedger()
    dtype = b.dtype
    L = params.window_volume
    B, H, d = problem.batch, problem.heads, problem.head_dim
    out = np.empty_like(b)

    for sub in core.partition_dilated(problem, params):
        wv, bv, ov = sub.view(a.data), sub.view(b), sub.view(out)
        plan = _context_plan(sub.problem.extents, sub.params.axes, _clamp_tile(cfg.q_tile, sub.problem.extents))

        def work(t: _Tile, wv=wv, bv=bv, ov=ov):
            qv = t.halo_volume
            dense = ledger.allocate((B, H, t.volume + 1, qv), dtype, "dense_weights_t", zero=True)
            cols = np.arange(qv)[:, None]
            dense[:, :, t.local, cols] = wv[(slice(None), slice(None), *t.halo_slices)].reshape(B, H, qv, L)
            b_s = _load(ledger, bv[(slice(None), slice(None), *t.halo_slices)], t.halo_shape, qv, "b_halo")
            o_s = ledger.allocate((B, H, t.volume, d), dtype, "out_tile")
            microkernel_gemm(dense[:, :, :t.volume], b_s, o_s, accumulate=False)
            ov[(slice(None), slice(None), *t.slices)] = o_s.reshape(B, H, *t.shape, d)
            ledger.release(dense, b_s, o_s)

        _run(plan, work, threads)
    return out


# ---------------------------------------------------------------------------
# Forward / backward compositions
# ---------------------------------------------------------------------------


def tiled_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, problem: ProblemSpec,
                  params: NaParams, cfg: TileConfig | None = None, *, threads: int = 1):
    """``(out, lse, P, ledger)``; the compact weights round-trip through main memory."""
    ledger = AllocationLedger()
    core.check_tensor(v, problem, "v")
    logits = tiled_pn(q, k, problem, params, cfg, threads=threads, ledger=ledger)
    p, lse = reference.masked_softmax(logits)
    ledger.release(logits.data)
    ledger.record(p.data, "softmax_weights")
    out = tiled_nn(p, v, problem, params, cfg, threads=threads, ledger=ledger)
    return out, lse, p, ledger


def tiled_backward(d_out, q, k, v, p: CompactWeights, out, problem: ProblemSpec,
                   params: NaParams, cfg: TileConfig | None = None, *, threads: int = 1):
    """``(dq, dk, dv)`` with every operator routed through the tiled path."""
    scale = q.dtype.type(params.softmax_scale(problem.head_dim))
    d_p = tiled_pn(d_out, v, problem, params, cfg, scale=1.0, threads=threads)
    d_a = reference.softmax_backward(p, d_p, d_out, out)
    dq = scale * tiled_nn(d_a, k, problem, params, cfg, threads=threads)
    dk = scale * tiled_in(d_a, q, problem, params, cfg, threads=threads)
    dv = tiled_in(p, d_out, problem, params, cfg, threads=threads)
    return dq, dk, dv
