"""Problem/parameter types and the coordinate algebra of neighborhood attention.

Every execution strategy (reference, tiled, fused) consults this module for
window placement, halos and dilation partitioning, so the three agree by
construction on *which* pairs interact and only differ in *how* they compute.

Conventions
-----------
Token tensors use the layout ``[batch, heads, *extents, dim]``. A coordinate
is a tuple with one integer per spatial axis. Non-causal windows are centered
on the query when possible and shift inward at the boundaries so every query
keeps a full window; causal windows end at the query and are never shifted.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from nattn.errors import (
    BadDilation,
    BadWindow,
    EvenWindowNonCausal,
    InvalidParams,
    InvalidProblem,
    NonFiniteInput,
    RankMismatch,
    ShapeMismatch,
    TileConfigInvalid,
    WindowExceedsExtent,
)

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
MAX_RANK = 3
DEFAULT_TILE_VOLUME = 64


@dataclass(frozen=True)
class ProblemSpec:
    batch: int
    heads: int
    extents: tuple[int, ...]
    head_dim: int

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))

    @property
    def rank(self) -> int:
        return len(self.extents)

    @property
    def num_tokens(self) -> int:
        return math.prod(self.extents)

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of a Q/K/V/output tensor for this problem."""
        return (self.batch, self.heads, *self.extents, self.head_dim)

    @classmethod
    def from_shape(cls, shape: Sequence[int]) -> "ProblemSpec":
        if len(shape) < 4:
            raise ShapeMismatch(f"expected [batch, heads, *spatial, dim], got shape {tuple(shape)}")
        return cls(shape[0], shape[1], tuple(shape[2:-1]), shape[-1])


@dataclass(frozen=True)
class AxisParams:
    window: int
    dilation: int = 1
    causal: bool = False


@dataclass(frozen=True)
class NaParams:
    """Per-axis neighborhood parameters plus the softmax scale.

    ``scale=None`` means ``1/sqrt(head_dim)``; use :meth:`softmax_scale` to
    resolve it against a problem.
    """

    axes: tuple[AxisParams, ...]
    scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))

    @classmethod
    def build(cls, window, dilation=1, causal=False, *, rank: int | None = None,
              scale: float | None = None) -> "NaParams":
        """Build from scalars (broadcast to ``rank`` axes) or per-axis sequences."""
        seqs = [x for x in (window, dilation, causal) if isinstance(x, (list, tuple))]
        if rank is None:
            rank = len(seqs[0]) if seqs else 1

        def per_axis(x):
            if isinstance(x, (list, tuple)):
                if len(x) != rank:
                    raise RankMismatch(f"expected {rank} per-axis values, got {len(x)}")
                return tuple(x)
            return (x,) * rank

        axes = tuple(
            AxisParams(int(w), int(d), bool(c))
            for w, d, c in zip(per_axis(window), per_axis(dilation), per_axis(causal))
        )
        return cls(axes, scale)

    @property
    def rank(self) -> int:
        return len(self.axes)

    @property
    def windows(self) -> tuple[int, ...]:
        return tuple(a.window for a in self.axes)

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(a.dilation for a in self.axes)

    @property
    def causal(self) -> tuple[bool, ...]:
        return tuple(a.causal for a in self.axes)

    @property
    def window_volume(self) -> int:
        return math.prod(self.windows)

    @property
    def is_dilated(self) -> bool:
        return any(d > 1 for d in self.dilations)

    def softmax_scale(self, head_dim: int) -> float:
        return 1.0 / math.sqrt(head_dim) if self.scale is None else float(self.scale)

    def undilated(self) -> "NaParams":
        return replace(self, axes=tuple(replace(a, dilation=1) for a in self.axes))


@dataclass(frozen=True)
class TileConfig:
    """Per-axis query tile and (fused only) key/value tile extents."""

    q_tile: tuple[int, ...]
    kv_tile: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "q_tile", tuple(int(t) for t in self.q_tile))
        kv = self.q_tile if self.kv_tile is None else self.kv_tile
        object.__setattr__(self, "kv_tile", tuple(int(t) for t in kv))

    @property
    def kv(self) -> tuple[int, ...]:
        return self.kv_tile

    def check(self, rank: int) -> None:
        for name, tile in (("q_tile", self.q_tile), ("kv_tile", self.kv)):
            if len(tile) != rank:
                raise TileConfigInvalid(f"{name} {tile} does not have rank {rank}")
            if any(t < 1 for t in tile):
                raise TileConfigInvalid(f"{name} {tile} has an extent < 1")


def squarest_factorization(volume: int, rank: int) -> tuple[int, ...]:
    best = None
    for f in factorizations(volume, rank):
        score = (max(f) / min(f), f)
        if best is None or score < best[0]:
            best = (score, f)
    return best[1]


def factorizations(volume: int, rank: int) -> list[tuple[int, ...]]:
    """All ordered ``rank``-tuples of positive integers whose product is ``volume``."""
    if rank == 1:
        return [(volume,)]
    out = []
    for x in range(1, volume + 1):
        if volume % x == 0:
            out.extend((x, *rest) for rest in factorizations(volume // x, rank - 1))
    return out


def default_tile_config(rank: int) -> TileConfig:
    tile = squarest_factorization(DEFAULT_TILE_VOLUME, rank)
    return TileConfig(tile, tile)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def residue_extent(extent: int, dilation: int, residue: int) -> int:
    """Number of tokens in ``range(residue, extent, dilation)``."""
    return max(0, -(-(extent - residue) // dilation))


def validate(problem: ProblemSpec, params: NaParams) -> None:
    """Raise the first violated constraint, or return None if the pair is valid."""
    if not 1 <= problem.rank <= MAX_RANK:
        raise RankMismatch(f"spatial rank must be 1..{MAX_RANK}, got {problem.rank}")
    if params.rank != problem.rank:
        raise RankMismatch(f"params have {params.rank} axes, problem has rank {problem.rank}")
    for name in ("batch", "heads", "head_dim"):
        if getattr(problem, name) < 1:
            raise InvalidProblem(f"{name} must be >= 1")
    if any(e < 1 for e in problem.extents):
        raise InvalidProblem(f"extents must be >= 1, got {problem.extents}")
    for ax, (extent, axis) in enumerate(zip(problem.extents, params.axes)):
        if axis.dilation < 1:
            raise BadDilation(f"axis {ax}: dilation {axis.dilation} < 1")
        if axis.window < 1:
            raise BadWindow(f"axis {ax}: window {axis.window} < 1")
        if not axis.causal and axis.window % 2 == 0:
            raise EvenWindowNonCausal(f"axis {ax}: even window {axis.window} requires causal masking")
        smallest = extent // axis.dilation
        if axis.window > smallest:
            raise WindowExceedsExtent(
                f"axis {ax}: window {axis.window} exceeds smallest residue-class extent {smallest} "
                f"(extent {extent}, dilation {axis.dilation})"
            )


def is_valid(problem: ProblemSpec, params: NaParams) -> bool:
    try:
        validate(problem, params)
    except InvalidParams:
        return False
    return True


def check_tensor(x: np.ndarray, problem: ProblemSpec, name: str, last_dim: int | None = None) -> None:
    """Shape, dtype and finiteness checks for an operator input."""
    expected = (problem.batch, problem.heads, *problem.extents,
                problem.head_dim if last_dim is None else last_dim)
    if not isinstance(x, np.ndarray):
        raise ShapeMismatch(f"{name} must be a numpy array")
    if x.shape != expected:
        raise ShapeMismatch(f"{name} has shape {x.shape}, expected {expected}")
    if x.dtype not in SUPPORTED_DTYPES:
        raise ShapeMismatch(f"{name} has dtype {x.dtype}; only float32/float64 are supported")
    check_finite(x, name)


def check_finite(x: np.ndarray, name: str, chunk: int = 1 << 14) -> None:
    # Chunked so the check never allocates a mask proportional to the input.
    flat = x.reshape(-1)
    for i in range(0, flat.size, chunk):
        if not np.isfinite(flat[i:i + chunk]).all():
            raise NonFiniteInput(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# Window placement (dilation-1 axes)
# ---------------------------------------------------------------------------


def window_start(i, extent: int, axis: AxisParams):
    """First context index of query ``i``'s window on an undilated axis.

    Works elementwise when ``i`` is an integer array.
    """
    if axis.causal:
        start = np.maximum(np.asarray(i) - axis.window + 1, 0)
    else:
        start = np.clip(np.asarray(i) - (axis.window - 1) // 2, 0, extent - axis.window)
    return int(start) if start.ndim == 0 else start


def window_end(i, extent: int, axis: AxisParams):
    """Last (inclusive) context index of query ``i``'s window on an undilated axis."""
    if axis.causal:
        return int(i) if np.ndim(i) == 0 else np.asarray(i).copy()
    return window_start(i, extent, axis) + axis.window - 1


def _axis_member(qi, ci, extent: int, axis: AxisParams):
    """Membership of context ``ci`` in query ``qi``'s window along one axis, dilation included."""
    qi = np.asarray(qi)
    ci = np.asarray(ci)
    d = axis.dilation
    residue = qi % d
    same_class = residue == ci % d
    qc, cc = qi // d, ci // d
    compact_extent = -(-(extent - residue) // d)
    if axis.causal:
        start = np.maximum(qc - axis.window + 1, 0)
        end = qc
    else:
        start = np.clip(qc - (axis.window - 1) // 2, 0, compact_extent - axis.window)
        end = start + axis.window - 1
    return same_class & (start <= cc) & (cc <= end)


def neighborhood_contains(q: Sequence[int], c: Sequence[int], problem: ProblemSpec,
                          params: NaParams) -> bool:
    return all(
        bool(_axis_member(qa, ca, extent, axis))
        for qa, ca, extent, axis in zip(q, c, problem.extents, params.axes)
    )


def axis_mask(extent: int, axis: AxisParams) -> np.ndarray:
    """Boolean ``[extent, extent]`` matrix: row = query index, column = context index."""
    idx = np.arange(extent)
    return _axis_member(idx[:, None], idx[None, :], extent, axis)


def dense_mask(problem: ProblemSpec, params: NaParams) -> np.ndarray:
    """The predicate materialized over all token pairs, ``[n, n]`` in row-major token order."""
    mask = np.ones((1, 1), dtype=bool)
    for extent, axis in zip(problem.extents, params.axes):
        m = axis_mask(extent, axis)
        mask = (mask[:, None, :, None] & m[None, :, None, :]).reshape(
            mask.shape[0] * extent, mask.shape[1] * extent
        )
    return mask


def inverse_neighborhood(c: Sequence[int], problem: ProblemSpec,
                         params: NaParams) -> list[tuple[int, ...]]:
    """All queries whose neighborhood contains context coordinate ``c``."""
    per_axis = []
    for ca, extent, axis in zip(c, problem.extents, params.axes):
        reach = (axis.window - 1) * axis.dilation
        candidates = range(max(0, ca - reach), min(extent - 1, ca + reach) + 1)
        per_axis.append([
            qa for qa in candidates
            if qa % axis.dilation == ca % axis.dilation and _axis_member(qa, ca, extent, axis)
        ])
    return list(itertools.product(*per_axis))


def decode_slot(q: Sequence[int], slot: int, problem: ProblemSpec,
                params: NaParams) -> tuple[tuple[int, ...], bool]:
    """Context coordinate held by compact-weight ``slot`` of query ``q``, and its validity."""
    offsets = np.unravel_index(slot, params.windows)
    coord, valid = [], True
    for qa, off, extent, axis in zip(q, offsets, problem.extents, params.axes):
        d = axis.dilation
        r = qa % d
        single = AxisParams(axis.window, 1, axis.causal)
        cc = window_start(qa // d, residue_extent(extent, d, r), single) + int(off)
        valid &= cc <= qa // d if axis.causal else True
        coord.append(r + cc * d)
    return tuple(coord), bool(valid)


# ---------------------------------------------------------------------------
# Halos
# ---------------------------------------------------------------------------


def halo_range(q_range: Sequence[tuple[int, int]], problem: ProblemSpec,
               params: NaParams) -> tuple[tuple[int, int], ...]:
    """Minimal per-axis context block covering every window of the queries in ``q_range``."""
    out = []
    for (lo, hi), extent, axis in zip(q_range, problem.extents, params.axes):
        out.append((window_start(lo, extent, axis), window_end(hi, extent, axis)))
    return tuple(out)


@lru_cache(maxsize=4096)
def _axis_bounds(extent: int, axis: AxisParams) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(extent)
    start = window_start(idx, extent, axis)
    end = window_end(idx, extent, axis)
    start.setflags(write=False)
    end.setflags(write=False)
    return start, end


def inverse_halo_range(c_range: Sequence[tuple[int, int]], problem: ProblemSpec,
                       params: NaParams) -> tuple[tuple[int, int], ...]:
    """Minimal per-axis query block containing every query that attends into ``c_range``."""
    out = []
    for (lo, hi), extent, axis in zip(c_range, problem.extents, params.axes):
        start, end = _axis_bounds(extent, axis)
        hits = np.flatnonzero((start <= hi) & (end >= lo))
        out.append((int(hits[0]), int(hits[-1])))
    return tuple(out)


# ---------------------------------------------------------------------------
# Per-axis neighbor tables (dilation-1 axes)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4096)
def axis_table(extent: int, axis: AxisParams) -> tuple[np.ndarray, np.ndarray]:
    """``(coords, valid)``, both ``[extent, window]``: slot ``o`` of query ``i`` holds ``coords[i, o]``."""
    start, _ = _axis_bounds(extent, axis)
    coords = start[:, None] + np.arange(axis.window)[None, :]
    if axis.causal:
        valid = coords <= np.arange(extent)[:, None]
    else:
        valid = np.ones_like(coords, dtype=bool)
    coords.setflags(write=False)
    valid.setflags(write=False)
    return coords, valid


def combine_axes(per_axis: Sequence[np.ndarray], valid: Sequence[np.ndarray],
                 extents: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Merge per-axis ``[T_a, w_a]`` index tables into a flat ``[prod T, prod w]`` table.

    Indices are linearized row-major over ``extents``; validity is the conjunction.
    """
    rank = len(per_axis)
    lin = np.zeros((1,) * (2 * rank), dtype=np.int64)
    ok = np.ones((1,) * (2 * rank), dtype=bool)
    for a, (idx, v, extent) in enumerate(zip(per_axis, valid, extents)):
        shape = [1] * (2 * rank)
        shape[a] = idx.shape[0]
        shape[rank + a] = idx.shape[1]
        lin = lin * extent + idx.reshape(shape)
        ok = ok & v.reshape(shape)
    rows = math.prod(i.shape[0] for i in per_axis)
    cols = math.prod(i.shape[1] for i in per_axis)
    return lin.reshape(rows, cols), np.broadcast_to(ok, lin.shape).reshape(rows, cols)


@lru_cache(maxsize=512)
def neighbor_table(extents: tuple[int, ...], axes: tuple[AxisParams, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Flat context index and validity for every (query, slot) of an undilated problem: ``[n, L]``."""
    tables = [axis_table(e, a) for e, a in zip(extents, axes)]
    nbr, valid = combine_axes([t[0] for t in tables], [t[1] for t in tables], extents)
    nbr.setflags(write=False)
    valid.setflags(write=False)
    return nbr, valid


# ---------------------------------------------------------------------------
# Dilation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubProblem:
    """One residue class of a dilated problem, expressed as an undilated problem.

    ``index`` holds one ``slice(residue, None, dilation)`` per spatial axis; applying it
    to the spatial axes of a token tensor yields a strided view of the sub-problem.
    """

    problem: ProblemSpec
    params: NaParams
    residues: tuple[int, ...]
    index: tuple[slice, ...]

    def view(self, x: np.ndarray) -> np.ndarray:
        """Strided view of ``x`` (layout ``[batch, heads, *spatial, ...]``)."""
        return x[(slice(None), slice(None), *self.index)]

    def token_coords(self) -> list[tuple[int, ...]]:
        """Original coordinates of the sub-problem's tokens, in sub-problem row-major order."""
        ranges = [
            range(r, r + e * s.step, s.step)
            for r, e, s in zip(self.residues, self.problem.extents, self.index)
        ]
        return list(itertools.product(*ranges))


def partition_dilated(problem: ProblemSpec, params: NaParams) -> list[SubProblem]:
    """Split a dilated problem into ``prod(dilation)`` non-overlapping undilated problems."""
    undilated = params.undilated()
    subs = []
    for residues in itertools.product(*(range(d) for d in params.dilations)):
        extents = tuple(
            residue_extent(e, d, r) for e, d, r in zip(problem.extents, params.dilations, residues)
        )
        index = tuple(slice(r, None, d) for r, d in zip(residues, params.dilations))
        subs.append(SubProblem(replace(problem, extents=extents), undilated, residues, index))
    return subs
