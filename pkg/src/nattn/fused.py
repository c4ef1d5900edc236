"""Fused neighborhood attention.

Each query tile streams key/value blocks from its halo, masks the logits with
the neighborhood predicate and folds them into an online-softmax state. Only
the output and the per-query log-sum-exp ever reach main memory; attention
weights exist one ``q_tile x kv_tile`` block at a time.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from nattn import core, reference, tiled
from nattn.core import NaParams, ProblemSpec, TileConfig
from nattn.memory import AllocationLedger
from nattn.reference import CompactWeights
from nattn.tiled import _clamp_tile, _load, _query_plan, _run, microkernel_gemm

KV_ORDERS = ("lex", "reverse", "random")


@dataclass
class OnlineSoftmaxState:
    """Running max ``m``, running exp-sum ``l`` and unnormalized output ``acc`` for a query tile."""

    m: np.ndarray
    l: np.ndarray
    acc: np.ndarray

    @classmethod
    def empty(cls, lead: tuple[int, ...], rows: int, dim: int, dtype,
              ledger: AllocationLedger | None = None) -> "OnlineSoftmaxState":
        ledger = ledger if ledger is not None else AllocationLedger()
        m = ledger.allocate((*lead, rows), dtype, "row_max")
        m.fill(-np.inf)
        l = ledger.allocate((*lead, rows), dtype, "row_sum", zero=True)
        acc = ledger.allocate((*lead, rows, dim), dtype, "accumulator", zero=True)
        return cls(m, l, acc)

    def finalize(self) -> tuple[np.ndarray, np.ndarray]:
        """``(out, lse)`` for the tile."""
        return self.acc / self.l[..., None], self.m + np.log(self.l)


def online_update(state: OnlineSoftmaxState, s_block: np.ndarray,
                  v_block: np.ndarray) -> OnlineSoftmaxState:
    """Fold one block of masked logits (``-inf`` where masked) into ``state``.

    Updates ``state`` in place and returns it. ``s_block`` is overwritten with the
    block's unnormalized probabilities.
    """
    m_new = np.maximum(state.m, s_block.max(axis=-1))
    # Rows with nothing valid yet keep m = -inf; shift them by 0 so exp() yields 0, not nan.
    empty = np.isneginf(m_new)
    shift = np.where(empty, 0, m_new) if empty.any() else m_new
    alpha = np.exp(state.m - shift)
    s_block -= shift[..., None]
    np.exp(s_block, out=s_block)
    state.l *= alpha
    state.l += s_block.sum(axis=-1)
    state.acc *= alpha[..., None]
    microkernel_gemm(s_block, v_block, state.acc, accumulate=True)
    state.m[...] = m_new
    return state


def _kv_blocks(halo, kv_tile, order: str, rng: np.random.Generator | None):
    per_axis = [
        [(lo, min(lo + t, hi + 1) - 1) for lo in range(h_lo, hi + 1, t)]
        for (h_lo, hi), t in zip(halo, kv_tile)
        for lo in [h_lo]
    ]
    blocks = list(itertools.product(*per_axis))
    if order == "reverse":
        blocks.reverse()
    elif order == "random":
        perm = (rng or np.random.default_rng()).permutation(len(blocks))
        blocks = [blocks[i] for i in perm]
    return blocks


def _block_mask(bounds, q_range, block) -> np.ndarray:
    """``[tile volume, block volume]`` predicate for one (query tile, kv block) pair."""
    mask = np.ones((1, 1), dtype=bool)
    for (start, end), (q_lo, q_hi), (c_lo, c_hi) in zip(bounds, q_range, block):
        c = np.arange(c_lo, c_hi + 1)
        m = (start[q_lo:q_hi + 1, None] <= c) & (c <= end[q_lo:q_hi + 1, None])
        mask = (mask[:, None, :, None] & m[None, :, None, :]).reshape(
            mask.shape[0] * m.shape[0], mask.shape[1] * m.shape[1]
        )
    return mask


def fused_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, problem: ProblemSpec,
                  params: NaParams, cfg: TileConfig | None = None, *, threads: int = 1,
                  kv_order: str = "lex", rng: np.random.Generator | None = None):
    """Fused forward pass: returns ``(out, lse, ledger)``.

    ``kv_order`` picks the visit order of key/value blocks within each halo
    (``"lex"``, ``"reverse"`` or ``"random"`` with ``rng``); results agree up to
    rounding for every order.
    """
    core.validate(problem, params)
    cfg = cfg or core.default_tile_config(problem.rank)
    cfg.check(problem.rank)
    if kv_order not in KV_ORDERS:
        raise ValueError(f"kv_order must be one of {KV_ORDERS}")
    for name, x in (("q", q), ("k", k), ("v", v)):
        core.check_tensor(x, problem, name)
    if not (q.dtype == k.dtype == v.dtype):
        raise core.ShapeMismatch("q, k and v must share a dtype")

    dtype = q.dtype
    scale = dtype.type(params.softmax_scale(problem.head_dim))
    B, H, d = problem.batch, problem.heads, problem.head_dim
    ledger = AllocationLedger()
    out = np.empty_like(q)
    lse = np.empty(q.shape[:-1], dtype=dtype)

    # All residue classes are planned up front and run as independent tiles.
    work_items = []
    for sub in core.partition_dilated(problem, params):
        ext = sub.problem.extents
        plan = _query_plan(ext, sub.params.axes, _clamp_tile(cfg.q_tile, ext))
        bounds = [core._axis_bounds(e, a) for e, a in zip(ext, sub.params.axes)]
        views = (sub.view(q), sub.view(k), sub.view(v), sub.view(out), sub.view(lse))
        work_items.extend((t, bounds, views) for t in plan)

    def work(item):
        t, bounds, (qv, kv, vv, ov, lv) = item
        q_s = _load(ledger, qv[(slice(None), slice(None), *t.slices)], t.shape, t.volume, "q_tile")
        state = OnlineSoftmaxState.empty((B, H), t.volume, d, dtype, ledger)
        for block in _kv_blocks(t.halo, cfg.kv, kv_order, rng):
            mask = _block_mask(bounds, t.rng, block)
            hits = np.count_nonzero(mask)
            if not hits:
                continue
            ledger.record(mask, "mask")
            shape = tuple(hi - lo + 1 for lo, hi in block)
            vol = math.prod(shape)
            sl = (slice(None), slice(None), *(slice(lo, hi + 1) for lo, hi in block))
            k_s = _load(ledger, kv[sl], shape, vol, "k_block")
            v_s = _load(ledger, vv[sl], shape, vol, "v_block")
            s = ledger.allocate((B, H, t.volume, vol), dtype, "logits")
            microkernel_gemm(q_s, k_s, s, transpose_b=True, accumulate=False)
            s *= scale
            if hits < mask.size:
                np.copyto(s, dtype.type(-np.inf), where=~mask)
            online_update(state, s, v_s)
            ledger.release(mask, k_s, v_s, s)
        o_t, lse_t = state.finalize()
        ov[(slice(None), slice(None), *t.slices)] = o_t.reshape(B, H, *t.shape, d)
        lv[(slice(None), slice(None), *t.slices)] = lse_t.reshape(B, H, *t.shape)
        ledger.release(q_s, state.m, state.l, state.acc)

    _run(work_items, work, threads)
    return out, lse, ledger


def recompute_weights(q: np.ndarray, k: np.ndarray, lse: np.ndarray, problem: ProblemSpec,
                      params: NaParams, cfg: TileConfig | None = None, *,
                      threads: int = 1) -> CompactWeights:
    """Post-softmax weights rebuilt from ``q``, ``k`` and the forward pass's log-sum-exp."""
    logits = tiled.tiled_pn(q, k, problem, params, cfg, threads=threads)
    p = np.where(logits.valid, np.exp(logits.data - lse[..., None]), 0).astype(q.dtype, copy=False)
    return CompactWeights(p, logits.valid)


def fused_backward_composed(d_out, q, k, v, out, lse, problem: ProblemSpec, params: NaParams,
                            cfg: TileConfig | None = None, *, threads: int = 1):
    """``(dq, dk, dv)`` from the retained log-sum-exp; attention weights are recomputed, not stored."""
    p = recompute_weights(q, k, lse, problem, params, cfg, threads=threads)
    return tiled.tiled_backward(d_out, q, k, v, p, out, problem, params, cfg, threads=threads)
