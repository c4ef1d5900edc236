"""Straightforward implementations of the three neighborhood-attention operators.

* ``pn``  (pointwise-neighborhood): query-key dot products into compact weights.
* ``nn``  (neighborhood-neighborhood): compact weights applied to values.
* ``in_`` (inverse-neighborhood): context-indexed accumulation, used for the
  key and value gradients.

Everything here favors clarity over speed and is the ground truth the tiled and
fused strategies are tested against. ``dense_oracle`` is an independent path
that materializes the full ``n x n`` masked attention matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from nattn import core
from nattn.core import AxisParams, NaParams, ProblemSpec
from nattn.errors import ProblemTooLargeForOracle, ShapeMismatch

ORACLE_MAX_TOKENS = 4096


def sentinel(dtype) -> float:
    """Stand-in for -inf in pre-softmax compact weights: the most negative finite value."""
    return np.finfo(dtype).min


@dataclass
class CompactWeights:
    """Attention weights in neighborhood layout ``[batch, heads, *extents, window_volume]``.

    ``valid`` has the same shape (usually a read-only broadcast view).
    """

    data: np.ndarray
    valid: np.ndarray

    @property
    def dtype(self):
        return self.data.dtype


def slot_validity(problem: ProblemSpec, params: NaParams) -> np.ndarray:
    """Validity of every (query, slot) pair, shape ``[*extents, window_volume]``."""
    valid = np.empty((*problem.extents, params.window_volume), dtype=bool)
    for sub in core.partition_dilated(problem, params):
        _, v = core.neighbor_table(sub.problem.extents, sub.params.axes)
        valid[sub.index] = v.reshape(*sub.problem.extents, -1)
    return valid


def _compact_weights(data: np.ndarray, problem: ProblemSpec, params: NaParams) -> CompactWeights:
    valid = np.broadcast_to(slot_validity(problem, params), data.shape)
    return CompactWeights(data, valid)


def _check_weights(a: CompactWeights, problem: ProblemSpec, params: NaParams) -> None:
    expected = (problem.batch, problem.heads, *problem.extents, params.window_volume)
    if a.data.shape != expected:
        raise ShapeMismatch(f"compact weights have shape {a.data.shape}, expected {expected}")


def _flat(x: np.ndarray, n: int) -> np.ndarray:
    return x.reshape(x.shape[0], x.shape[1], n, x.shape[-1])


# ---------------------------------------------------------------------------
# Undilated kernels. Inputs are (possibly strided) views of one sub-problem.
# ---------------------------------------------------------------------------


def _pn_undilated(a, b, extents, axes, scale):
    n = int(np.prod(extents))
    nbr, valid = core.neighbor_table(extents, axes)
    af, bf = _flat(np.ascontiguousarray(a), n), _flat(np.ascontiguousarray(b), n)
    out = np.empty(af.shape[:2] + nbr.shape, dtype=a.dtype)
    for slot in range(nbr.shape[1]):
        out[..., slot] = (af * bf[:, :, nbr[:, slot], :]).sum(-1)
    out *= scale
    np.copyto(out, sentinel(a.dtype), where=~valid)
    return out.reshape(*a.shape[:-1], nbr.shape[1])


def _nn_undilated(w, b, extents, axes):
    n = int(np.prod(extents))
    nbr, valid = core.neighbor_table(extents, axes)
    wf = np.ascontiguousarray(w).reshape(w.shape[0], w.shape[1], n, -1)
    bf = _flat(np.ascontiguousarray(b), n)
    out = np.zeros(bf.shape[:2] + (n, bf.shape[-1]), dtype=b.dtype)
    for slot in range(nbr.shape[1]):
        weight = np.where(valid[:, slot], wf[..., slot], 0)
        out += weight[..., None] * bf[:, :, nbr[:, slot], :]
    return out.reshape(*b.shape[:-1], b.shape[-1])


@lru_cache(maxsize=512)
def inverse_table(extents: tuple[int, ...], axes: tuple[AxisParams, ...]):
    """For each context token: the (query, slot) pairs that reach it, padded to a common width.

    Returns ``(query, slot, valid)``, each ``[n, max_fan_in]``. Entries of one row are
    ordered by ascending query index.
    """
    nbr, valid = core.neighbor_table(extents, axes)
    n, L = nbr.shape
    q_idx = np.repeat(np.arange(n), L)[valid.ravel()]
    s_idx = np.tile(np.arange(L), n)[valid.ravel()]
    ctx = nbr.ravel()[valid.ravel()]
    order = np.argsort(ctx, kind="stable")
    q_idx, s_idx, ctx = q_idx[order], s_idx[order], ctx[order]
    counts = np.bincount(ctx, minlength=n)
    width = int(counts.max())
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    pos = np.arange(ctx.size) - offsets[ctx]
    inv_q = np.zeros((n, width), dtype=np.int64)
    inv_s = np.zeros((n, width), dtype=np.int64)
    inv_v = np.zeros((n, width), dtype=bool)
    inv_q[ctx, pos] = q_idx
    inv_s[ctx, pos] = s_idx
    inv_v[ctx, pos] = True
    for arr in (inv_q, inv_s, inv_v):
        arr.setflags(write=False)
    return inv_q, inv_s, inv_v


def _in_undilated(w, b, extents, axes):
    n = int(np.prod(extents))
    inv_q, inv_s, inv_v = inverse_table(extents, axes)
    wf = np.ascontiguousarray(w).reshape(w.shape[0], w.shape[1], n, -1)
    bf = _flat(np.ascontiguousarray(b), n)
    out = np.zeros_like(bf)
    for j in range(inv_q.shape[1]):
        weight = np.where(inv_v[:, j], wf[:, :, inv_q[:, j], inv_s[:, j]], 0)
        out += weight[..., None] * bf[:, :, inv_q[:, j], :]
    return out.reshape(b.shape)


# ---------------------------------------------------------------------------
# Public operators
# ---------------------------------------------------------------------------


def pn(a: np.ndarray, b: np.ndarray, problem: ProblemSpec, params: NaParams,
       scale: float | None = None) -> CompactWeights:
    """Scaled dot products of each query row of ``a`` with its neighborhood rows of ``b``.

    With ``a = dO``, ``b = V`` and ``scale=1`` this is the gradient of the
    post-softmax weights. Invalid slots hold :func:`sentinel`.
    """
    core.validate(problem, params)
    core.check_tensor(a, problem, "a")
    core.check_tensor(b, problem, "b")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if scale is None:
        scale = params.softmax_scale(problem.head_dim)
    out = np.empty((*a.shape[:-1], params.window_volume), dtype=a.dtype)
    for sub in core.partition_dilated(problem, params):
        sub.view(out)[...] = _pn_undilated(
            sub.view(a), sub.view(b), sub.problem.extents, sub.params.axes, a.dtype.type(scale)
        )
    return _compact_weights(out, problem, params)


def masked_softmax(a: CompactWeights) -> tuple[CompactWeights, np.ndarray]:
    """Softmax over each query's valid slots; returns ``(P, lse)``.

    Invalid slots of ``P`` are exactly 0. ``lse`` has shape ``[batch, heads, *extents]``.
    """
    x = np.where(a.valid, a.data, sentinel(a.dtype))
    row_max = x.max(axis=-1, keepdims=True)
    e = np.where(a.valid, np.exp(x - row_max), 0)
    total = e.sum(axis=-1, keepdims=True)
    p = e / total
    lse = (row_max + np.log(total))[..., 0]
    return CompactWeights(p, a.valid), lse


def nn(a: CompactWeights, b: np.ndarray, problem: ProblemSpec, params: NaParams) -> np.ndarray:
    """``out[q] = sum_w a[q, w] * b[context(q, w)]`` over valid slots."""
    core.validate(problem, params)
    _check_weights(a, problem, params)
    core.check_tensor(b, problem, "b")
    out = np.empty_like(b)
    for sub in core.partition_dilated(problem, params):
        sub.view(out)[...] = _nn_undilated(
            sub.view(a.data), sub.view(b), sub.problem.extents, sub.params.axes
        )
    return out


def in_(a: CompactWeights, b: np.ndarray, problem: ProblemSpec, params: NaParams) -> np.ndarray:
    """``out[c] = sum over queries q reaching c of a[q, slot of c] * b[q]``."""
    core.validate(problem, params)
    _check_weights(a, problem, params)
    core.check_tensor(b, problem, "b")
    out = np.empty_like(b)
    for sub in core.partition_dilated(problem, params):
        sub.view(out)[...] = _in_undilated(
            sub.view(a.data), sub.view(b), sub.problem.extents, sub.params.axes
        )
    return out


def na_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, problem: ProblemSpec,
               params: NaParams) -> tuple[np.ndarray, np.ndarray, CompactWeights]:
    """Neighborhood attention forward pass. Returns ``(out, lse, P)``."""
    core.check_tensor(v, problem, "v")
    logits = pn(q, k, problem, params)
    p, lse = masked_softmax(logits)
    return nn(p, v, problem, params), lse, p


def softmax_backward(p: CompactWeights, d_p: CompactWeights, d_out: np.ndarray,
                     out: np.ndarray) -> CompactWeights:
    """Gradient of the pre-softmax weights: ``P * (dP - rowdot(dO, O))``; invalid slots 0."""
    row = (d_out * out).sum(-1, keepdims=True)
    d_a = np.where(p.valid, p.data * (d_p.data - row), 0).astype(p.dtype, copy=False)
    return CompactWeights(d_a, p.valid)


def na_backward(d_out: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                p: CompactWeights, out: np.ndarray, problem: ProblemSpec,
                params: NaParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(dq, dk, dv)`` composed from pn, nn and in_."""
    scale = q.dtype.type(params.softmax_scale(problem.head_dim))
    d_p = pn(d_out, v, problem, params, scale=1.0)
    d_a = softmax_backward(p, d_p, d_out, out)
    dq = scale * nn(d_a, k, problem, params)
    dk = scale * in_(d_a, q, problem, params)
    dv = in_(p, d_out, problem, params)
    return dq, dk, dv


def dense_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray, problem: ProblemSpec,
                 params: NaParams) -> np.ndarray:
    """Masked softmax attention over the full ``n x n`` logit matrix."""
    n = problem.num_tokens
    if n > ORACLE_MAX_TOKENS:
        raise ProblemTooLargeForOracle(f"{n} tokens exceeds the oracle limit of {ORACLE_MAX_TOKENS}")
    core.validate(problem, params)
    for name, x in (("q", q), ("k", k), ("v", v)):
        core.check_tensor(x, problem, name)
    mask = core.dense_mask(problem, params)
    scale = params.softmax_scale(problem.head_dim)
    qf, kf, vf = (_flat(x, n) for x in (q, k, v))
    logits = np.where(mask, (qf @ np.swapaxes(kf, -1, -2)) * scale, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return (weights @ vf).reshape(q.shape)
