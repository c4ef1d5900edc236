import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nattn import core
from nattn.core import AxisParams, NaParams, ProblemSpec, TileConfig
from nattn.errors import (
    BadDilation,
    BadWindow,
    EvenWindowNonCausal,
    InvalidProblem,
    NonFiniteInput,
    RankMismatch,
    ShapeMismatch,
    TileConfigInvalid,
    WindowExceedsExtent,
)

from conftest import small_grid


def P(*extents, batch=1, heads=1, dim=4):
    return ProblemSpec(batch, heads, extents, dim)


# --- independent oracle -------------------------------------------------------
# Windows are rebuilt by brute force: list the residue class, then pick the
# contiguous run of `window` members that contains the query and whose center is
# closest to it (non-causal), or the run ending at the query (causal).


def oracle_axis_window(qi, extent, window, dilation, causal):
    members = [x for x in range(extent) if x % dilation == qi % dilation]
    pos = members.index(qi)
    if causal:
        return set(members[max(0, pos - window + 1):pos + 1])
    runs = [range(s, s + window) for s in range(len(members) - window + 1) if s <= pos < s + window]
    best = min(runs, key=lambda r: abs(r.start + (window - 1) / 2 - pos))
    return {members[j] for j in best}


def oracle_contains(q, c, extents, params):
    return all(
        ca in oracle_axis_window(qa, e, a.window, a.dilation, a.causal)
        for qa, ca, e, a in zip(q, c, extents, params.axes)
    )


def coords(extents):
    return list(itertools.product(*(range(e) for e in extents)))


# --- types ---------------------------------------------------------------------


def test_problem_spec_counts():
    p = P(4, 5, 6, batch=2, heads=3, dim=8)
    assert p.rank == 3
    assert p.num_tokens == 120
    assert p.shape == (2, 3, 4, 5, 6, 8)
    assert ProblemSpec.from_shape(p.shape) == p


def test_params_build_broadcasts_scalars():
    params = NaParams.build(3, 2, True, rank=2)
    assert params.windows == (3, 3)
    assert params.dilations == (2, 2)
    assert params.causal == (True, True)
    assert params.window_volume == 9
    assert params.is_dilated
    assert params.undilated().dilations == (1, 1)


def test_default_scale_is_inverse_sqrt_head_dim():
    assert NaParams.build([3]).softmax_scale(16) == 0.25
    assert NaParams.build([3], scale=2.0).softmax_scale(16) == 2.0


def test_tile_config_kv_defaults_to_q():
    assert TileConfig((4, 4)).kv == (4, 4)
    with pytest.raises(TileConfigInvalid):
        TileConfig((4,)).check(2)
    with pytest.raises(TileConfigInvalid):
        TileConfig((0, 4)).check(2)


def test_factorizations():
    assert core.factorizations(64, 1) == [(64,)]
    rank2 = core.factorizations(64, 2)
    assert sorted(rank2) == [(1, 64), (2, 32), (4, 16), (8, 8), (16, 4), (32, 2), (64, 1)]
    rank3 = core.factorizations(64, 3)
    assert len(rank3) == 28
    assert all(a * b * c == 64 for a, b, c in rank3)


@pytest.mark.parametrize("rank, tile", [(1, (64,)), (2, (8, 8)), (3, (4, 4, 4))])
def test_default_tile_config(rank, tile):
    assert core.default_tile_config(rank) == TileConfig(tile, tile)


# --- validate ------------------------------------------------------------------


def test_validate_accepts_plain_problem():
    assert core.validate(P(5), NaParams.build([3])) is None


@pytest.mark.parametrize(
    "problem, params, error",
    [
        (P(5), NaParams.build([4]), EvenWindowNonCausal),
        (P(8), NaParams.build([5], [2]), WindowExceedsExtent),
        (P(5), NaParams.build([7]), WindowExceedsExtent),
        (P(5, 5), NaParams.build([3]), RankMismatch),
        (P(2, 2, 2, 2), NaParams.build(1, rank=4), RankMismatch),
        (P(5), NaParams.build([3], [0]), BadDilation),
        (P(5), NaParams.build([0], causal=[True]), BadWindow),
        (P(0), NaParams.build([1]), InvalidProblem),
        (ProblemSpec(0, 1, (5,), 4), NaParams.build([3]), InvalidProblem),
    ],
)
def test_validate_rejects(problem, params, error):
    with pytest.raises(error):
        core.validate(problem, params)
    assert not core.is_valid(problem, params)


def test_even_window_allowed_on_causal_axis():
    core.validate(P(6, 5), NaParams.build([4, 3], 1, [True, False]))


def test_window_limit_uses_smallest_residue_class():
    # extent 7, dilation 2: classes of 4 and 3 tokens
    core.validate(P(7), NaParams.build([3], [2]))
    with pytest.raises(WindowExceedsExtent):
        core.validate(P(7), NaParams.build([5], [2]))


def test_check_tensor():
    p = P(4)
    core.check_tensor(np.zeros(p.shape), p, "x")
    with pytest.raises(ShapeMismatch):
        core.check_tensor(np.zeros((1, 1, 5, 4)), p, "x")
    with pytest.raises(ShapeMismatch):
        core.check_tensor(np.zeros(p.shape, dtype=np.int32), p, "x")
    bad = np.zeros(p.shape)
    bad[0, 0, 3, 1] = np.nan
    with pytest.raises(NonFiniteInput):
        core.check_tensor(bad, p, "x")


def test_check_finite_looks_past_first_chunk():
    x = np.zeros(100)
    x[-1] = np.inf
    with pytest.raises(NonFiniteInput):
        core.check_finite(x, "x", chunk=16)


# --- window placement ----------------------------------------------------------


@pytest.mark.parametrize(
    "i, extent, axis, start",
    [
        (0, 5, AxisParams(3), 0),
        (4, 5, AxisParams(3), 2),
        (2, 5, AxisParams(5), 0),
        (1, 5, AxisParams(3, causal=True), 0),
        (2, 5, AxisParams(3), 1),
        (4, 5, AxisParams(3, causal=True), 2),
    ],
)
def test_window_start(i, extent, axis, start):
    assert core.window_start(i, extent, axis) == start


def test_window_start_vectorized():
    starts = core.window_start(np.arange(7), 7, AxisParams(3))
    np.testing.assert_array_equal(starts, [0, 0, 1, 2, 3, 4, 4])


@pytest.mark.parametrize("extent", range(1, 10))
@pytest.mark.parametrize("window", [1, 2, 3, 4, 5, 7, 9])
@pytest.mark.parametrize("causal", [False, True])
def test_window_size_and_self_membership(extent, window, causal):
    if window > extent or (not causal and window % 2 == 0):
        return
    axis = AxisParams(window, 1, causal)
    for i in range(extent):
        start = core.window_start(i, extent, axis)
        end = core.window_end(i, extent, axis)
        size = end - start + 1
        assert size == (min(window, i + 1) if causal else window)
        assert start <= i <= end
        assert 0 <= start and end < extent


# --- predicate -----------------------------------------------------------------


def test_predicate_examples():
    assert core.neighborhood_contains((0, 0), (1, 1), P(5, 5), NaParams.build([3, 3]))
    assert not core.neighborhood_contains((2,), (3,), P(5), NaParams.build([3], causal=[True]))
    assert not core.neighborhood_contains((0,), (1,), P(8), NaParams.build([3], [2]))


def test_window_one_is_identity():
    problem, params = P(3, 4), NaParams.build([1, 1])
    for q in coords(problem.extents):
        for c in coords(problem.extents):
            assert core.neighborhood_contains(q, c, problem, params) == (q == c)


def test_full_window_is_self_attention():
    problem, params = P(5, 3), NaParams.build([5, 3])
    assert core.dense_mask(problem, params).all()


@pytest.mark.parametrize("rank", [1, 2])
def test_predicate_matches_brute_force_windows(rank):
    for extents, params in small_grid(rank, (1, 3, 5, 8) if rank == 2 else range(1, 9)):
        mask = core.dense_mask(P(*extents), params)
        cs = coords(extents)
        for a, q in enumerate(cs):
            for b, c in enumerate(cs):
                assert mask[a, b] == oracle_contains(q, c, extents, params), (extents, params, q, c)


def test_predicate_matches_brute_force_rank3_sample():
    cases = [
        ((4, 5, 6), NaParams.build([3, 5, 3], [1, 1, 2], [False, True, False])),
        ((8, 3, 7), NaParams.build([3, 1, 3], [2, 1, 2], [True, False, True])),
        ((5, 5, 5), NaParams.build([5, 3, 4], [1, 1, 1], [False, False, True])),
    ]
    for extents, params in cases:
        mask = core.dense_mask(P(*extents), params)
        cs = coords(extents)
        for a, q in enumerate(cs):
            for b, c in enumerate(cs):
                assert mask[a, b] == oracle_contains(q, c, extents, params)


def test_self_always_in_window():
    for rank in (1, 2):
        for extents, params in small_grid(rank, (1, 4, 7)):
            assert np.diag(core.dense_mask(P(*extents), params)).all()


# --- inverse neighborhood ------------------------------------------------------


def test_inverse_neighborhood_boundary():
    assert core.inverse_neighborhood((0,), P(5), NaParams.build([3])) == [(0,), (1,)]


def test_inverse_neighborhood_center_of_short_axis():
    # Boundary queries shift inward, so every query of a 5-token axis sees token 2.
    got = core.inverse_neighborhood((2,), P(5), NaParams.build([3]))
    assert got == [(0,), (1,), (2,), (3,), (4,)]


def test_inverse_neighborhood_full_window():
    problem = P(3, 5)
    got = core.inverse_neighborhood((1, 2), problem, NaParams.build([3, 5]))
    assert got == coords(problem.extents)


@pytest.mark.parametrize("rank", [1, 2])
def test_inverse_matches_enumeration(rank):
    for extents, params in small_grid(rank, (1, 2, 5, 8) if rank == 2 else range(1, 9)):
        problem = P(*extents)
        mask = core.dense_mask(problem, params)
        cs = coords(extents)
        forward_total = int(mask.sum())
        inverse_total = 0
        for b, c in enumerate(cs):
            got = core.inverse_neighborhood(c, problem, params)
            assert got == [cs[a] for a in np.flatnonzero(mask[:, b])]
            inverse_total += len(got)
        assert forward_total == inverse_total


# --- decode_slot ---------------------------------------------------------------


def test_decode_slot_lexicographic():
    problem, params = P(6, 6), NaParams.build([3, 3])
    assert core.decode_slot((0, 0), 0, problem, params) == ((0, 0), True)
    assert core.decode_slot((0, 0), 5, problem, params) == ((1, 2), True)
    assert core.decode_slot((3, 3), 4, problem, params) == ((3, 3), True)


def test_decode_slot_causal_invalid_slots():
    problem, params = P(6), NaParams.build([3], causal=[True])
    assert core.decode_slot((0,), 0, problem, params) == ((0,), True)
    assert core.decode_slot((0,), 1, problem, params)[1] is False
    assert core.decode_slot((4,), 2, problem, params) == ((4,), True)


@pytest.mark.parametrize("rank", [1, 2])
def test_decode_slot_covers_neighborhood_exactly(rank):
    for extents, params in small_grid(rank, (3, 5, 8)):
        problem = P(*extents)
        mask = core.dense_mask(problem, params)
        cs = coords(extents)
        index = {c: i for i, c in enumerate(cs)}
        for a, q in enumerate(cs):
            decoded = [core.decode_slot(q, s, problem, params) for s in range(params.window_volume)]
            valid = [c for c, ok in decoded if ok]
            assert len(valid) == len(set(valid))
            assert sorted(index[c] for c in valid) == list(np.flatnonzero(mask[a]))


def test_neighbor_table_matches_decode_slot():
    problem, params = P(5, 4), NaParams.build([3, 2], causal=[False, True])
    nbr, valid = core.neighbor_table(problem.extents, params.axes)
    cs = coords(problem.extents)
    for a, q in enumerate(cs):
        for s in range(params.window_volume):
            c, ok = core.decode_slot(q, s, problem, params)
            assert valid[a, s] == ok
            if ok:
                assert cs[nbr[a, s]] == c


# --- halos ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "params, q_range, halo",
    [
        (NaParams.build([3]), [(4, 7)], ((3, 8),)),
        (NaParams.build([3], causal=[True]), [(4, 7)], ((2, 7),)),
        (NaParams.build([3]), [(0, 9)], ((0, 9),)),
        (NaParams.build([9]), [(0, 9)], ((0, 9),)),
    ],
)
def test_halo_range_examples(params, q_range, halo):
    assert core.halo_range(q_range, P(10), params) == halo


@pytest.mark.parametrize("window, causal", [(1, False), (3, False), (5, False), (2, True), (4, True)])
def test_halo_is_minimal_union_of_windows(window, causal):
    extent = 11
    params = NaParams.build([window], causal=[causal])
    mask = core.axis_mask(extent, params.axes[0])
    for lo in range(extent):
        for hi in range(lo, extent):
            touched = np.flatnonzero(mask[lo:hi + 1].any(axis=0))
            assert core.halo_range([(lo, hi)], P(extent), params) == ((touched[0], touched[-1]),)


@pytest.mark.parametrize("window, causal", [(1, False), (3, False), (5, False), (2, True), (4, True)])
def test_inverse_halo_is_minimal(window, causal):
    extent = 11
    params = NaParams.build([window], causal=[causal])
    mask = core.axis_mask(extent, params.axes[0])
    for lo in range(extent):
        for hi in range(lo, extent):
            queries = np.flatnonzero(mask[:, lo:hi + 1].any(axis=1))
            got = core.inverse_halo_range([(lo, hi)], P(extent), params)
            assert got == ((queries[0], queries[-1]),)


# --- dilation partition --------------------------------------------------------


def test_partition_even_split():
    subs = core.partition_dilated(P(8), NaParams.build([3], [2]))
    assert [s.problem.extents for s in subs] == [(4,), (4,)]
    assert [s.token_coords() for s in subs] == [
        [(0,), (2,), (4,), (6,)],
        [(1,), (3,), (5,), (7,)],
    ]
    assert all(s.params.dilations == (1,) for s in subs)


def test_partition_ragged_split():
    subs = core.partition_dilated(P(7), NaParams.build([3], [2]))
    assert [s.problem.extents for s in subs] == [(4,), (3,)]


def test_partition_identity_without_dilation():
    problem, params = P(4, 5), NaParams.build([3, 3])
    (sub,) = core.partition_dilated(problem, params)
    assert sub.problem == problem
    assert sub.token_coords() == coords(problem.extents)
    x = np.arange(20.0).reshape(1, 1, 4, 5)
    assert np.shares_memory(sub.view(x), x)


@pytest.mark.parametrize("extents, dilations", [((7,), (3,)), ((6, 5), (2, 2)), ((5, 4, 7), (2, 1, 3))])
def test_partition_is_a_partition(extents, dilations):
    params = NaParams.build([1] * len(extents), list(dilations))
    subs = core.partition_dilated(P(*extents), params)
    assert len(subs) == int(np.prod(dilations))
    seen = [c for s in subs for c in s.token_coords()]
    assert len(seen) == len(set(seen))
    assert set(seen) == set(coords(extents))
    x = np.arange(np.prod(extents)).reshape(1, 1, *extents)
    for s in subs:
        flat = s.view(x).reshape(-1)
        assert [tuple(np.unravel_index(i, extents)) for i in flat] == s.token_coords()


def test_dilated_predicate_is_partition_of_undilated():
    problem, params = P(8, 7), NaParams.build([3, 3], [2, 2], [False, True])
    mask = core.dense_mask(problem, params)
    cs = coords(problem.extents)
    index = {c: i for i, c in enumerate(cs)}
    rebuilt = np.zeros_like(mask)
    for sub in core.partition_dilated(problem, params):
        sub_mask = core.dense_mask(sub.problem, sub.params)
        ids = [index[c] for c in sub.token_coords()]
        rebuilt[np.ix_(ids, ids)] = sub_mask
    np.testing.assert_array_equal(rebuilt, mask)


# --- properties ----------------------------------------------------------------


@st.composite
def axis_problems(draw):
    rank = draw(st.integers(1, 3))
    extents, axes = [], []
    for _ in range(rank):
        dilation = draw(st.integers(1, 3))
        causal = draw(st.booleans())
        extent = draw(st.integers(dilation, 12))
        limit = extent // dilation
        window = draw(st.integers(1, limit))
        if not causal and window % 2 == 0:
            window -= 1
        extents.append(extent)
        axes.append(AxisParams(window, dilation, causal))
    return P(*extents), NaParams(tuple(axes))


@settings(max_examples=150, deadline=None)
@given(axis_problems(), st.data())
def test_property_predicate_agrees_with_oracle(case, data):
    problem, params = case
    core.validate(problem, params)
    q = tuple(data.draw(st.integers(0, e - 1)) for e in problem.extents)
    c = tuple(data.draw(st.integers(0, e - 1)) for e in problem.extents)
    assert core.neighborhood_contains(q, q, problem, params)
    assert core.neighborhood_contains(q, c, problem, params) == oracle_contains(q, c, problem.extents, params)
    assert (q in core.inverse_neighborhood(c, problem, params)) == core.neighborhood_contains(q, c, problem, params)


@settings(max_examples=100, deadline=None)
@given(axis_problems(), st.data())
def test_property_window_size(case, data):
    problem, params = case
    q = tuple(data.draw(st.integers(0, e - 1)) for e in problem.extents)
    expected = 1
    for qa, a in zip(q, params.axes):
        expected *= min(a.window, qa // a.dilation + 1) if a.causal else a.window
    members = [c for c in coords(problem.extents) if core.neighborhood_contains(q, c, problem, params)]
    assert len(members) == expected
