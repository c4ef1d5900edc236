from __future__ import annotations

import itertools

import numpy as np
import pytest

from nattn import core
from nattn.core import NaParams, ProblemSpec


def make_qkv(problem: ProblemSpec, dtype=np.float64, seed: int = 0, count: int = 3):
    rng = np.random.default_rng(seed)
    return tuple(rng.standard_normal(problem.shape).astype(dtype) for _ in range(count))


def axis_options(extent: int):
    """(window, dilation, causal) triples for one axis of the small-problem grid."""
    windows = {1, 3, 5}
    if extent % 2:
        windows.add(extent)
    for w, d, c in itertools.product(sorted(windows), (1, 2), (False, True)):
        yield w, d, c


def small_grid(rank: int, extents_choices=(1, 2, 3, 5, 7, 8)):
    """Every valid (problem extents, params) pair of a given rank over the small grid."""
    for extents in itertools.product(extents_choices, repeat=rank):
        for axes in itertools.product(*(list(axis_options(e)) for e in extents)):
            params = NaParams.build([a[0] for a in axes], [a[1] for a in axes], [a[2] for a in axes])
            problem = ProblemSpec(1, 1, extents, 1)
            if core.is_valid(problem, params):
                yield extents, params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: list[tuple[str, str, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line and assert on it; ``soft`` verdicts warn instead of failing."""

    def record(criterion: str, ok: bool, detail: str, soft: bool = False):
        status = "PASS" if ok else ("WARN" if soft else "FAIL")
        _VERDICTS.append((criterion, status, detail))
        print(f"[{status}] {criterion}: {detail}")
        if not soft:
            assert ok, f"{criterion}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(_VERDICTS, key=lambda v: int(v[0].split()[1])):
        terminalreporter.write_line(f"[{status}] {criterion}: {detail}")
