"""Exception hierarchy shared by every nattn module."""

from __future__ import annotations


class NattnError(Exception):
    """Base class for all errors raised by nattn."""


class InvalidParams(NattnError, ValueError):
    """A problem/parameter combination violates a neighborhood-attention constraint."""


class RankMismatch(InvalidParams):
    pass


class EvenWindowNonCausal(InvalidParams):
    pass


class WindowExceedsExtent(InvalidParams):
    pass


class BadDilation(InvalidParams):
    pass


class BadWindow(InvalidParams):
    pass


class InvalidProblem(InvalidParams):
    pass


class ShapeMismatch(NattnError, ValueError):
    pass


class NonFiniteInput(NattnError, ValueError):
    pass


class ProblemTooLargeForOracle(NattnError, ValueError):
    pass


class TileConfigInvalid(NattnError, ValueError):
    pass


class NoCandidates(NattnError, RuntimeError):
    pass


class CorrectnessGate(NattnError, RuntimeError):
    """A strategy disagreed with the reference during a benchmark's correctness gate."""


class EmptyInput(NattnError, ValueError):
    pass


class InvalidGrid(NattnError, ValueError):
    """A benchmark grid description is malformed."""
