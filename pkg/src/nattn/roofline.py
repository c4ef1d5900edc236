"""Analytical FLOP/byte model for self attention and neighborhood attention.

Only the two matrix products are counted (softmax is ignored). ``n`` is the
token count, ``l`` the window volume (``n`` for self attention), ``d`` the
head dimension and ``s`` the element size in bytes.

=========================  ===============================  ===================
case                       bytes                            intensity as n->inf
=========================  ===============================  ===================
unfused                    (4bhnd + 2bhnl) * s              2ld / ((2d + l) s)
fused                      4bhnd * s                        l / s
=========================  ===============================  ===================

For self attention ``l = n``, so the unfused limit becomes ``2d/s`` and the fused
intensity grows without bound. The unfused neighborhood byte count substitutes
``l`` for ``n`` in the self-attention formula; it is a modeling extension.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from nattn.core import NaParams, ProblemSpec

UNBOUNDED = math.inf


@dataclass(frozen=True)
class CostModelInput:
    problem: ProblemSpec
    params: NaParams | None = None
    dtype_size: int = 4
    fused: bool = False

    def __post_init__(self):
        if self.dtype_size not in (2, 4, 8):
            raise ValueError(f"dtype_size must be 2, 4 or 8 bytes, got {self.dtype_size}")

    @property
    def is_self_attention(self) -> bool:
        return self.params is None

    @property
    def window_volume(self) -> int:
        return self.problem.num_tokens if self.params is None else self.params.window_volume


@dataclass(frozen=True)
class RooflineReport:
    flops: int
    bytes: int
    intensity: float
    intensity_limit: float

    def as_record(self) -> dict:
        return asdict(self)


def attention_flops(inp: CostModelInput) -> int:
    p = inp.problem
    return 4 * p.batch * p.heads * p.num_tokens * inp.window_volume * p.head_dim


def attention_bytes(inp: CostModelInput) -> int:
    p = inp.problem
    bhn = p.batch * p.heads * p.num_tokens
    if inp.fused:
        return 4 * bhn * p.head_dim * inp.dtype_size
    return (4 * bhn * p.head_dim + 2 * bhn * inp.window_volume) * inp.dtype_size


def intensity(inp: CostModelInput) -> float:
    return attention_flops(inp) / attention_bytes(inp)


def intensity_limit(inp: CostModelInput) -> float:
    """Arithmetic intensity as the token count grows with everything else fixed."""
    d, s = inp.problem.head_dim, inp.dtype_size
    if inp.is_self_attention:
        return UNBOUNDED if inp.fused else 2 * d / s
    window = inp.params.window_volume
    if inp.fused:
        return window / s
    return 2 * window * d / ((2 * d + window) * s)


def roofline(inp: CostModelInput) -> RooflineReport:
    flops, nbytes = attention_flops(inp), attention_bytes(inp)
    return RooflineReport(flops, nbytes, flops / nbytes, intensity_limit(inp))
