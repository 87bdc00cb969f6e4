"""Integer programs for the surrogate objective and the solvers that handle them."""

from .formulation import Bands, band_fixings, build_full_mip, build_restricted_mip, relevance
from .program import IntegerProgram, MarginRow, ProgramBuilder
from .solver import (
    BACKENDS,
    BranchAndBound,
    HighsMilpBackend,
    SolveResult,
    solve,
    solve_lp_relaxation,
)

__all__ = [
    "BACKENDS",
    "Bands",
    "BranchAndBound",
    "HighsMilpBackend",
    "IntegerProgram",
    "MarginRow",
    "ProgramBuilder",
    "SolveResult",
    "band_fixings",
    "build_full_mip",
    "build_restricted_mip",
    "relevance",
    "solve",
    "solve_lp_relaxation",
]
