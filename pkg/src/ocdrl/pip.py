"""Progressive integer programming.

Each iteration evaluates the margins at the incumbent beta, keeps as
binaries only the indicators whose margins fall inside quantile bands
around zero, fixes the rest at their current value, and solves the
resulting restricted program warm-started at the incumbent.  The band
ratio grows when an iteration brings no improvement and shrinks after a
successful one.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .hscop import HscopProblem, eval_margins, eval_pattern
from .mip import Bands, build_restricted_mip, solve

__all__ = [
    "PipConfig",
    "PipIteration",
    "PipTrace",
    "BinaryPattern",
    "build_bands",
    "nearest_rank",
    "psi",
    "run_pip",
    "induced_binary_pattern",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipConfig:
    """Ratio schedule, stopping rules and subproblem budget.

    Subproblems stop at ``node_limit`` nodes by default, which keeps runs
    reproducible; a ``time_limit`` can be set in addition.
    """

    initial_ratio: float = 0.05
    max_ratio: float = 0.5
    min_ratio: float = 0.01
    expand: float = 0.05
    shrink: float = 0.02
    max_iterations: int = 15
    max_stalls: int = 3
    time_limit: float | None = None
    node_limit: int | None = 2000
    eps: float | None = None
    radius: float = 10.0
    lam: float = 0.0
    backend: str = "builtin"

    def __post_init__(self) -> None:
        if not 0 <= self.min_ratio <= self.initial_ratio <= self.max_ratio <= 1:
            raise ValueError("ratios must satisfy 0 <= r_min <= r0 <= r_max <= 1")
        if self.max_iterations < 1 or self.max_stalls < 1:
            raise ValueError("iteration caps must be positive")
        if self.expand < 0 or self.shrink < 0:
            raise ValueError("ratio steps must be nonnegative")
        if self.time_limit is not None and not self.time_limit > 0:
            raise ValueError("time limit must be positive")
        if self.node_limit is not None and self.node_limit < 1:
            raise ValueError("node limit must be positive")
        if self.lam < 0:
            raise ValueError("regularization weight must be nonnegative")
        if not self.radius > 0:
            raise ValueError("beta box radius must be positive")


@dataclass(frozen=True)
class PipIteration:
    nu: int
    ratio: float
    retained_z1: int
    retained_z2: int
    retained_binaries: int
    bands: tuple[float, float, float, float]
    objective: float
    candidate: float
    accepted: bool
    status: str
    nodes: int
    wall_time: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        out = asdict(self)
        out["bands"] = list(self.bands)
        if not timing:
            del out["wall_time"]
        return out


@dataclass(frozen=True)
class PipTrace:
    initial_objective: float
    iterations: tuple[PipIteration, ...] = field(default_factory=tuple)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([self.initial_objective] + [it.objective for it in self.iterations])

    @property
    def final_objective(self) -> float:
        return float(self.objectives[-1])

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.objectives) >= 0))

    def __len__(self) -> int:
        return len(self.iterations)

    def to_jsonl(self, timing: bool = False) -> str:
        lines = [json.dumps({"nu": 0, "objective": self.initial_objective})]
        lines += [json.dumps(it.to_dict(timing)) for it in self.iterations]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class BinaryPattern:
    """Indicator values induced by one beta (w1 = w2 = 1 below m*)."""

    z1: np.ndarray
    z2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


def nearest_rank(values: np.ndarray, r: float, upper: bool = False) -> float:
    """Nearest-rank r-quantile from below (or above); 0 for r = 0 or no values."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    k = int(np.ceil(r * v.size - 1e-12))
    if v.size == 0 or k <= 0:
        return 0.0
    k = min(k, v.size)
    return float(v[v.size - k] if upper else v[k - 1])


def _coin(s: int, j: int) -> bool:
    # deterministic side for exact-zero margins
    return bool(zlib.crc32(f"{s},{j}".encode()) & 1)


def _split(values: np.ndarray, keys: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    pos = values > 0
    neg = values < 0
    for k in np.flatnonzero(values == 0):
        if _coin(*keys[k]):
            pos[k] = True
        else:
            neg[k] = True
    return values[pos], values[neg]


def build_bands(problem: HscopProblem, beta: np.ndarray, r: float, eps: float | None = None) -> Bands:
    """Quantile bands of the margins h1 and h2 at ``beta``.

    Margins of each family are split into a positive and a negative set;
    delta_plus is the nearest-rank r-quantile of the positive set from
    below, delta_minus the magnitude of the r-quantile of the negative set
    from above.  Indicators whose margin lies in [-delta_minus, delta_plus]
    stay free in the restricted program.
    """
    if not 0 <= r <= 1:
        raise ValueError("band ratio must lie in [0, 1]")
    m = eval_margins(problem, beta, eps)
    n, J = problem.n, problem.num_treatments
    h1 = m.lower.ravel()
    keys1 = [(s, j) for s in range(n) for j in range(J)]
    h2 = m.upper[np.arange(n), problem.arms]
    keys2 = [(s, J) for s in range(n)]
    p1, n1 = _split(h1, keys1)
    p2, n2 = _split(h2, keys2)
    # exact zeros sit inside every band; letting them take quantile ranks
    # collapses the band to [0, 0] at a tie such as beta = 0
    p1, n1, p2, n2 = (v[v != 0] for v in (p1, n1, p2, n2))
    return Bands(
        lower1=-nearest_rank(n1, r, upper=True),
        upper1=nearest_rank(p1, r),
        lower2=-nearest_rank(n2, r, upper=True),
        upper2=nearest_rank(p2, r),
    )


def psi(problem: HscopProblem, beta: np.ndarray, lam: float = 0.0) -> float:
    """Regularised surrogate value psi_eps(beta) - lam |beta|_1."""
    beta = np.asarray(beta, dtype=float)
    return eval_pattern(problem, beta).value - lam * float(np.abs(beta).sum())


def induced_binary_pattern(problem: HscopProblem, beta: np.ndarray, eps: float | None = None) -> BinaryPattern:
    p = eval_pattern(problem, beta, eps)
    return BinaryPattern(p.z1, p.z2, p.w1, p.w2)


def _retained(program) -> tuple[int, int, int]:
    return (int(program.group("z1").size), int(program.group("z2").size), program.num_binaries)


def run_pip(
    problem: HscopProblem, config: PipConfig, beta0: np.ndarray
) -> tuple[np.ndarray, PipTrace]:
    """Progressive integer programming from ``beta0``; returns (best beta, trace)."""
    if config.eps is not None:
        problem = problem.with_eps(config.eps)
    J, p = problem.num_treatments, problem.dim
    beta = np.asarray(beta0, dtype=float).reshape(J, p)
    if np.any(np.abs(beta) > config.radius + 1e-12):
        raise ValueError("initial beta lies outside the beta box")
    best = initial = psi(problem, beta, config.lam)
    r = config.initial_ratio
    stalls = 0
    records: list[PipIteration] = []
    for nu in range(1, config.max_iterations + 1):
        start = time.perf_counter()
        used = r
        bands = build_bands(problem, beta, used)
        program = build_restricted_mip(problem, beta, bands, config.radius, config.lam)
        res = solve(program, time_limit=config.time_limit, backend=config.backend,
                    node_limit=config.node_limit, warm_start=beta.ravel())
        candidate = -np.inf
        if res.has_solution:
            cand_beta = np.clip(res.beta, -config.radius, config.radius)
            candidate = psi(problem, cand_beta, config.lam)
        tol = 1e-9 * max(1.0, abs(best))
        accepted = candidate > best + tol
        if accepted:
            beta, best = cand_beta, candidate
            r = max(r - config.shrink, config.min_ratio)
            stalls = 0
        else:
            # equal, worse or missing candidates all count as no change
            r = min(r + config.expand, config.max_ratio)
            stalls += 1
        z1n, z2n, nb = _retained(program)
        records.append(PipIteration(
            nu=nu, ratio=float(used), retained_z1=z1n, retained_z2=z2n, retained_binaries=nb,
            bands=bands.as_tuple(), objective=float(best), candidate=float(candidate),
            accepted=bool(accepted), status=res.status, nodes=int(res.nodes),
            wall_time=time.perf_counter() - start,
        ))
        log.info("pip iteration %d: psi=%.6g status=%s binaries=%d", nu, best, res.status, nb)
        if stalls >= config.max_stalls:
            break
    return beta, PipTrace(float(initial), tuple(records))
