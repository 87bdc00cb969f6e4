"""Solvers for ``IntegerProgram``.

The built-in backend is a best-first branch and bound over the binaries,
bounding with LP relaxations solved by HiGHS through ``highspy``.  Child
nodes restart the dual simplex from the parent's basis.

Every incumbent goes through the program's completion hook when it has
one: the continuous part of a candidate is mapped to the binary pattern it
actually induces, then the pattern is re-optimised as an LP with a small
inward margin on the rows that define it.  The returned point therefore
satisfies ``objective(x) == evaluate(beta(x))`` for the objective the
program encodes, not just up to the LP's feasibility tolerance.
"""

from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass
from typing import Protocol

import highspy
import numpy as np

from .program import IntegerProgram

__all__ = [
    "SolveResult",
    "SolverBackend",
    "BranchAndBound",
    "HighsMilpBackend",
    "LpEngine",
    "solve",
    "solve_lp_relaxation",
    "BACKENDS",
]

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INCUMBENT = "feasible-incumbent"
INFEASIBLE = "infeasible"
TIME_LIMIT = "time-limit"

INT_TOL = 1e-6
FEAS_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class SolveResult:
    status: str
    x: np.ndarray | None
    beta: np.ndarray | None
    objective: float
    best_bound: float
    nodes: int = 0
    wall_time: float = 0.0
    relaxed: bool = False
    regularization: float = 0.0
    binaries: np.ndarray | None = None

    @property
    def has_solution(self) -> bool:
        return self.x is not None

    @property
    def unregularized_objective(self) -> float:
        return self.objective + self.regularization


def _result(program: IntegerProgram, status: str, x, objective: float, bound: float,
            nodes: int = 0, wall: float = 0.0, relaxed: bool = False) -> SolveResult:
    beta = None if x is None else program.beta(x)
    reg = 0.0 if x is None else program.regularization_value(x)
    bins = None if x is None else np.asarray(x)[program.integer]
    return SolveResult(status, x, beta, float(objective), float(bound), nodes, wall, relaxed, reg, bins)


class LpEngine:
    """One HiGHS instance holding the program's LP relaxation."""

    def __init__(self, program: IntegerProgram) -> None:
        self.program = program
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("presolve", "off")
        h.setOptionValue("primal_feasibility_tolerance", 1e-9)
        h.setOptionValue("dual_feasibility_tolerance", 1e-9)
        h.setOptionValue("threads", 1)
        lp = highspy.HighsLp()
        n, m = program.num_vars, program.num_rows
        lp.num_col_ = n
        lp.num_row_ = m
        lp.col_cost_ = program.cost.astype(float)
        lp.col_lower_ = program.lower.astype(float)
        lp.col_upper_ = program.upper.astype(float)
        lp.row_lower_ = program.row_lower.astype(float)
        lp.row_upper_ = program.row_upper.astype(float)
        A = program.A.tocsc()
        A.sort_indices()
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = A.indptr.astype(np.int32)
        lp.a_matrix_.index_ = A.indices.astype(np.int32)
        lp.a_matrix_.value_ = A.data.astype(float)
        lp.sense_ = highspy.ObjSense.kMaximize
        lp.offset_ = float(program.offset)
        h.passModel(lp)
        self.h = h
        self.cols = np.arange(n, dtype=np.int32)
        self.solves = 0
        self.reduced_costs = np.zeros(n)

    def solve(self, lower: np.ndarray, upper: np.ndarray, basis=None,
              time_limit: float | None = None):
        """Return (status, x, objective, basis) for the given column bounds."""
        h = self.h
        n = self.program.num_vars
        h.changeColsBounds(n, self.cols, np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))
        if basis is not None:
            h.setBasis(basis)
        # HiGHS measures its time limit against the instance's cumulative run time
        limit = h.getRunTime() + float(time_limit) if time_limit is not None else np.inf
        h.setOptionValue("time_limit", limit)
        h.run()
        self.solves += 1
        status = h.getModelStatus()
        if status == highspy.HighsModelStatus.kOptimal:
            sol = h.getSolution()
            x = np.asarray(sol.col_value, dtype=float)
            self.reduced_costs = np.asarray(sol.col_dual, dtype=float)
            return OPTIMAL, x, float(h.getInfo().objective_function_value), h.getBasis()
        if status in (highspy.HighsModelStatus.kInfeasible,
                      highspy.HighsModelStatus.kUnboundedOrInfeasible):
            return INFEASIBLE, None, -np.inf, None
        if status == highspy.HighsModelStatus.kTimeLimit:
            return TIME_LIMIT, None, np.inf, None
        # numerical trouble: retry once from scratch before giving up
        h.clearSolver()
        h.run()
        if h.getModelStatus() == highspy.HighsModelStatus.kOptimal:
            sol = h.getSolution()
            x = np.asarray(sol.col_value, dtype=float)
            self.reduced_costs = np.asarray(sol.col_dual, dtype=float)
            return OPTIMAL, x, float(h.getInfo().objective_function_value), h.getBasis()
        log.warning("LP solve ended with status %s", h.getModelStatus())
        return "error", None, np.inf, None

    def polish(self, x: np.ndarray, margin: float, time_limit: float | None = None):
        """Re-solve with every binary fixed to round(x); margin rows pulled inward."""
        prog = self.program
        lo = prog.lower.copy()
        hi = prog.upper.copy()
        idx = np.flatnonzero(prog.integer)
        v = np.round(x[idx])
        lo[idx] = v
        hi[idx] = v
        rows, new_lo, new_hi = [], [], []
        if margin > 0:
            for mr in prog.margin_rows:
                if all(round(x[var]) == val for var, val in mr.conditions):
                    rows.append(mr.row)
                    rl, ru = prog.row_lower[mr.row], prog.row_upper[mr.row]
                    new_lo.append(rl + margin if mr.side > 0 else rl)
                    new_hi.append(ru - margin if mr.side < 0 else ru)
        h = self.h
        if rows:
            r = np.asarray(rows, dtype=np.int32)
            h.changeRowsBounds(r.size, r, np.asarray(new_lo), np.asarray(new_hi))
        try:
            status, xs, obj, _ = self.solve(lo, hi, time_limit=time_limit)
        finally:
            if rows:
                h.changeRowsBounds(r.size, r, prog.row_lower[r], prog.row_upper[r])
        if status != OPTIMAL:
            return None
        xs = xs.copy()
        xs[idx] = v
        return xs


class BoundPropagator:
    """Activity-based bound tightening over the rows of a program.

    Each round computes every row's minimum and maximum activity under the
    current bounds and derives implied bounds for each of its columns;
    binaries are rounded inward.  Rounds repeat until nothing moves by more
    than a small tolerance.  This is the only presolve-style reduction the
    built-in solver performs.
    """

    def __init__(self, program: IntegerProgram, max_rounds: int = 25, tol: float = 1e-7) -> None:
        A = program.A.tocoo()
        self.rows = A.row.astype(np.int64)
        self.cols = A.col.astype(np.int64)
        self.vals = A.data.astype(float)
        self.pos = self.vals > 0
        self.m = program.num_rows
        self.n = program.num_vars
        self.row_lower = program.row_lower
        self.row_upper = program.row_upper
        self.integer = program.integer
        self.max_rounds = max_rounds
        self.tol = tol

    def __call__(self, lower: np.ndarray, upper: np.ndarray):
        """Tightened (lower, upper), or None when the bounds are infeasible."""
        lo = np.array(lower, dtype=float)
        hi = np.array(upper, dtype=float)
        r, c, a, pos = self.rows, self.cols, self.vals, self.pos
        if r.size == 0:
            return lo, hi
        big = 1e12
        for _ in range(self.max_rounds):
            lo_c = np.maximum(lo[c], -big)
            hi_c = np.minimum(hi[c], big)
            tmin = np.where(pos, a * lo_c, a * hi_c)
            tmax = np.where(pos, a * hi_c, a * lo_c)
            amin = np.bincount(r, tmin, self.m)
            amax = np.bincount(r, tmax, self.m)
            slack = self.tol * (1.0 + np.abs(self.row_upper))
            if np.any(amin > self.row_upper + slack) or \
                    np.any(amax < self.row_lower - self.tol * (1.0 + np.abs(self.row_lower))):
                return None
            # residual activity of the other columns in each row
            rest_min = amin[r] - tmin
            rest_max = amax[r] - tmax
            with np.errstate(invalid="ignore", divide="ignore"):
                up_from_ru = (self.row_upper[r] - rest_min) / a  # a x <= ru - rest_min
                lo_from_rl = (self.row_lower[r] - rest_max) / a  # a x >= rl - rest_max
            new_hi = np.full(self.n, np.inf)
            new_lo = np.full(self.n, -np.inf)
            np.minimum.at(new_hi, c[pos], up_from_ru[pos])
            np.maximum.at(new_lo, c[pos], lo_from_rl[pos])
            np.minimum.at(new_hi, c[~pos], lo_from_rl[~pos])
            np.maximum.at(new_lo, c[~pos], up_from_ru[~pos])
            new_hi = np.where(np.isfinite(new_hi), new_hi, np.inf)
            new_lo = np.where(np.isfinite(new_lo), new_lo, -np.inf)
            ints = self.integer
            new_hi[ints] = np.floor(new_hi[ints] + 1e-6)
            new_lo[ints] = np.ceil(new_lo[ints] - 1e-6)
            cont = ~ints
            # keep a hair of slack on continuous bounds so the LP stays well posed
            new_hi[cont] += 1e-9 * (1.0 + np.abs(new_hi[cont]))
            new_lo[cont] -= 1e-9 * (1.0 + np.abs(new_lo[cont]))
            scale = self.tol * (1.0 + np.abs(hi))
            tighter_hi = new_hi < hi - scale
            scale = self.tol * (1.0 + np.abs(lo))
            tighter_lo = new_lo > lo + scale
            if not (tighter_hi.any() or tighter_lo.any()):
                break
            hi = np.where(tighter_hi, new_hi, hi)
            lo = np.where(tighter_lo, new_lo, lo)
            if np.any(lo > hi + 1e-6):
                return None
            hi = np.maximum(hi, lo)
        return lo, hi


class _Incumbent:
    """Best known feasible point, improved through completion and polishing."""

    def __init__(self, program: IntegerProgram, engine: LpEngine, margin: float) -> None:
        self.program = program
        self.engine = engine
        self.margin = margin
        self.x: np.ndarray | None = None
        self.value = -np.inf

    def _offer(self, x: np.ndarray) -> bool:
        if not self.program.is_feasible(x, FEAS_TOL):
            return False
        val = self.program.objective(x)
        if val > self.value + 1e-9 * max(1.0, abs(self.value)) or self.x is None:
            self.x, self.value = x, val
            return True
        return False

    def consider(self, x: np.ndarray, force_polish: bool = False) -> bool:
        prog = self.program
        if prog.completion is None:
            for margin in (0.0,):
                xp = self.engine.polish(x, margin)
                if xp is not None:
                    return self._offer(xp)
            return False
        # the binaries of x come first: polishing them keeps a solver's
        # point inside its cell, while completing a boundary point first
        # can land in a worse neighbouring cell
        improved = False
        x = np.asarray(x, dtype=float)
        if force_polish and prog.is_feasible(x, FEAS_TOL):
            xp = self.engine.polish(x, self.margin)
            if xp is not None:
                improved |= self._offer(prog.completion(xp))
        xc = prog.completion(x)
        for _ in range(4):
            gained = self._offer(xc)
            improved |= gained
            if not (gained or force_polish):
                break
            force_polish = False
            xp = self.engine.polish(xc, self.margin)
            if xp is None:
                xp = self.engine.polish(xc, 0.0)
            if xp is None:
                break
            xc = prog.completion(xp)
        return improved


class SolverBackend(Protocol):
    name: str

    def solve(self, program: IntegerProgram, time_limit: float | None = None,
              node_limit: int | None = None, warm_start: np.ndarray | None = None) -> SolveResult:
        ...


def _warm_vector(program: IntegerProgram, warm_start) -> np.ndarray | None:
    if warm_start is None:
        return None
    w = np.asarray(warm_start, dtype=float).ravel()
    if w.size == program.num_vars:
        return w
    if program.beta_shape is not None and w.size == int(np.prod(program.beta_shape)):
        x = np.zeros(program.num_vars)
        if "beta" in program.groups:
            x[program.groups["beta"]] = w
        else:
            x[program.groups["beta_pos"]] = np.maximum(w, 0)
            x[program.groups["beta_neg"]] = np.maximum(-w, 0)
        return x
    raise ValueError("warm start has the wrong length")


class BranchAndBound:
    """Best-first branch and bound on the binaries.

    Branches on the most fractional binary, ties to the lowest index.  Open
    nodes are ordered by parent bound, then depth (deeper first), then
    creation order, so runs are reproducible.
    """

    name = "builtin"

    def __init__(self, gap: float = 1e-9, margin: float = 1e-6, rounding: bool = False,
                 propagate: bool = False) -> None:
        self.propagate = propagate
        self.gap = gap
        self.margin = margin
        self.rounding = rounding

    def _reduced_cost_fixing(self, idx, x, lo, hi, d, bound, incumbent, fvars, fvals):
        """Fix free binaries whose move off their bound cannot beat the incumbent.

        For a binary at a bound of the node LP, flipping it costs at least its
        reduced cost, so when ``bound - |d_k| <= incumbent`` the subtree can
        keep it at that bound.
        """
        cut = incumbent + self.gap * max(1.0, abs(incumbent))
        at_lo = (x[idx] <= lo[idx] + INT_TOL) & (d[idx] < 0) & (bound + d[idx] <= cut)
        at_hi = (x[idx] >= hi[idx] - INT_TOL) & (d[idx] > 0) & (bound - d[idx] <= cut)
        fix = idx[at_lo | at_hi]
        if fix.size == 0:
            return fvars, fvals
        vals = np.where(at_lo[at_lo | at_hi], lo[fix], hi[fix])
        return fvars + tuple(int(k) for k in fix), fvals + tuple(float(v) for v in vals)

    def solve(self, program: IntegerProgram, time_limit: float | None = None,
              node_limit: int | None = None, warm_start=None) -> SolveResult:
        start = time.perf_counter()
        deadline = None if time_limit is None else start + float(time_limit)
        engine = LpEngine(program)
        inc = _Incumbent(program, engine, self.margin)
        warm = _warm_vector(program, warm_start)
        if warm is not None:
            inc.consider(warm, force_polish=True)

        propagator = BoundPropagator(program)
        base_lo = program.lower.copy()
        base_hi = program.upper.copy()
        counter = 0
        heap: list = [(-np.inf, 0, 0, (), (), None)]
        nodes = 0
        open_bound = -np.inf
        stopped = False

        def prunable(bound: float) -> bool:
            return inc.x is not None and bound <= inc.value + self.gap * max(1.0, abs(inc.value)) + 1e-9

        while heap:
            if (deadline is not None and time.perf_counter() > deadline) or \
                    (node_limit is not None and nodes >= node_limit):
                stopped = True
                break
            neg_bound, _, _, fvars, fvals, basis = heapq.heappop(heap)
            parent_bound = -neg_bound
            if prunable(parent_bound):
                continue
            lo = base_lo.copy()
            hi = base_hi.copy()
            if fvars:
                fv = np.asarray(fvars)
                lo[fv] = fvals
                hi[fv] = fvals
            if self.propagate:
                tightened = propagator(lo, hi)
                if tightened is None:
                    nodes += 1
                    continue
                lo, hi = tightened
            remaining = None if deadline is None else max(deadline - time.perf_counter(), 1e-3)
            status, x, obj, nb = engine.solve(lo, hi, basis, remaining)
            nodes += 1
            if status == TIME_LIMIT:
                heapq.heappush(heap, (neg_bound, counter, 0, fvars, fvals, basis))
                stopped = True
                break
            if status != OPTIMAL:
                continue
            bound = min(obj, parent_bound)
            if prunable(bound):
                continue
            idx = np.flatnonzero(program.integer & (lo < hi))
            frac = np.abs(x[idx] - np.round(x[idx]))
            integral = not np.any(frac > INT_TOL)
            inc.consider(x, force_polish=integral)
            if not integral and self.rounding:
                xr = engine.polish(x, 0.0)
                if xr is not None:
                    inc.consider(xr)
            if prunable(bound):
                continue
            if inc.x is not None:
                fvars, fvals = self._reduced_cost_fixing(
                    idx, x, lo, hi, engine.reduced_costs, bound, inc.value, fvars, fvals)
            if integral:
                # the LP point is integral; if its exact re-solve did not close
                # the node, keep splitting on the largest residual deviation
                if frac.size == 0 or frac.max() == 0.0:
                    xp = engine.polish(x, 0.0)
                    if xp is not None:
                        # through the completion hook: a zero-margin point can
                        # sit on a switching surface the pattern disagrees with
                        inc.consider(xp)
                    continue
                k = int(idx[np.argmax(frac)])
            else:
                dist = np.abs(x[idx] - 0.5)
                k = int(idx[np.argmin(dist)])  # argmin returns the lowest index on ties
            first = 1.0 if x[k] >= 0.5 else 0.0
            depth = len(fvars) + 1
            for val in (first, 1.0 - first):
                counter += 1
                heapq.heappush(heap, (-bound, -depth, counter, fvars + (k,), fvals + (val,), nb))
        wall = time.perf_counter() - start
        if heap and stopped:
            open_bound = max(-item[0] for item in heap)
        if not stopped or not heap:
            if inc.x is None:
                return _result(program, INFEASIBLE, None, np.nan, -np.inf, nodes, wall)
            return _result(program, OPTIMAL, inc.x, inc.value, inc.value, nodes, wall)
        bound = max(open_bound, inc.value)
        if inc.x is None:
            return _result(program, TIME_LIMIT, None, np.nan, bound, nodes, wall)
        return _result(program, INCUMBENT, inc.x, inc.value, bound, nodes, wall)


class HighsMilpBackend:
    """HiGHS' own MIP solver through ``scipy.optimize.milp``."""

    name = "highs"

    def __init__(self, margin: float = 1e-6) -> None:
        self.margin = margin

    def solve(self, program: IntegerProgram, time_limit: float | None = None,
              node_limit: int | None = None, warm_start=None) -> SolveResult:
        from scipy.optimize import Bounds, LinearConstraint, milp

        start = time.perf_counter()
        options = {"disp": False, "mip_rel_gap": 1e-9}
        if time_limit is not None:
            options["time_limit"] = float(time_limit)
        if node_limit is not None:
            options["node_limit"] = int(node_limit)
        constraints = LinearConstraint(program.A, program.row_lower, program.row_upper) \
            if program.num_rows else ()
        res = milp(-program.cost, integrality=program.integer.astype(int),
                   bounds=Bounds(program.lower, program.upper),
                   constraints=constraints, options=options)
        engine = LpEngine(program)
        inc = _Incumbent(program, engine, self.margin)
        warm = _warm_vector(program, warm_start)
        if warm is not None:
            inc.consider(warm, force_polish=True)
        if res.x is not None:
            inc.consider(np.asarray(res.x), force_polish=True)
        wall = time.perf_counter() - start
        dual = getattr(res, "mip_dual_bound", None)
        bound = -float(dual) + program.offset if dual is not None and np.isfinite(dual) else np.inf
        if res.status == 0 and inc.x is not None:
            return _result(program, OPTIMAL, inc.x, inc.value, inc.value, 0, wall)
        if res.status == 2 and inc.x is None:
            return _result(program, INFEASIBLE, None, np.nan, -np.inf, 0, wall)
        if inc.x is None:
            return _result(program, TIME_LIMIT, None, np.nan, bound, 0, wall)
        return _result(program, INCUMBENT, inc.x, inc.value, max(bound, inc.value), 0, wall)


BACKENDS = {"builtin": BranchAndBound, "highs": HighsMilpBackend}


def solve(program: IntegerProgram, time_limit: float | None = None, backend: str | SolverBackend = "builtin",
          node_limit: int | None = None, warm_start=None) -> SolveResult:
    """Solve ``program`` to optimality or until a limit is reached."""
    if isinstance(backend, str):
        try:
            backend = BACKENDS[backend]()
        except KeyError:
            raise ValueError(f"unknown solver backend {backend!r}") from None
    return backend.solve(program, time_limit=time_limit, node_limit=node_limit, warm_start=warm_start)


def solve_lp_relaxation(program: IntegerProgram) -> SolveResult:
    """LP relaxation with every binary in [0, 1]."""
    start = time.perf_counter()
    engine = LpEngine(program)
    status, x, obj, _ = engine.solve(program.lower, program.upper)
    wall = time.perf_counter() - start
    if status != OPTIMAL:
        return _result(program, INFEASIBLE if status == INFEASIBLE else status, None, np.nan,
                       -np.inf, 1, wall, relaxed=True)
    return _result(program, OPTIMAL, x, obj, obj, 1, wall, relaxed=True)
