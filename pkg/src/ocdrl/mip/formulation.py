"""Integer programs for the surrogate objective.

Encoding summary (ranks s are 1-based, N samples, m* the pruning index):

* ``z1[s,j] = 1`` only if every piece of h1_j is >= 0:
  piece >= -B (1 - z1).  At most one z1 per sample can be 1 when eps > 0,
  which is added as a valid row.
* ``z2[s] = 0`` only if some piece of h2_{D_s} is <= 0.  With a single
  piece this is piece <= B z2; with several pieces selection binaries
  ``sel`` pick the piece that is nonpositive.
* ``F1_m`` / ``F2_m`` equal Phi^1_m / Phi^2_m through the recursion
  F_m = F_{m+1} + 2(N - m) + 1 - 2 C_m^2 z_m, F_{N+1} = 0.
* ``P_s <= min_{m* <= t <= s} F2_t`` (a chain of upper bounds) and
  ``V_s >= min_{s < m <= N+1} F1_m`` (a chain with selection binaries
  ``u1``).  Then ``w1_s = 1`` forces P_s - V_s >= 0.
* ``Q_s >= min_{m* <= t <= s} F1_t`` (selection binaries ``u2``) and
  ``R_s <= min_{s < m <= N+1} F2_m``.  Then ``w2_s = 0`` forces
  Q_s - R_s <= 0.
* Products with the step indicators are linearised with continuous
  y1 <= z1, y1 <= w1 (positive weight) and y2 >= z2 + w2 - 1 (negative
  weight).

The selection chains use O(N) binaries instead of one selection binary
per (s, m) pair.

Index sets that cannot change the objective are dropped: z1[s,j] when
mu_hat[s,j] = 0 and the entry is not the logged arm of a sample with a
positive correction or inside the clipping window, and z2[s] when the
sample has no negative correction and lies below m*.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..hscop import HscopProblem, eval_margins, eval_pattern
from .program import IntegerProgram, MarginRow, ProgramBuilder

__all__ = [
    "Bands",
    "band_fixings",
    "build_full_mip",
    "build_restricted_mip",
    "h_big_m",
    "relevance",
]

DEFAULT_RADIUS = 10.0


@dataclass(frozen=True)
class Bands:
    """Band cutoffs (delta1_minus, delta1_plus, delta2_minus, delta2_plus)."""

    lower1: float
    upper1: float
    lower2: float
    upper2: float

    def __post_init__(self) -> None:
        if min(self.lower1, self.upper1, self.lower2, self.upper2) < 0:
            raise ValueError("bands must be nonnegative")

    @classmethod
    def everything(cls) -> "Bands":
        return cls(np.inf, np.inf, np.inf, np.inf)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lower1, self.upper1, self.lower2, self.upper2)


def h_big_m(problem: HscopProblem, radius: float) -> float:
    """Bound on |h| pieces over the beta box of sup-norm ``radius``."""
    x_l1 = np.abs(problem.X).sum(axis=1)
    b = problem.base_scores
    return float(x_l1.max(initial=0.0) * 2 * radius + 2 * np.abs(b).max(initial=0.0)
                 + problem.eps + 1.0)


def relevance(problem: HscopProblem) -> tuple[np.ndarray, np.ndarray]:
    """Masks of the z1 (N, J) and z2 (N,) indicators that affect the objective."""
    n, J = problem.n, problem.num_treatments
    rows = np.arange(n)
    in_window = np.arange(1, n + 1) >= problem.m_star
    rel1 = problem.mu != 0
    rel1[rows, problem.arms] |= (problem.pos > 0) | in_window
    rel2 = (problem.neg > 0) | in_window
    return rel1, rel2


def band_fixings(
    problem: HscopProblem, beta_bar: np.ndarray, bands: Bands
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed values (-1 = free) of z1 and z2 at ``beta_bar`` for ``bands``."""
    m = eval_margins(problem, beta_bar)
    rows = np.arange(problem.n)
    h1 = m.lower
    h2 = m.upper[rows, problem.arms]
    fix1 = np.full(h1.shape, -1, dtype=np.int64)
    fix1[h1 > bands.upper1] = 1
    fix1[h1 < -bands.lower1] = 0
    fix2 = np.full(h2.shape, -1, dtype=np.int64)
    fix2[h2 > bands.upper2] = 1
    fix2[h2 < -bands.lower2] = 0
    return fix1, fix2


def build_full_mip(problem: HscopProblem, radius: float = DEFAULT_RADIUS, lam: float = 0.0) -> IntegerProgram:
    """Program whose optimum is max over the beta box of psi_eps - lam |beta|_1."""
    return _build(problem, radius, lam, None, None, None)


def build_restricted_mip(
    problem: HscopProblem,
    beta_bar: np.ndarray,
    bands: Bands,
    radius: float = DEFAULT_RADIUS,
    lam: float = 0.0,
) -> IntegerProgram:
    """Program with indicators outside the bands fixed at their value at ``beta_bar``.

    Fixed z1 = 1 keeps every h1 piece >= 0, fixed z2 = 0 keeps the piece
    that attains h2 at ``beta_bar`` <= 0; the other two cases impose
    nothing.  Fixed values enter the Phi recursions as constants.
    """
    fix1, fix2 = band_fixings(problem, beta_bar, bands)
    return _build(problem, radius, lam, fix1, fix2, np.asarray(beta_bar, dtype=float))


def _build(problem, radius, lam, fix1, fix2, beta_bar) -> IntegerProgram:
    if not radius > 0:
        raise ValueError("beta box radius must be positive")
    if lam < 0:
        raise ValueError("regularization weight must be nonnegative")
    n, J, p = problem.n, problem.num_treatments, problem.dim
    X, b, eps = problem.X, problem.base_scores, problem.eps
    arms, ms = problem.arms, problem.m_star
    big = h_big_m(problem, radius)
    reach = np.abs(X).sum(axis=1).max(initial=0.0) * 2 * radius + np.ptp(b) + eps
    if not big >= reach:  # pragma: no cover - guards the formula above
        raise ValueError("big-M validation failed")
    if fix1 is None:
        fix1 = np.full((n, J), -1, dtype=np.int64)
    if fix2 is None:
        fix2 = np.full(n, -1, dtype=np.int64)
    # per-sample reach of the beta part of any piece over the box
    reach_s = np.abs(X).sum(axis=1) * 2 * radius
    rel1, rel2 = relevance(problem)
    bar = eval_margins(problem, beta_bar) if beta_bar is not None else None
    pb = ProgramBuilder()
    margins: list[MarginRow] = []

    # beta, split into positive and negative parts when regularised
    if lam == 0:
        beta = np.array([[pb.var(f"beta[{j+1},{d+1}]", -radius, radius) for d in range(p)]
                         for j in range(J)], dtype=np.int64).reshape(J, p)
        groups = {"beta": beta.ravel()}

        def delta(s, j, i):
            return [(beta[j, d], X[s, d]) for d in range(p)] + \
                   [(beta[i, d], -X[s, d]) for d in range(p)]
    else:
        bp = np.array([[pb.var(f"beta_pos[{j+1},{d+1}]", 0.0, radius, -lam) for d in range(p)]
                       for j in range(J)], dtype=np.int64).reshape(J, p)
        bn = np.array([[pb.var(f"beta_neg[{j+1},{d+1}]", 0.0, radius, -lam) for d in range(p)]
                       for j in range(J)], dtype=np.int64).reshape(J, p)
        groups = {"beta_pos": bp.ravel(), "beta_neg": bn.ravel()}

        def delta(s, j, i):
            t = []
            for d in range(p):
                t += [(bp[j, d], X[s, d]), (bn[j, d], -X[s, d]),
                      (bp[i, d], -X[s, d]), (bn[i, d], X[s, d])]
            return t

    z1 = np.full((n, J), -1, dtype=np.int64)
    z2 = np.full(n, -1, dtype=np.int64)
    sel = np.full((n, J), -1, dtype=np.int64)
    # constant value (0/1) of the logged-arm indicators where not a variable
    z1d_const = np.zeros(n)
    z2_const = np.zeros(n)
    c = problem.weights
    cpos = c * problem.pos
    cneg = c * problem.neg

    for s in range(n):
        a = int(arms[s])
        for j in range(J):
            if not rel1[s, j]:
                continue
            state = fix1[s, j]
            pieces = [(i, b[j] - b[i] - (eps if i < j else 0.0)) for i in range(J) if i != j]
            if state == -1:
                v = pb.var(f"z1[{s+1},{j+1}]", 0, 1, problem.mu[s, j], binary=True)
                z1[s, j] = v
                for i, const in pieces:
                    # tightest valid constant: the most negative value of the piece
                    mrow = min(big, reach_s[s] - const)
                    if mrow <= 0:
                        continue
                    r = pb.row(delta(s, j, i) + [(v, -mrow)], lo=-mrow - const,
                               name=f"h1[{s+1},{j+1},{i+1}]")
                    margins.append(MarginRow(r, +1, ((v, 1),)))
            elif state == 1:
                pb.offset += problem.mu[s, j]
                for i, const in pieces:
                    r = pb.row(delta(s, j, i), lo=-const, name=f"h1fix[{s+1},{j+1},{i+1}]")
                    margins.append(MarginRow(r, +1))
                if j == a:
                    z1d_const[s] = 1.0
        free = [v for v in z1[s] if v >= 0]
        fixed_one = int(np.sum((fix1[s] == 1) & rel1[s]))
        if eps > 0 and free and (len(free) >= 2 or fixed_one):
            pb.row([(v, 1.0) for v in free], hi=1.0 - fixed_one, name=f"one[{s+1}]")

        if rel2[s]:
            state = fix2[s]
            pieces = [(i, b[a] - b[i] + (eps if i > a else 0.0)) for i in range(J) if i != a]
            if state == -1 and pieces:
                v = pb.var(f"z2[{s+1}]", 0, 1, binary=True)
                z2[s] = v
                if len(pieces) == 1:
                    i, const = pieces[0]
                    mrow = max(min(big, reach_s[s] + const), 0.0)
                    r = pb.row(delta(s, a, i) + [(v, -mrow)], hi=-const, name=f"h2[{s+1},{i+1}]")
                    margins.append(MarginRow(r, -1, ((v, 0),)))
                else:
                    picks = []
                    for i, const in pieces:
                        u = pb.var(f"sel[{s+1},{i+1}]", 0, 1, binary=True)
                        sel[s, i] = u
                        picks.append((u, 1.0))
                        mrow = max(min(big, reach_s[s] + const), 0.0)
                        r = pb.row(delta(s, a, i) + [(v, -mrow), (u, mrow)], hi=mrow - const,
                                   name=f"h2[{s+1},{i+1}]")
                        margins.append(MarginRow(r, -1, ((v, 0), (u, 1))))
                    pb.row(picks, lo=1.0, name=f"pick[{s+1}]")
            elif state == 0 and pieces:
                vals = [bar.pairwise[s, a, i] + (eps if i > a else 0.0) for i, _ in pieces]
                k = int(np.argmin(vals))
                i, const = pieces[k]
                r = pb.row(delta(s, a, i), hi=-const, name=f"h2fix[{s+1},{i+1}]")
                margins.append(MarginRow(r, -1))
            elif state == 1 or not pieces:
                z2_const[s] = 1.0

        # h1 >= 0 forces h2 >= eps > 0 on the same arm
        if eps > 0 and z1[s, a] >= 0 and z2[s] >= 0:
            pb.row([(z1[s, a], 1.0), (z2[s], -1.0)], hi=0.0, name=f"z12[{s+1}]")

        # correction terms below the clipping window
        if s + 1 < ms:
            if z1[s, a] >= 0:
                pb.add_cost(z1[s, a], cpos[s])
            else:
                pb.offset += cpos[s] * z1d_const[s]
            if z2[s] >= 0:
                pb.add_cost(z2[s], -cneg[s])
            else:
                pb.offset -= cneg[s] * z2_const[s]

    layout = {
        "z1": z1, "z2": z2, "sel": sel,
    }
    clip = {}
    if ms <= n:
        clip = _clip_block(pb, problem, z1[np.arange(n), arms], z2, z1d_const, z2_const, cpos, cneg)
        layout.update(clip)

    groups["z1"] = z1[z1 >= 0]
    groups["z2"] = z2[z2 >= 0]
    groups["sel"] = sel[sel >= 0]
    for key in ("F1", "F2", "P", "V", "Q", "R", "u1", "u2", "w1", "w2", "y1", "y2"):
        if key in clip:
            arr = clip[key]
            groups[key] = arr[arr >= 0]
    big_m = {"h": big}
    if "phi_range" in clip:
        big_m["phi"] = float(clip["phi_range"])

    fixes = (fix1, fix2)
    box = float(radius)
    shape = {"n_vars": len(pb.names), "groups": groups}

    def completion(x: np.ndarray) -> np.ndarray:
        return _complete(problem, layout, fixes, box, shape, x)

    program = pb.build(
        groups=groups,
        big_m=big_m,
        margin_rows=tuple(margins),
        completion=completion,
        beta_shape=(J, p),
        regularization=float(lam),
    )
    return program


def _clip_block(pb, problem, z1d, z2, z1d_const, z2_const, cpos, cneg) -> dict:
    n, ms = problem.n, problem.m_star
    coef = 2.0 * problem.ips**2
    ranks = range(ms, n + 1)  # 1-based ranks inside the window
    base = np.array([2.0 * (n - s) + 1.0 for s in range(1, n + 1)])

    def bounds(zvar, zconst):
        hi = np.zeros(n + 2)
        lo = np.zeros(n + 2)
        for s in range(n, 0, -1):
            k = s - 1
            fixed = coef[k] * zconst[k] if zvar[k] < 0 else 0.0
            free = coef[k] if zvar[k] >= 0 else 0.0
            hi[s] = hi[s + 1] + base[k] - fixed
            lo[s] = lo[s + 1] + base[k] - fixed - free
        return lo, hi

    lo1, hi1 = bounds(z1d, z1d_const)
    lo2, hi2 = bounds(z2, z2_const)
    lo_all = min(0.0, lo1[ms:n + 1].min(), lo2[ms:n + 1].min())
    hi_all = max(0.0, hi1[ms:n + 1].max(), hi2[ms:n + 1].max())
    span = hi_all - lo_all + 1.0

    def arr():
        return np.full(n + 2, -1, dtype=np.int64)

    F1, F2, P, V, Q, R, u1, u2, w1, w2, y1, y2 = (arr() for _ in range(12))
    for m in ranks:
        F1[m] = pb.var(f"F1[{m}]", lo1[m], hi1[m])
        F2[m] = pb.var(f"F2[{m}]", lo2[m], hi2[m])
    for F, zvar, zconst, tag in ((F1, z1d, z1d_const, "F1"), (F2, z2, z2_const, "F2")):
        for m in ranks:
            k = m - 1
            terms = [(F[m], 1.0)]
            if m < n:
                terms.append((F[m + 1], -1.0))
            rhs = base[k]
            if zvar[k] >= 0:
                terms.append((zvar[k], coef[k]))
            else:
                rhs -= coef[k] * zconst[k]
            pb.row(terms, lo=rhs, hi=rhs, name=f"{tag}rec[{m}]")
    for s in ranks:
        P[s] = pb.var(f"P[{s}]", lo_all, hi_all)
        V[s] = pb.var(f"V[{s}]", lo_all, hi_all)
        Q[s] = pb.var(f"Q[{s}]", lo_all, hi_all)
        R[s] = pb.var(f"R[{s}]", lo_all, hi_all)
        w1[s] = pb.var(f"w1[{s}]", 0, 1, binary=True)
        w2[s] = pb.var(f"w2[{s}]", 0, 1, binary=True)
    for s in ranks:
        # P_s <= min_{m* <= t <= s} F2_t
        pb.row([(P[s], 1.0), (F2[s], -1.0)], hi=0.0, name=f"P[{s}]a")
        if s > ms:
            pb.row([(P[s], 1.0), (P[s - 1], -1.0)], hi=0.0, name=f"P[{s}]b")
        # V_s >= min_{s < m <= N+1} F1_m
        if s == n:
            pb.row([(V[s], 1.0)], lo=0.0, name=f"V[{s}]")
        else:
            u1[s] = pb.var(f"u1[{s}]", 0, 1, binary=True)
            pb.row([(F1[s + 1], 1.0), (V[s], -1.0), (u1[s], span)], hi=span, name=f"V[{s}]a")
            pb.row([(V[s + 1], 1.0), (V[s], -1.0), (u1[s], -span)], hi=0.0, name=f"V[{s}]b")
        # Q_s >= min_{m* <= t <= s} F1_t
        if s == ms:
            pb.row([(F1[s], 1.0), (Q[s], -1.0)], hi=0.0, name=f"Q[{s}]")
        else:
            u2[s] = pb.var(f"u2[{s}]", 0, 1, binary=True)
            pb.row([(F1[s], 1.0), (Q[s], -1.0), (u2[s], span)], hi=span, name=f"Q[{s}]a")
            pb.row([(Q[s - 1], 1.0), (Q[s], -1.0), (u2[s], -span)], hi=0.0, name=f"Q[{s}]b")
        # R_s <= min_{s < m <= N+1} F2_m
        if s == n:
            pb.row([(R[s], 1.0)], hi=0.0, name=f"R[{s}]")
        else:
            pb.row([(R[s], 1.0), (R[s + 1], -1.0)], hi=0.0, name=f"R[{s}]a")
            pb.row([(R[s], 1.0), (F2[s + 1], -1.0)], hi=0.0, name=f"R[{s}]b")
        # w1 = 1 needs P - V >= 0; w2 = 0 needs Q - R <= 0
        pb.row([(P[s], 1.0), (V[s], -1.0), (w1[s], -span)], lo=-span, name=f"w1[{s}]")
        pb.row([(Q[s], 1.0), (R[s], -1.0), (w2[s], -span)], hi=0.0, name=f"w2[{s}]")
        if s > ms:
            # both step indicators are nonincreasing in rank
            pb.row([(w1[s - 1], 1.0), (w1[s], -1.0)], lo=0.0, name=f"w1order[{s}]")
            pb.row([(w2[s - 1], 1.0), (w2[s], -1.0)], lo=0.0, name=f"w2order[{s}]")
        if problem.eps > 0:
            _window_cuts(pb, s, ms, n, coef, base, z1d, z2, z1d_const, z2_const, w1[s], w2[s])
        k = s - 1
        if cpos[k] > 0:
            if z1d[k] >= 0:
                y1[s] = pb.var(f"y1[{s}]", 0.0, 1.0, cpos[k])
                pb.row([(y1[s], 1.0), (z1d[k], -1.0)], hi=0.0, name=f"y1[{s}]a")
                pb.row([(y1[s], 1.0), (w1[s], -1.0)], hi=0.0, name=f"y1[{s}]b")
            elif z1d_const[k] == 1.0:
                pb.add_cost(w1[s], cpos[k])
        if cneg[k] > 0:
            if z2[k] >= 0:
                y2[s] = pb.var(f"y2[{s}]", 0.0, 1.0, -cneg[k])
                pb.row([(y2[s], 1.0), (z2[k], -1.0), (w2[s], -1.0)], lo=-1.0, name=f"y2[{s}]")
            elif z2_const[k] == 1.0:
                pb.add_cost(w2[s], -cneg[k])
    return {"F1": F1, "F2": F2, "P": P, "V": V, "Q": Q, "R": R, "u1": u1, "u2": u2,
            "w1": w1, "w2": w2, "y1": y1, "y2": y2, "phi_range": span}


def _complete(problem, layout, fixes, radius, shape, x) -> np.ndarray:
    """Feasible point whose binaries are the indicator pattern of x's beta."""
    n, J, p = problem.n, problem.num_treatments, problem.dim
    groups = shape["groups"]
    x = np.asarray(x, dtype=float)
    if "beta" in groups:
        beta = x[groups["beta"]]
    else:
        beta = x[groups["beta_pos"]] - x[groups["beta_neg"]]
    beta = np.clip(beta, -radius, radius).reshape(J, p)
    fix1, fix2 = fixes
    pat = eval_pattern(problem, beta, None, fix1, fix2)
    out = np.zeros(shape["n_vars"])
    if "beta" in groups:
        out[groups["beta"]] = beta.ravel()
    else:
        out[groups["beta_pos"]] = np.maximum(beta, 0).ravel()
        out[groups["beta_neg"]] = np.maximum(-beta, 0).ravel()
    z1, z2, sel = layout["z1"], layout["z2"], layout["sel"]
    mask = z1 >= 0
    out[z1[mask]] = pat.z1[mask]
    mask = z2 >= 0
    out[z2[mask]] = pat.z2[mask]
    rows = np.arange(n)
    for s in np.flatnonzero(mask):
        a = problem.arms[s]
        cand = [i for i in range(J) if i != a and sel[s, i] >= 0]
        if not cand:
            continue
        vals = [pat.margins.pairwise[s, a, i] + (problem.eps if i > a else 0.0) for i in cand]
        out[sel[s, cand[int(np.argmin(vals))]]] = 1.0
    ms = problem.m_star
    if ms <= n:
        F1, F2 = pat.phi1, pat.phi2  # index m - 1 holds Phi_m
        P, V, Q, R = (np.zeros(n + 2) for _ in range(4))
        for s in range(ms, n + 1):
            P[s] = F2[s - 1] if s == ms else min(P[s - 1], F2[s - 1])
            Q[s] = F1[s - 1] if s == ms else min(Q[s - 1], F1[s - 1])
            out[layout["F1"][s]] = F1[s - 1]
            out[layout["F2"][s]] = F2[s - 1]
        V[n] = 0.0
        R[n] = 0.0
        for s in range(n - 1, ms - 1, -1):
            V[s] = min(F1[s], V[s + 1])
            R[s] = min(F2[s], R[s + 1])
            out[layout["u1"][s]] = 1.0 if F1[s] <= V[s + 1] else 0.0
        for s in range(ms + 1, n + 1):
            out[layout["u2"][s]] = 1.0 if F1[s - 1] <= Q[s - 1] else 0.0
        z1d = pat.z1[rows, problem.arms]
        for s in range(ms, n + 1):
            k = s - 1
            out[layout["P"][s]] = P[s]
            out[layout["V"][s]] = V[s]
            out[layout["Q"][s]] = Q[s]
            out[layout["R"][s]] = R[s]
            out[layout["w1"][s]] = pat.w1[k]
            out[layout["w2"][s]] = pat.w2[k]
            if layout["y1"][s] >= 0:
                out[layout["y1"][s]] = min(z1d[k], pat.w1[k])
            if layout["y2"][s] >= 0:
                out[layout["y2"][s]] = max(0.0, pat.z2[k] + pat.w2[k] - 1.0)
    return out


def _window_cuts(pb, s, ms, n, coef, base, z1d, z2, z1d_const, z2_const, w1, w2) -> None:
    """Big-M free links between the step indicators and the window indicators.

    Inside the window 2 C_k^2 > 2(N - k) + 1, so a step of Phi is negative
    exactly when its indicator is 1.  With eps > 0 we also have
    Phi^2 <= Phi^1.  Then w1_s = 1 needs some z2_k = 0 with k >= s, and
    w2_s = 0 needs some z1_k = 1 with m* <= k <= s.
    """
    k0 = s - 1
    # w1_s <= sum_{k >= s} (1 - z2_k)
    terms = [(w1, 1.0)]
    rhs = 0.0
    weighted = []
    wrhs = 0.0
    for k in range(k0, n):
        if z2[k] >= 0:
            terms.append((z2[k], 1.0))
            rhs += 1.0
            if k > k0:
                weighted.append((z2[k], base[k]))
                wrhs += base[k]
        else:
            rhs += 1.0 - z2_const[k]
            if k > k0:
                wrhs += base[k] * (1.0 - z2_const[k])
    pb.row(terms, hi=rhs, name=f"w1cut[{s}]")
    # (2 C_s^2 - base_s)(w1_s + z2_s - 1) <= sum_{k > s} base_k (1 - z2_k)
    gap = coef[k0] - base[k0]
    if z2[k0] >= 0:
        pb.row([(w1, gap), (z2[k0], gap)] + weighted, hi=gap + wrhs, name=f"w1knap[{s}]")
    elif z2_const[k0] == 1.0:
        pb.row([(w1, gap)] + weighted, hi=wrhs, name=f"w1knap[{s}]")
    # 1 - w2_s <= sum_{m* <= k <= s} z1_k
    terms = [(w2, -1.0)]
    rhs = -1.0
    for k in range(ms - 1, s):
        if z1d[k] >= 0:
            terms.append((z1d[k], 1.0))
        else:
            rhs -= z1d_const[k]
    pb.row(terms, lo=rhs, name=f"w2cut[{s}]")
