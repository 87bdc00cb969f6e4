"""Heaviside-composite form of the policy learning objective.

For a linear policy with parameters beta the pairwise margins are

    h_{j,i}(x, beta) = x . (beta_j - beta_i) + b_j - b_i,

and arm j is chosen exactly when h_{j,i} > 0 for i < j and h_{j,i} >= 0 for
i > j.  Replacing that product of step functions by single steps of

    h1_j = min(min_{i<j} h_{j,i} - eps, min_{i>j} h_{j,i})        (lower)
    h2_j = min(min_{i<j} h_{j,i},       min_{i>j} h_{j,i} + eps)  (upper)

yields an upper semicontinuous lower approximation psi_eps of the exact
objective, whose maximisation is what the integer programs solve.

Samples are kept in ascending order of the (tie-broken) logged IPS, so the
clipping indicators become threshold functions of the sorted rank s.
Ranks and the pruning index m* are 1-based in docstrings and 0-based in
arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, LinearPolicy, RewardModel, reward_matrix
from .estimators import dr_scores, ipw_scores, ocdr_value
from .threshold import perturb_for_uniqueness, pruning_index, sort_ips

__all__ = [
    "KINDS",
    "HscopProblem",
    "MarginSet",
    "PatternEval",
    "SignReport",
    "build_problem",
    "default_eps",
    "eval_margins",
    "eval_pattern",
    "eval_psi_eps",
    "eval_psi_hsc",
    "phi_curve",
    "exact_phi",
    "check_sign_invariance",
]

KINDS = ("ocdr", "dr", "ipw")


def default_eps(X: np.ndarray) -> float:
    """1e-4 * (median absolute covariate value + 1)."""
    X = np.asarray(X, dtype=float)
    med = float(np.median(np.abs(X))) if X.size else 0.0
    return 1e-4 * (med + 1.0)


@dataclass(frozen=True, eq=False)
class HscopProblem:
    """Sorted, estimator-specific data of the surrogate objective.

    ``weights`` holds the raw logged IPS C_s that multiply residuals;
    ``ips`` holds the tie-broken copy used inside the Phi sums.  For the DR
    and IPW objectives ``m_star = N + 1`` so that no clipping block exists.
    """

    kind: str
    dataset: Dataset
    order: np.ndarray
    X: np.ndarray
    arms: np.ndarray
    base_scores: np.ndarray
    mu: np.ndarray
    mu_dataset: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    weights: np.ndarray
    ips: np.ndarray
    m_star: int
    eps: float

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    @property
    def num_treatments(self) -> int:
        return int(self.base_scores.size)

    @property
    def clipped(self) -> bool:
        return self.m_star <= self.n

    def policy(self, beta: np.ndarray) -> LinearPolicy:
        return LinearPolicy(np.asarray(beta, dtype=float).reshape(self.num_treatments, self.dim),
                            self.base_scores)

    def with_eps(self, eps: float) -> "HscopProblem":
        fields = dict(self.__dict__)
        fields["eps"] = float(eps)
        return HscopProblem(**fields)


def build_problem(
    dataset: Dataset,
    reward_model: RewardModel | np.ndarray | float,
    kind: str = "ocdr",
    base_scores: np.ndarray | None = None,
    eps: float | None = None,
) -> HscopProblem:
    """Assemble the surrogate objective for OCDR, DR or IPW on ``dataset``.

    DR is the OCDR build with every clipping indicator forced to one; IPW
    is DR with mu_hat identically zero.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown objective kind {kind!r}; expected one of {KINDS}")
    n, J = dataset.n, dataset.num_treatments
    mu_full = np.zeros((n, J)) if kind == "ipw" else reward_matrix(dataset, reward_model)
    b = np.zeros(J) if base_scores is None else np.asarray(base_scores, dtype=float).reshape(J)
    weights = 1.0 / dataset.propensities
    ips = perturb_for_uniqueness(weights)
    view = sort_ips(ips, np.ones(n, dtype=bool))
    order = view.order
    arms = dataset.treatments[order] - 1
    mu = mu_full[order]
    resid = dataset.rewards[order] - mu[np.arange(n), arms]
    if kind == "ocdr":
        m_star = pruning_index(view)
        m_star = n + 1 if m_star is None else m_star
    else:
        m_star = n + 1
    return HscopProblem(
        kind=kind,
        dataset=dataset,
        order=order,
        X=dataset.covariates[order],
        arms=arms,
        base_scores=b,
        mu=mu,
        mu_dataset=mu_full,
        pos=np.maximum(resid, 0.0),
        neg=np.maximum(-resid, 0.0),
        weights=weights[order],
        ips=ips[order],
        m_star=int(m_star),
        eps=default_eps(dataset.covariates) if eps is None else float(eps),
    )


@dataclass(frozen=True, eq=False)
class MarginSet:
    """pairwise[s, j, i] = h_{j,i}(X^s); lower/upper are h1_j and h2_j."""

    pairwise: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def eval_margins(problem: HscopProblem, beta: np.ndarray, eps: float | None = None) -> MarginSet:
    eps = problem.eps if eps is None else float(eps)
    J = problem.num_treatments
    scores = problem.X @ np.asarray(beta, dtype=float).reshape(J, problem.dim).T + problem.base_scores
    pairwise = scores[:, :, None] - scores[:, None, :]
    n = problem.n
    lower = np.full((n, J), np.inf)
    upper = np.full((n, J), np.inf)
    for j in range(J):
        below = pairwise[:, j, :j].min(axis=1) if j > 0 else np.full(n, np.inf)
        above = pairwise[:, j, j + 1:].min(axis=1) if j < J - 1 else np.full(n, np.inf)
        lower[:, j] = np.minimum(below - eps, above)
        upper[:, j] = np.minimum(below, above + eps)
    return MarginSet(pairwise, lower, upper)


def phi_curve(problem: HscopProblem, z: np.ndarray) -> np.ndarray:
    """Phi_m for m = 1..N+1 (array index m - 1) given matched flags ``z``."""
    n = problem.n
    s = np.arange(1, n + 1)
    terms = 2.0 * (n - s) + 1.0 - 2.0 * problem.ips**2 * np.asarray(z, dtype=float)
    out = np.zeros(n + 1)
    out[:n] = np.cumsum(terms[::-1])[::-1]
    return out


def _window_indicators(problem: HscopProblem, phi_lo: np.ndarray, phi_hi: np.ndarray):
    """For ranks s = m*..N return (A_s, B_s) with

    A_s = min_{m* <= t <= s} phi_lo_t - min_{s+1 <= m <= N+1} phi_hi_m
    B_s = min_{m* <= t <= s} phi_hi_t - min_{s+1 <= m <= N+1} phi_lo_m
    """
    n, ms = problem.n, problem.m_star
    if ms > n:
        return np.zeros(0), np.zeros(0)
    lo_prefix = np.minimum.accumulate(phi_lo[ms - 1:n])
    hi_prefix = np.minimum.accumulate(phi_hi[ms - 1:n])
    hi_suffix = np.minimum.accumulate(phi_hi[::-1])[::-1]  # min over m >= index
    lo_suffix = np.minimum.accumulate(phi_lo[::-1])[::-1]
    a = lo_prefix - hi_suffix[ms:n + 1]
    b = hi_prefix - lo_suffix[ms:n + 1]
    return a, b


@dataclass(frozen=True, eq=False)
class PatternEval:
    """Indicator pattern of the surrogate at one beta.

    z1 is (N, J); z2, w1 and w2 are per sample with w1 = w2 = 1 below m*.
    ``value`` is psi_eps.
    """

    margins: MarginSet
    z1: np.ndarray
    z2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    value: float


def eval_pattern(
    problem: HscopProblem,
    beta: np.ndarray,
    eps: float | None = None,
    fix1: np.ndarray | None = None,
    fix2: np.ndarray | None = None,
) -> PatternEval:
    """Evaluate the surrogate and its indicators at ``beta``.

    ``fix1`` (N, J) and ``fix2`` (N,) optionally override indicators with
    constants; entries set to -1 are left free.  This is the objective of
    the restricted program.
    """
    margins = eval_margins(problem, beta, eps)
    n = problem.n
    rows = np.arange(n)
    z1 = (margins.lower >= 0).astype(float)
    z2 = (margins.upper[rows, problem.arms] > 0).astype(float)
    if fix1 is not None:
        z1 = np.where(fix1 >= 0, fix1, z1)
    if fix2 is not None:
        z2 = np.where(fix2 >= 0, fix2, z2)
    z1d = z1[rows, problem.arms]
    phi1 = phi_curve(problem, z1d)
    phi2 = phi_curve(problem, z2)
    w1 = np.ones(n)
    w2 = np.ones(n)
    a, b = _window_indicators(problem, phi2, phi1)
    ms = problem.m_star
    if ms <= n:
        w1[ms - 1:] = (a >= 0).astype(float)
        w2[ms - 1:] = (b > 0).astype(float)
    c = problem.weights
    value = float(np.sum(problem.mu * z1))
    value += float(np.sum(c * problem.pos * z1d * w1))
    value -= float(np.sum(c * problem.neg * z2 * w2))
    return PatternEval(margins, z1, z2, w1, w2, phi1, phi2, value)


def eval_psi_eps(problem: HscopProblem, beta: np.ndarray, eps: float | None = None) -> float:
    return eval_pattern(problem, beta, eps).value


def eval_psi_hsc(problem: HscopProblem, beta: np.ndarray) -> float:
    """Exact objective, N times the estimator value of the induced policy."""
    policy = problem.policy(beta)
    ds = problem.dataset
    if problem.kind == "ocdr":
        value = ocdr_value(ds, policy, problem.mu_dataset).value
    elif problem.kind == "dr":
        value = dr_scores(ds, policy, problem.mu_dataset).value
    else:
        value = ipw_scores(ds, policy).value
    return ds.n * value


def exact_phi(problem: HscopProblem, beta: np.ndarray) -> np.ndarray:
    """Phi_m computed from the policy's own matched indicators."""
    g = problem.policy(beta).assign(problem.X) - 1
    return phi_curve(problem, (g == problem.arms).astype(float))


@dataclass(frozen=True)
class SignReport:
    status: str
    min_abs_margin: float
    flips: int
    trials: int

    @property
    def message(self) -> str:
        if self.status == "boundary":
            return "boundary point, local sign-invariance hypotheses unverified"
        return self.status


def check_sign_invariance(
    problem: HscopProblem,
    beta: np.ndarray,
    radius: float,
    trials: int = 200,
    seed: int = 0,
) -> SignReport:
    """Check whether the indicator pattern is locally constant around ``beta``.

    The neighbourhood is the sup-norm ball of ``radius`` in beta.  Any
    pairwise margin moves by at most 2 * radius * ||X^s||_1 inside it, so
    margins larger than that certify stability outright.  Otherwise random
    points of the ball are sampled and any change of the pattern is
    reported as unstable.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    beta = np.asarray(beta, dtype=float).reshape(problem.num_treatments, problem.dim)
    margins = eval_margins(problem, beta, 0.0)
    J = problem.num_treatments
    off = ~np.eye(J, dtype=bool)
    h = margins.pairwise[:, off]
    min_abs = float(np.min(np.abs(h))) if h.size else np.inf
    if h.size and np.any(h == 0.0):
        return SignReport("boundary", 0.0, 0, 0)
    reach = 2.0 * radius * np.abs(problem.X).sum(axis=1)
    if np.all(np.abs(h) > reach[:, None]):
        return SignReport("sign-stable", min_abs, 0, 0)
    rng = np.random.default_rng(seed)
    base = eval_pattern(problem, beta, 0.0)
    flips = 0
    for _ in range(trials):
        b2 = beta + rng.uniform(-radius, radius, size=beta.shape)
        other = eval_pattern(problem, b2, 0.0)
        if not (np.array_equal(other.z1, base.z1) and np.array_equal(other.z2, base.z2)):
            flips += 1
    return SignReport("sampled-stable" if flips == 0 else "unstable", min_abs, flips, trials)
