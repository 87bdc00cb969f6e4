"""Policy learning with the OCDR, DR and IPW objectives.

The data are split in two.  Reward models are fitted on the first part and
the policy is optimised on the second, starting PIP from the best of a few
cheap initial points.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from .core import Dataset, LinearPolicy, LinearRewardModel, RewardModel
from .estimators import diagnostic_bounds, dr_scores, ipw_scores, ocdr_value
from .hscop import KINDS, HscopProblem, build_problem, check_sign_invariance
from .mip import build_full_mip, solve_lp_relaxation
from .pip import PipConfig, PipTrace, psi, run_pip

__all__ = [
    "LearnerSpec",
    "LearnedPolicy",
    "split_dataset",
    "fit_reward_model",
    "hinge_fit",
    "initial_points",
    "learn_policy",
]

log = logging.getLogger(__name__)

INIT_CHOICES = ("auto", "lp", "hinge", "zero")


@dataclass(frozen=True)
class LearnerSpec:
    estimator: str = "ocdr"
    split_fraction: float = 0.5
    reward_model: str = "ridge"
    ridge: float = 1e-6
    pip: PipConfig = field(default_factory=PipConfig)
    lam: float = 0.0
    eps: float | None = None
    radius: float = 10.0
    seed: int = 0
    init: str = "auto"

    def __post_init__(self) -> None:
        if self.estimator not in KINDS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {KINDS}")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split fraction must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("regularization weight must be nonnegative")
        if self.reward_model != "ridge":
            raise ValueError(f"unknown reward model {self.reward_model!r}")
        if self.ridge < 0:
            raise ValueError("ridge penalty must be nonnegative")
        if self.init not in INIT_CHOICES:
            raise ValueError(f"unknown init {self.init!r}; expected one of {INIT_CHOICES}")

    def pip_config(self) -> PipConfig:
        return replace(self.pip, lam=self.lam, eps=self.eps, radius=self.radius)


@dataclass(frozen=True, eq=False)
class LearnedPolicy:
    policy: LinearPolicy
    estimator: str
    objective: float
    initial_objective: float
    init_source: str
    tau: float | None
    trace: PipTrace
    diagnostics: dict
    value: float

    def to_dict(self) -> dict:
        out = {
            "estimator": self.estimator,
            "policy": self.policy.to_dict(),
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "init": self.init_source,
            "estimated_value": self.value,
            "pip_iterations": len(self.trace),
            "diagnostics": self.diagnostics,
        }
        if self.tau is not None:
            out["tau"] = self.tau
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def split_dataset(dataset: Dataset, fraction: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; the first part gets floor(fraction * N) rows, at least one."""
    if not 0 < fraction < 1:
        raise ValueError("split fraction must lie in (0, 1)")
    n = dataset.n
    if n < 2:
        raise ValueError("cannot split fewer than two samples into two nonempty parts")
    k = min(max(int(np.floor(fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:k])), dataset.subset(np.sort(perm[k:]))


def fit_reward_model(dataset: Dataset, kind: str = "ridge", ridge: float = 1e-6) -> RewardModel:
    """Per-arm ridge regression with an unpenalised intercept.

    Arms without samples predict the global mean reward.
    """
    if kind != "ridge":
        raise ValueError(f"unknown reward model {kind!r}")
    if dataset.n == 0:
        raise ValueError("cannot fit a reward model on an empty dataset")
    J, p = dataset.num_treatments, dataset.dim
    X, y, d = dataset.covariates, dataset.rewards, dataset.treatments
    weights = np.zeros((J, p))
    intercepts = np.full(J, float(np.mean(y)))
    for j in range(J):
        rows = d == j + 1
        if not np.any(rows):
            continue
        Xj, yj = X[rows], y[rows]
        xm, ym = Xj.mean(axis=0), yj.mean()
        Xc = Xj - xm
        gram = Xc.T @ Xc + ridge * np.eye(p)
        w = np.linalg.lstsq(gram, Xc.T @ (yj - ym), rcond=None)[0]
        weights[j] = w
        intercepts[j] = ym - xm @ w
    return LinearRewardModel(weights, intercepts, dataset.reward_bound)


def _pseudo_rewards(problem: HscopProblem) -> np.ndarray:
    """Per-sample, per-arm scores in sorted order; corrections only where never clipped."""
    n = problem.n
    rows = np.arange(n)
    gamma = problem.mu.copy()
    keep = np.arange(1, n + 1) < problem.m_star
    resid = problem.pos - problem.neg
    gamma[rows, problem.arms] += np.where(keep, problem.weights * resid, 0.0)
    return gamma


def hinge_fit(problem: HscopProblem, radius: float, lam: float = 0.0) -> np.ndarray:
    """Weighted multiclass hinge fit to the best pseudo-reward arm of each sample.

    Each sample asks for a unit score margin of its target arm over every
    other arm, with slack penalised by its regret gap.  Solved as one LP.
    """
    gamma = _pseudo_rewards(problem)
    n, J, p = problem.n, problem.num_treatments, problem.dim
    target = np.argmax(gamma, axis=1)
    srt = np.sort(gamma, axis=1)
    gap = srt[:, -1] - srt[:, -2] if J > 1 else np.zeros(n)
    active = np.flatnonzero(gap > 0)
    if active.size == 0:
        return np.zeros((J, p))
    X, b = problem.X, problem.base_scores
    nb = J * p
    m = active.size
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    for k, s in enumerate(active):
        t = target[s]
        for j in range(J):
            if j == t:
                continue
            # x.(beta_t - beta_j) + xi_s >= 1 - (b_t - b_j), beta = beta_pos - beta_neg
            for d in range(p):
                for col, sign in ((t * p + d, -1.0), (j * p + d, 1.0)):
                    rows += [r, r]
                    cols += [col, nb + col]
                    vals += [sign * X[s, d], -sign * X[s, d]]
            rows.append(r)
            cols.append(2 * nb + k)
            vals.append(-1.0)
            rhs.append(b[t] - b[j] - 1.0)
            r += 1
    A = coo_matrix((vals, (rows, cols)), shape=(r, 2 * nb + m)).tocsr()
    scale = gap[active].max()
    cost = np.concatenate([np.full(2 * nb, lam / scale), gap[active] / scale])
    bounds = [(0, radius)] * (2 * nb) + [(0, None)] * m
    res = linprog(cost, A_ub=A, b_ub=np.asarray(rhs), bounds=bounds, method="highs")
    if res.x is None:
        return np.zeros((J, p))
    beta = res.x[:nb] - res.x[nb:2 * nb]
    return np.clip(beta, -radius, radius).reshape(J, p)


def initial_points(problem: HscopProblem, radius: float, lam: float, which: str = "auto") -> list[tuple[str, np.ndarray]]:
    J, p = problem.num_treatments, problem.dim
    out = []
    if which in ("auto", "lp"):
        res = solve_lp_relaxation(build_full_mip(problem, radius, lam))
        if res.beta is not None:
            out.append(("lp", np.clip(res.beta, -radius, radius)))
    if which in ("auto", "hinge"):
        out.append(("hinge", hinge_fit(problem, radius, lam)))
    if which in ("auto", "zero") or not out:
        out.append(("zero", np.zeros((J, p))))
    return out


def learn_policy(dataset: Dataset, spec: LearnerSpec, reward_model: RewardModel | None = None) -> LearnedPolicy:
    """Fit mu_hat on one half, optimise the estimator's objective on the other.

    With an explicit ``reward_model`` no split is made and the whole dataset
    is used for optimisation.
    """
    dataset.require_propensity_model()
    if reward_model is None:
        d1, d2 = split_dataset(dataset, spec.split_fraction, spec.seed)
        reward_model = fit_reward_model(d1, spec.reward_model, spec.ridge)
    else:
        d2 = dataset
    problem = build_problem(d2, reward_model, spec.estimator, eps=spec.eps)
    config = spec.pip_config()

    candidates = initial_points(problem, spec.radius, spec.lam, spec.init)
    scored = [(psi(problem, beta, spec.lam), k, name, beta) for k, (name, beta) in enumerate(candidates)]
    lp_value = next((v for v, _, name, _ in scored if name == "lp"), None)
    best_value, _, source, beta0 = max(scored, key=lambda item: (item[0], -item[1]))
    log.info("initial point %s with objective %.6g", source, best_value)

    beta, trace = run_pip(problem, config, beta0)
    policy = problem.policy(beta)
    diagnostics: dict = {}
    if spec.estimator == "ocdr":
        res = ocdr_value(d2, policy, problem.mu_dataset)
        tau, value = res.tau, res.value
    else:
        tau = None
        sv = dr_scores(d2, policy, problem.mu_dataset) if spec.estimator == "dr" else ipw_scores(d2, policy)
        value = sv.value
    tau_eval = tau if tau is not None else 1.0 / d2.overlap_floor
    diagnostics.update(diagnostic_bounds(d2, policy, tau_eval).to_dict())
    diagnostics["lp_relaxation_objective"] = lp_value
    diagnostics["sign_check"] = check_sign_invariance(problem, beta, 1e-6 * spec.radius, trials=50).message
    return LearnedPolicy(
        policy=policy,
        estimator=spec.estimator,
        objective=float(trace.final_objective),
        initial_objective=float(best_value),
        init_source=source,
        tau=tau,
        trace=trace,
        diagnostics=diagnostics,
        value=float(value),
    )
