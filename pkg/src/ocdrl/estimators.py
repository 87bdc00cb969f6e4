"""Policy-value estimators: DM, IPW, DR, clipped DR and optimized clipped DR.

All of them share one engine, the clipped doubly robust score

    Gamma_s = mu_hat(X^s, g) + 1{g = D_s} C_s 1{C_s <= tau} (Y_s - mu_hat(X^s, g)),

with C_s = 1 / e(X^s, g(X^s)).  DM is tau = 0, DR is tau >= max C, IPW is
mu_hat = 0 with tau = 1 / eta, and OCDR plugs in the MSE-optimal threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import Dataset, LinearPolicy, RewardModel, counterfactual_ips, reward_matrix
from .threshold import (
    clipping_ips,
    optimal_rank,
    perturb_for_uniqueness,
    mse_table,
    sort_ips,
    suffix_sums,
)

__all__ = [
    "ScoreVector",
    "MseObjective",
    "DiagnosticBounds",
    "OcdrResult",
    "dm_scores",
    "dm_value",
    "cdr_scores",
    "dr_scores",
    "ipw_scores",
    "ocdr_value",
    "mse_objective",
    "diagnostic_bounds",
    "estimator_report",
    "ips_weight_histogram",
]

log = logging.getLogger(__name__)

RewardLike = RewardModel | np.ndarray | float


@dataclass(frozen=True, eq=False)
class ScoreVector:
    scores: np.ndarray
    kind: str
    tau: float | None = None

    @property
    def value(self) -> float:
        return float(np.mean(self.scores)) if self.scores.size else 0.0

    def __len__(self) -> int:
        return int(self.scores.size)


@dataclass(frozen=True, eq=False)
class MseObjective:
    """Threshold objective tabulated on the sorted IPS grid (grid[0] = 0)."""

    thresholds: np.ndarray
    bias_sq: np.ndarray
    variance: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.bias_sq + 2.0 * self.variance

    def at(self, tau: float) -> float:
        k = int(np.searchsorted(self.thresholds, tau, side="right")) - 1
        return float(self.values[max(k, 0)])


@dataclass(frozen=True)
class DiagnosticBounds:
    b_hat: float
    b_tilde: float
    delta: float

    @property
    def a(self) -> float:
        """max of the square roots of the three quantities."""
        return float(max(np.sqrt(self.b_hat), np.sqrt(self.b_tilde), np.sqrt(self.delta)))

    def to_dict(self) -> dict:
        return {"b_hat": self.b_hat, "b_tilde": self.b_tilde, "delta": self.delta, "a": self.a}


@dataclass(frozen=True, eq=False)
class OcdrResult:
    value: float
    tau: float
    scores: ScoreVector

    def __iter__(self):
        # allows ``value, tau, scores = ocdr_value(...)``
        return iter((self.value, self.tau, self.scores))


def _policy_arrays(dataset: Dataset, policy: LinearPolicy, reward_model: RewardLike):
    g = policy.assign(dataset.covariates)
    mu = reward_matrix(dataset, reward_model)
    rows = np.arange(dataset.n)
    mu_g = mu[rows, g - 1]
    matched = g == dataset.treatments
    return g, mu_g, matched


def _cdr(mu_g: np.ndarray, matched: np.ndarray, rewards: np.ndarray,
         weights: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # weights only matter on matched rows, where counterfactual and logged IPS agree
    correction = np.where(matched & keep, weights * (rewards - mu_g), 0.0)
    return mu_g + correction


def dm_scores(dataset: Dataset, policy: LinearPolicy, reward_model: RewardLike) -> ScoreVector:
    _, mu_g, _ = _policy_arrays(dataset, policy, reward_model)
    return ScoreVector(mu_g, "dm", 0.0)


def dm_value(dataset: Dataset, policy: LinearPolicy, reward_model: RewardLike) -> float:
    return dm_scores(dataset, policy, reward_model).value


def cdr_scores(
    dataset: Dataset, policy: LinearPolicy, reward_model: RewardLike, tau: float
) -> ScoreVector:
    """Clipped doubly robust scores at threshold ``tau``."""
    if not tau >= 0:
        raise ValueError("clipping threshold must be nonnegative")
    _, mu_g, matched = _policy_arrays(dataset, policy, reward_model)
    c = 1.0 / dataset.propensities
    scores = _cdr(mu_g, matched, dataset.rewards, c, c <= tau)
    return ScoreVector(scores, "cdr", float(tau))


def dr_scores(dataset: Dataset, policy: LinearPolicy, reward_model: RewardLike) -> ScoreVector:
    out = cdr_scores(dataset, policy, reward_model, np.inf)
    return ScoreVector(out.scores, "dr", None)


def ipw_scores(dataset: Dataset, policy: LinearPolicy) -> ScoreVector:
    out = cdr_scores(dataset, policy, 0.0, 1.0 / dataset.overlap_floor)
    return ScoreVector(out.scores, "ipw", None)


def ocdr_value(
    dataset: Dataset,
    policy: LinearPolicy,
    reward_model: RewardLike,
    basis: str = "logged",
) -> OcdrResult:
    """Clipped DR at the MSE-optimal threshold.

    Clipping is decided on the tie-broken IPS values; the correction weights
    use the raw IPS.  The reported tau is the tie-broken C_(m), or 0 when
    every correction is clipped.
    """
    _, mu_g, matched = _policy_arrays(dataset, policy, reward_model)
    c_clip = perturb_for_uniqueness(clipping_ips(dataset, policy, basis))
    view = sort_ips(c_clip, matched)
    m = optimal_rank(view, suffix_sums(view))
    keep = np.zeros(dataset.n, dtype=bool)
    keep[view.order[:m]] = True
    tau = float(view.values[m])
    scores = _cdr(mu_g, matched, dataset.rewards, 1.0 / dataset.propensities, keep)
    sv = ScoreVector(scores, "ocdr", tau)
    return OcdrResult(sv.value, tau, sv)


def mse_objective(dataset: Dataset, policy: LinearPolicy, basis: str = "logged") -> MseObjective:
    """Brute-force threshold objective at every grid point."""
    matched = policy.assign(dataset.covariates) == dataset.treatments
    c = perturb_for_uniqueness(clipping_ips(dataset, policy, basis))
    grid, bias_sq, variance = mse_table(c, matched)
    return MseObjective(grid, bias_sq, variance)


def diagnostic_bounds(
    dataset: Dataset, policy: LinearPolicy, tau: float, basis: str = "logged"
) -> DiagnosticBounds:
    """B_hat, B_tilde and Delta of the suboptimality bound at ``tau``.

    B_hat  = M^2/N^2 [ (sum 1{C > tau})^2 + sum_matched C^2 1{C <= tau} ]
    B_tilde uses C in place of the matched C^2 term, over all samples.
    Delta  = M^2 (tau / N)^(3/2).
    """
    n = dataset.n
    M = dataset.reward_bound
    c = perturb_for_uniqueness(clipping_ips(dataset, policy, basis))
    matched = policy.assign(dataset.covariates) == dataset.treatments
    kept = c <= tau
    count = float(np.sum(~kept))
    b_hat = M**2 / n**2 * (count**2 + float(np.sum(np.where(matched & kept, c * c, 0.0))))
    b_tilde = M**2 / n**2 * (count**2 + float(np.sum(np.where(kept, c, 0.0))))
    delta = M**2 * (max(tau, 0.0) / n) ** 1.5
    return DiagnosticBounds(float(b_hat), float(b_tilde), float(delta))


def ips_weight_histogram(
    dataset: Dataset, policy: LinearPolicy, bins: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of counterfactual IPS weights; logged at debug level.

    Large weights are the source of the variance blow-up of IPW and DR
    under weak overlap, so this is a cheap diagnostic to look at.
    """
    c = counterfactual_ips(dataset, policy)
    counts, edges = np.histogram(c, bins=bins, range=(1.0, 1.0 / dataset.overlap_floor))
    log.debug("IPS weight histogram: counts=%s edges=%s", counts.tolist(), edges.tolist())
    return counts, edges


def estimator_report(
    estimator: str,
    dataset: Dataset,
    policy: LinearPolicy,
    reward_model: RewardLike,
    include_scores: bool = False,
) -> dict:
    """JSON-ready summary {estimator, value, tau, per_sample_scores?, diagnostics}."""
    if estimator == "dm":
        sv = dm_scores(dataset, policy, reward_model)
    elif estimator == "dr":
        sv = dr_scores(dataset, policy, reward_model)
    elif estimator == "ipw":
        sv = ipw_scores(dataset, policy)
    elif estimator == "ocdr":
        sv = ocdr_value(dataset, policy, reward_model).scores
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    tau_eval = sv.tau if sv.tau is not None else 1.0 / dataset.overlap_floor
    report = {
        "estimator": estimator,
        "value": sv.value,
        "tau": sv.tau,
        "diagnostics": diagnostic_bounds(dataset, policy, tau_eval).to_dict(),
    }
    if include_scores:
        report["per_sample_scores"] = sv.scores.tolist()
    return report
