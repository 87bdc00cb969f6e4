"""MSE-optimal clipping threshold in closed form.

For a fixed policy sort the clipping IPS values ascending, C_(0) = 0 <=
C_(1) <= ... <= C_(N), and let phi_(s) = C_(s)^2 when sample (s) is matched
(its logged arm equals the policy's arm) and 0 otherwise.  The suffix sums

    Phi_m = sum_{s=m}^{N} (2(N - s) + 1 - 2 phi_(s)),   Phi_{N+1} = 0,

tabulate the empirical MSE objective at every candidate threshold up to an
affine change: objective(C_(m)) * N^2 - 2 sum(phi) = Phi_{m+1}.  The
minimiser therefore sits at the rank m whose Phi_{m+1} is smallest, and
ranks below the pruning index m* never need to be inspected.

Which IPS vector drives the clipping is a choice.  ``basis="logged"`` uses
1 / e(X^s, D_s), ``basis="counterfactual"`` uses 1 / e(X^s, g(X^s)).  The
two agree on every matched sample, which are the only samples whose
correction term can be clipped; they differ only in the bias count of
unmatched samples.  The logged basis gives a policy-independent sort order,
which the integer-programming reformulation relies on, and is the default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, LinearPolicy, counterfactual_ips, logged_ips

__all__ = [
    "PerturbationError",
    "ThresholdTieError",
    "SortedIpsView",
    "SuffixSums",
    "perturb_for_uniqueness",
    "clipping_ips",
    "sort_ips",
    "suffix_sums",
    "pruning_index",
    "build_suffix_sums",
    "optimal_threshold",
    "optimal_rank",
    "unpruned_threshold",
    "oracle_threshold",
    "oracle_threshold_arrays",
    "mse_table",
]

PERTURBATION = 1e-9
BASES = ("logged", "counterfactual")


class PerturbationError(RuntimeError):
    """Tie-breaking perturbation failed to make the IPS values generic."""


class ThresholdTieError(RuntimeError):
    """Two candidate thresholds attain the same minimal objective."""

    def __init__(self, message: str, candidates: tuple[float, ...]) -> None:
        super().__init__(message)
        self.candidates = candidates


@dataclass(frozen=True, eq=False)
class SortedIpsView:
    """Samples reindexed by ascending IPS.

    ``order[k]`` is the original index of the sample at rank k + 1.
    ``values`` has length N + 1 with ``values[0] = 0`` so that
    ``values[m]`` is C_(m).
    """

    order: np.ndarray
    values: np.ndarray
    matched: np.ndarray

    @property
    def n(self) -> int:
        return int(self.order.size)

    @property
    def phi(self) -> np.ndarray:
        """phi_(s) for s = 1..N (0-based array)."""
        c = self.values[1:]
        return c * c * self.matched

    @property
    def phi_tilde(self) -> np.ndarray:
        c = self.values[1:]
        return c * c


@dataclass(frozen=True, eq=False)
class SuffixSums:
    """Phi_m for m = 1..N+1, stored so that ``phi[m - 1]`` is Phi_m."""

    phi: np.ndarray
    m_star: int | None

    def at(self, m: int) -> float:
        return float(self.phi[m - 1])


def _integer_like(x: np.ndarray) -> np.ndarray:
    tol = 64 * np.finfo(float).eps * np.maximum(1.0, np.abs(x))
    return np.abs(x - np.round(x)) <= tol


def _has_integer_sums(c: np.ndarray, chunk: int = 2048) -> bool:
    """True when some 2C^2 or some pairwise 2C_a^2 + 2C_b^2 is an integer."""
    q = 2.0 * c * c
    if np.any(_integer_like(q)):
        return True
    for start in range(0, q.size, chunk):
        block = q[start:start + chunk, None] + q[None, :]
        rows, cols = np.nonzero(_integer_like(block))
        if np.any(start + rows < cols):
            return True
    return False


def perturb_for_uniqueness(ips: np.ndarray, rounds: int = 3) -> np.ndarray:
    """Deterministic tie-breaking jitter C_s <- C_s (1 + s * eps_p).

    The index s is 1-based.  Singleton and pairwise sums of 2 C_s^2 are
    checked after the jitter; on failure the jitter is redone from the
    original values with eps_p doubled, up to ``rounds`` times.  Checking
    every subset sum is exponential, so larger subsets are left to the
    genericity of the jitter.
    """
    c = np.asarray(ips, dtype=float).reshape(-1)
    if np.any(c < 1.0):
        raise ValueError("IPS values must be at least 1")
    s = np.arange(1, c.size + 1, dtype=float)
    eps = PERTURBATION
    for _ in range(rounds):
        out = c * (1.0 + s * eps)
        if not _has_integer_sums(out) and np.unique(out).size == out.size:
            return out
        eps *= 2.0
    raise PerturbationError("IPS values remain degenerate after perturbation")


def clipping_ips(dataset: Dataset, policy: LinearPolicy, basis: str = "logged") -> np.ndarray:
    """Raw (unperturbed) IPS vector used to decide clipping."""
    if basis == "logged":
        return logged_ips(dataset)
    if basis == "counterfactual":
        return counterfactual_ips(dataset, policy)
    raise ValueError(f"unknown IPS basis {basis!r}; expected one of {BASES}")


def sort_ips(ips: np.ndarray, matched: np.ndarray) -> SortedIpsView:
    ips = np.asarray(ips, dtype=float).reshape(-1)
    matched = np.asarray(matched, dtype=bool).reshape(-1)
    order = np.argsort(ips, kind="stable")
    values = np.concatenate(([0.0], ips[order]))
    return SortedIpsView(order, values, matched[order].astype(float))


def pruning_index(view: SortedIpsView) -> int | None:
    """m* = min{m : 2 C_(m)^2 >= 2(N - m) + 1}, or None when no rank qualifies."""
    n = view.n
    m = np.arange(1, n + 1)
    hits = np.flatnonzero(2.0 * view.phi_tilde >= 2.0 * (n - m) + 1.0)
    return int(hits[0]) + 1 if hits.size else None


def suffix_sums(view: SortedIpsView) -> SuffixSums:
    n = view.n
    s = np.arange(1, n + 1)
    terms = 2.0 * (n - s) + 1.0 - 2.0 * view.phi
    phi = np.zeros(n + 1)
    # reverse cumulative sum, Phi_{N+1} = 0 stays in the last slot
    phi[:n] = np.cumsum(terms[::-1])[::-1]
    return SuffixSums(phi, pruning_index(view))


def build_suffix_sums(
    dataset: Dataset, policy: LinearPolicy, basis: str = "logged"
) -> tuple[SortedIpsView, SuffixSums]:
    """Perturb, sort and accumulate for ``policy`` on ``dataset``."""
    ips = perturb_for_uniqueness(clipping_ips(dataset, policy, basis))
    matched = policy.assign(dataset.covariates) == dataset.treatments
    view = sort_ips(ips, matched)
    return view, suffix_sums(view)


def _strict_argmin(values: np.ndarray, offset: int, candidates_c: np.ndarray) -> int:
    k = int(np.argmin(values))
    ties = np.flatnonzero(values == values[k])
    if ties.size > 1:
        raise ThresholdTieError(
            "non-unique minimum of the suffix sums",
            tuple(float(candidates_c[t + offset - 1]) for t in ties),
        )
    return k + offset


def optimal_rank(view: SortedIpsView, sums: SuffixSums) -> int:
    """Rank m in 0..N with tau_hat = C_(m), using the pruned search.

    Phi_{m+1} is compared over t = m*..N+1.  If the pruning set is empty the
    full range t = 1..N+1 is searched instead.
    """
    start = sums.m_star if sums.m_star is not None else 1
    window = sums.phi[start - 1:]
    t = _strict_argmin(window, start, view.values)
    return t - 1


def _indicator_threshold(phi: np.ndarray, values: np.ndarray, start: int) -> float:
    """sum_m C_(m) * 1{min_{t != m+1} Phi_t - Phi_{m+1} > 0}, t ranging over
    start..N+1 and m over start-1..N."""
    window = phi[start - 1:]
    cand = values[start - 1:]
    if window.size == 1:
        return float(cand[0])
    order = np.argsort(window, kind="stable")
    lowest, second = window[order[0]], window[order[1]]
    rest = np.full(window.size, lowest)
    rest[order[0]] = second
    fired = np.flatnonzero(rest - window > 0)
    if fired.size != 1:
        ties = np.flatnonzero(window == lowest)
        raise ThresholdTieError(
            "non-unique minimum of the suffix sums",
            tuple(float(cand[t]) for t in ties),
        )
    return float(np.sum(cand[fired]))


def optimal_threshold(view: SortedIpsView, sums: SuffixSums) -> float:
    """tau_hat over the pruned window t = m*..N+1 (full window if m* is undefined)."""
    start = sums.m_star if sums.m_star is not None else 1
    return _indicator_threshold(sums.phi, view.values, start)


def unpruned_threshold(view: SortedIpsView, sums: SuffixSums) -> float:
    """Same selection as ``optimal_threshold`` but against every t in 1..N+1."""
    return _indicator_threshold(sums.phi, view.values, 1)


def mse_table(ips: np.ndarray, matched: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Brute-force objective of the threshold problem on the sorted grid.

    Returns (thresholds, bias_sq, variance) with thresholds = (0, C_(1), ...,
    C_(N)), bias_sq = (mean 1{C > tau})^2 and variance = (1/N^2) sum over
    matched samples of C^2 1{C <= tau}.  The objective is
    bias_sq + 2 * variance.
    """
    c = np.asarray(ips, dtype=float).reshape(-1)
    w = np.asarray(matched, dtype=bool).reshape(-1)
    n = c.size
    grid = np.concatenate(([0.0], np.sort(c, kind="stable")))
    above = c[None, :] > grid[:, None]
    bias_sq = (above.sum(axis=1) / n) ** 2
    variance = ((~above) * (w * c * c)[None, :]).sum(axis=1) / n**2
    return grid, bias_sq, variance


def oracle_threshold_arrays(ips: np.ndarray, matched: np.ndarray) -> float:
    """Brute-force minimiser of the threshold objective over the grid."""
    grid, bias_sq, variance = mse_table(ips, matched)
    obj = bias_sq + 2.0 * variance
    k = int(np.argmin(obj))
    ties = np.flatnonzero(obj == obj[k])
    if ties.size > 1:
        raise ThresholdTieError(
            "tie among minimisers of the threshold objective",
            tuple(float(grid[t]) for t in ties),
        )
    return float(grid[k])


def oracle_threshold(dataset: Dataset, policy: LinearPolicy, basis: str = "logged") -> float:
    """Independent brute-force check of ``optimal_threshold``."""
    ips = perturb_for_uniqueness(clipping_ips(dataset, policy, basis))
    matched = policy.assign(dataset.covariates) == dataset.treatments
    return oracle_threshold_arrays(ips, matched)
