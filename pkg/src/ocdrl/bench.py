"""Synthetic benchmarks: data-generating processes, evaluation and the experiment runner.

Two generators are provided.  The computational one draws 20-dimensional
covariates from a finite support with four exponential reward surfaces;
the statistical one is a two-dimensional, three-arm problem where the
logging policy rarely plays the suboptimal and worst arms.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Dataset, LinearPolicy
from .estimators import dr_scores, ocdr_value
from .learn import LearnerSpec, fit_reward_model, learn_policy, split_dataset

__all__ = [
    "DgpSpec",
    "TruthModel",
    "EvalReport",
    "ExperimentCell",
    "METHODS",
    "generate_computational",
    "computational_instance",
    "generate_statistical",
    "evaluate_policy",
    "constant_policy",
    "run_experiment",
    "mse_study",
]

log = logging.getLogger(__name__)

METHODS = {"ocdrl": "ocdr", "drl": "dr", "ipwl": "ipw"}

STAT_THETA = np.array([[1.0, 0.5], [-0.5, 1.0], [-0.5, -0.5]])
STAT_INTERCEPT = 0.2


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of either generator.

    ``reward_offset`` shifts every statistical reward by the same constant
    so that rewards are nonnegative; it changes no policy comparison.
    ``logging_probs`` is the raw (optimal, suboptimal, worst) triple, which
    is renormalised to sum to one.
    """

    kind: str = "statistical"
    n: int = 400
    support: int = 100
    seed: int = 0
    noise_sd: float = 0.1
    reward_offset: float = 1.0
    reward_bound: float = 3.5
    logging_probs: tuple[float, float, float] = (0.9, 0.185, 0.015)
    lognormal_var: float = 0.001
    num_covariates: int = 20

    def __post_init__(self) -> None:
        if self.kind not in ("statistical", "computational"):
            raise ValueError(f"unknown generator {self.kind!r}")
        if self.n < 1 or self.support < 1 or self.num_covariates < 3:
            raise ValueError("sizes must be positive")
        if self.noise_sd < 0 or self.lognormal_var < 0:
            raise ValueError("noise parameters must be nonnegative")
        if min(self.logging_probs) <= 0:
            raise ValueError("logging probabilities must be positive")


@dataclass(frozen=True, eq=False)
class TruthModel:
    """Noise-free mean rewards and the covariate distribution of a generator."""

    kind: str
    num_treatments: int
    params: dict = field(default_factory=dict)

    def mean(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "statistical":
            return self.params["offset"] + STAT_INTERCEPT + X @ STAT_THETA.T
        return _computational_means(X, self.params["r"]) + self.params["noise_mean"]

    def oracle(self, X: np.ndarray) -> np.ndarray:
        """1-based optimal arm per row."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "statistical":
            return np.where(X[:, 1] <= 3.0 * X[:, 0], 1, 2)
        return np.argmax(self.mean(X), axis=1) + 1

    def sample_covariates(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "statistical":
            return rng.uniform(size=(n, 2))
        support = self.params["support"]
        return support[rng.integers(support.shape[0], size=n)]

    def sample_rewards(self, X: np.ndarray, arms: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(X)[np.arange(len(arms)), np.asarray(arms) - 1]
        if self.kind == "statistical":
            y = mu + rng.normal(0.0, self.params["noise_sd"], size=len(arms))
        else:
            sd = np.sqrt(self.params["lognormal_var"])
            y = mu - self.params["noise_mean"] + rng.lognormal(0.0, sd, size=len(arms))
        return np.clip(y, 0.0, self.params["bound"])


def _computational_means(X: np.ndarray, r: int) -> np.ndarray:
    x0, x1, x2, xr = X[:, 0], X[:, 1], X[:, 2], X[:, r]
    y1 = np.exp(1.2 + 0.2 * x0 + 1.7 * x1 - 0.2 * x2 + 2 * x0 * x1)
    y2 = np.exp(1.0 - x0 + 2 * x1 + 2 * x0 * x1)
    y3 = np.exp(1.2 + 0.2 * x0 + 1.7 * x1 - 0.1 * x2 + 2 * x0 * x1 + 1.3 * x0 * x1)
    y4 = np.exp(1.6 + 2 * x0 - 0.1 * x1 + 2 * x0 * x1 - 1.2 * x1 * x2)
    return np.column_stack([y1, y2, y3, y4]) + xr[:, None]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _draw_arms(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(size=probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    arms = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(arms, probs.shape[1] - 1) + 1


def computational_instance(spec: DgpSpec) -> tuple[Dataset, TruthModel]:
    """Dataset and truth model of the 20-dimensional, four-arm generator."""
    if spec.kind != "computational":
        spec = replace(spec, kind="computational")
    rng = np.random.default_rng(spec.seed)
    p, J = spec.num_covariates, 4
    support = rng.uniform(size=(spec.support, p))
    theta = rng.normal(size=(p, J))
    r = int(rng.integers(p))  # the random covariate index, drawn once per dataset
    X = support[rng.integers(spec.support, size=spec.n)]
    probs = _softmax(X @ theta)
    d = _draw_arms(probs, rng)
    sd = np.sqrt(spec.lognormal_var)
    noise_mean = float(np.exp(sd**2 / 2))
    # largest mean: exp(6.4) + 1, plus lognormal noise
    bound = float(np.ceil(np.exp(6.4) + 1.0 + np.exp(6 * sd)))
    truth = TruthModel("computational", J, {
        "r": r, "support": support, "noise_mean": noise_mean,
        "lognormal_var": spec.lognormal_var, "bound": bound, "theta": theta,
    })
    y = truth.sample_rewards(X, d, rng)
    e = probs[np.arange(spec.n), d - 1]
    ds = Dataset(X, d, y, e, J, bound, float(probs.min()), probs)
    return ds, truth


def generate_computational(spec: DgpSpec) -> Dataset:
    return computational_instance(spec)[0]


def _statistical_probs(X: np.ndarray, raw: Sequence[float]) -> np.ndarray:
    p_opt, p_sub, p_worst = np.asarray(raw, dtype=float) / float(np.sum(raw))
    best0 = X[:, 1] <= 3.0 * X[:, 0]
    probs = np.empty((X.shape[0], 3))
    probs[:, 0] = np.where(best0, p_opt, p_sub)
    probs[:, 1] = np.where(best0, p_sub, p_opt)
    probs[:, 2] = p_worst
    return probs


def generate_statistical(n: int, seed: int = 0, spec: DgpSpec | None = None) -> tuple[Dataset, TruthModel]:
    """Three-arm, two-covariate data with a skewed logging policy."""
    if n < 1:
        raise ValueError("sample size must be positive")
    spec = DgpSpec(n=n, seed=seed) if spec is None else replace(spec, kind="statistical", n=n, seed=seed)
    rng = np.random.default_rng(seed)
    truth = TruthModel("statistical", 3, {
        "offset": spec.reward_offset, "noise_sd": spec.noise_sd, "bound": spec.reward_bound,
        "logging_probs": tuple(spec.logging_probs),
    })
    X = rng.uniform(size=(n, 2))
    probs = _statistical_probs(X, spec.logging_probs)
    d = _draw_arms(probs, rng)
    y = truth.sample_rewards(X, d, rng)
    e = probs[np.arange(n), d - 1]
    ds = Dataset(X, d, y, e, 3, spec.reward_bound, float(probs.min()), probs)
    return ds, truth


@dataclass(frozen=True)
class EvalReport:
    gap: float
    policy_value: float
    oracle_value: float
    freq_opt: float
    freq_sub: float
    freq_worst: float
    test_size: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_policy(
    policy: LinearPolicy, truth: TruthModel, test_size: int = 10_000, seed: int = 0, noisy: bool = False
) -> EvalReport:
    """Suboptimality gap and selection frequencies on a fresh test sample.

    By default rewards are the noise-free means; ``noisy`` averages sampled
    rewards instead.  Arms are categorised per row as optimal (best mean),
    worst (lowest mean) or suboptimal (anything else).
    """
    rng = np.random.default_rng(seed)
    X = truth.sample_covariates(test_size, rng)
    mu = truth.mean(X)
    g = policy.assign(X)
    star = truth.oracle(X)
    rows = np.arange(test_size)
    if noisy:
        v_pol = float(np.mean(truth.sample_rewards(X, g, rng)))
        v_opt = float(np.mean(truth.sample_rewards(X, star, rng)))
    else:
        v_pol = float(np.mean(mu[rows, g - 1]))
        v_opt = float(np.mean(mu[rows, star - 1]))
    worst = np.argmin(mu, axis=1) + 1
    opt = g == star
    bad = (g == worst) & ~opt
    return EvalReport(
        gap=v_opt - v_pol,
        policy_value=v_pol,
        oracle_value=v_opt,
        freq_opt=float(np.mean(opt)),
        freq_sub=float(np.mean(~opt & ~bad)),
        freq_worst=float(np.mean(bad)),
        test_size=int(test_size),
    )


def constant_policy(arm: int, num_treatments: int, dim: int) -> LinearPolicy:
    """Policy that always picks ``arm`` (1-based) through its base scores."""
    b = np.zeros(num_treatments)
    b[arm - 1] = 1.0
    return LinearPolicy(np.zeros((num_treatments, dim)), b)


@dataclass(frozen=True)
class ExperimentCell:
    method: str
    n: int
    seeds: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {tuple(METHODS)}")
        if self.n < 2:
            raise ValueError("sample size must be at least 2")


def _test_seed(seed: int) -> int:
    # an independent stream for the test sample of each replication
    return int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


def _replicate(args) -> dict:
    method, n, seed, spec, dgp, test_size = args
    start = time.perf_counter()
    ds, truth = generate_statistical(n, seed, dgp)
    learner = replace(spec, estimator=METHODS[method], seed=seed)
    learned = learn_policy(ds, learner)
    report = evaluate_policy(learned.policy, truth, test_size, _test_seed(seed))
    return {
        "method": method, "n": n, "seed": seed, "report": report,
        "trace": learned.trace.to_jsonl(), "wall_time": time.perf_counter() - start,
    }


def _fmt(x: float) -> str:
    return repr(float(x))


def run_experiment(
    grid: Sequence[ExperimentCell],
    out: str | Path,
    spec: LearnerSpec | None = None,
    dgp: DgpSpec | None = None,
    test_size: int = 10_000,
    jobs: int = 1,
    timing: bool = False,
) -> dict:
    """Run every (method, N, seed) replication and write the result tables.

    Outputs in ``out``: results.csv (one row per replication), aggregate.csv
    (mean and std per cell), ordering.json, manifest.json and one PIP trace
    per replication under traces/.  Wall times are written only with
    ``timing`` so that reruns are byte-identical.
    """
    out = Path(out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    spec = LearnerSpec() if spec is None else spec
    dgp = DgpSpec() if dgp is None else dgp
    tasks = [(c.method, c.n, s, spec, dgp, test_size) for c in grid for s in c.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_replicate, tasks))
    else:
        rows = [_replicate(t) for t in tasks]

    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "N", "seed", "gap", "freq_opt", "freq_sub", "freq_worst", "wall_time"])
        for r in rows:
            rep = r["report"]
            w.writerow([r["method"], r["n"], r["seed"], _fmt(rep.gap), _fmt(rep.freq_opt),
                        _fmt(rep.freq_sub), _fmt(rep.freq_worst),
                        f"{r['wall_time']:.3f}" if timing else ""])
    for r in rows:
        (out / "traces" / f"{r['method']}_N{r['n']}_seed{r['seed']}.jsonl").write_text(r["trace"])

    cells: dict[tuple[str, int], list[EvalReport]] = {}
    for r in rows:
        cells.setdefault((r["method"], r["n"]), []).append(r["report"])
    aggregate = []
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = ("gap", "freq_opt", "freq_sub", "freq_worst")
        w.writerow(["method", "N", "runs"] + [f"{k}_{s}" for k in keys for s in ("mean", "std")])
        for (method, n), reps in cells.items():
            stats = {"method": method, "N": n, "runs": len(reps)}
            line = [method, n, len(reps)]
            for k in keys:
                v = np.array([getattr(rep, k) for rep in reps])
                mean, std = float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
                stats[f"{k}_mean"], stats[f"{k}_std"] = mean, std
                line += [_fmt(mean), _fmt(std)]
            w.writerow(line)
            aggregate.append(stats)

    ordering = _ordering(aggregate)
    (out / "ordering.json").write_text(json.dumps(ordering, indent=2, sort_keys=True) + "\n")
    manifest = {
        "grid": [asdict(c) for c in grid],
        "learner": _jsonable(asdict(spec)),
        "dgp": _jsonable(asdict(dgp)),
        "test_size": test_size,
        "outputs": ["results.csv", "aggregate.csv", "ordering.json", "traces/"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {"rows": rows, "aggregate": aggregate, "ordering": ordering}


def _ordering(aggregate: list[dict]) -> list[dict]:
    """Per N: mean gaps by method and whether OCDRL < DRL < IPWL holds."""
    out = []
    for n in sorted({a["N"] for a in aggregate}):
        gaps = {a["method"]: a["gap_mean"] for a in aggregate if a["N"] == n}
        worst = {a["method"]: a["freq_worst_mean"] for a in aggregate if a["N"] == n}
        entry = {"N": n, "gap_mean": gaps, "freq_worst_mean": worst}
        if all(m in gaps for m in METHODS):
            entry["ordering_holds"] = bool(gaps["ocdrl"] < gaps["drl"] < gaps["ipwl"])
            entry["reduction_vs_ipwl"] = (1.0 - gaps["ocdrl"] / gaps["ipwl"]) if gaps["ipwl"] > 0 else None
            entry["worst_freq_lowest"] = bool(worst["ocdrl"] <= worst["drl"] and worst["ocdrl"] <= worst["ipwl"])
        out.append(entry)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("OCDR_JOBS", "1")))
    except ValueError:
        return 1


def mse_study(n: int = 400, replications: int = 200, seed: int = 0, arm: int = 3,
              dgp: DgpSpec | None = None, nuisance: str = "split") -> dict:
    """Empirical MSE of OCDR and DR value estimates for a constant policy.

    With ``nuisance="split"`` each replication fits the reward model on one
    half and estimates the policy value on the other, as the learner does.
    ``nuisance="oracle"`` plugs in the true mean rewards instead and keeps
    the whole sample, isolating the variance of the correction terms.  The
    truth is the analytic mean over the unit square.
    """
    if nuisance not in ("split", "oracle"):
        raise ValueError(f"unknown nuisance mode {nuisance!r}")
    estimates = {"ocdr": [], "dr": []}
    truth_value = None
    policy = constant_policy(arm, 3, 2)
    for k in range(replications):
        ds, truth = generate_statistical(n, seed + k, dgp)
        if truth_value is None:
            # mean of a linear function over the unit square
            truth_value = float(truth.mean(np.array([[0.5, 0.5]]))[0, arm - 1])
        if nuisance == "split":
            d1, d2 = split_dataset(ds, 0.5, seed + k)
            model = fit_reward_model(d1)
        else:
            d2 = ds
            model = truth.mean(ds.covariates)
        estimates["ocdr"].append(ocdr_value(d2, policy, model).value)
        estimates["dr"].append(dr_scores(d2, policy, model).value)
    out = {"truth": truth_value, "replications": replications, "n": n, "nuisance": nuisance}
    for key, vals in estimates.items():
        v = np.asarray(vals)
        out[f"{key}_mse"] = float(np.mean((v - truth_value) ** 2))
        out[f"{key}_mean"] = float(np.mean(v))
    out["ratio"] = out["ocdr_mse"] / out["dr_mse"]
    return out
