"""Data model: logged-bandit datasets, linear policies and reward models.

Treatment labels are 1-based everywhere in the public API.  Arrays that
index arms internally (columns of a propensity or reward matrix) are
0-based, so arm ``j`` lives in column ``j - 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "DataValidationError",
    "Sample",
    "Dataset",
    "LinearPolicy",
    "RewardModel",
    "ConstantRewardModel",
    "LinearRewardModel",
    "CsvSchema",
    "assign",
    "counterfactual_ips",
    "logged_ips",
    "load_dataset",
    "write_dataset",
    "reward_matrix",
]


class DataValidationError(ValueError):
    """Raised when input data violates a dataset invariant."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sample:
    covariates: np.ndarray
    treatment: int
    reward: float
    propensity: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of logged (covariates, treatment, reward, propensity) rows.

    ``propensity_model`` is the optional (N, J) matrix of e(X^s, j) for every
    arm.  It is required to evaluate counterfactual IPS for arbitrary
    policies and therefore for learning.
    """

    covariates: np.ndarray
    treatments: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray
    num_treatments: int
    reward_bound: float
    overlap_floor: float
    propensity_model: np.ndarray | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        d = np.asarray(self.treatments)
        if d.size and not np.all(np.equal(np.mod(d, 1), 0)):
            raise DataValidationError("treatment labels must be integers")
        d = d.astype(np.int64).reshape(-1)
        y = np.asarray(self.rewards, dtype=float).reshape(-1)
        e = np.asarray(self.propensities, dtype=float).reshape(-1)
        n = X.shape[0]
        if not (d.size == y.size == e.size == n):
            raise DataValidationError("column lengths differ")
        J = int(self.num_treatments)
        M = float(self.reward_bound)
        eta = float(self.overlap_floor)
        if J < 1:
            raise DataValidationError("num_treatments must be positive")
        if not M >= 1.0:
            raise DataValidationError("reward_bound must be at least 1")
        if not 0.0 < eta < 1.0:
            raise DataValidationError("overlap_floor must lie in (0, 1)")
        if not np.all(np.isfinite(X)):
            row = int(np.argwhere(~np.isfinite(X))[0, 0])
            raise DataValidationError(f"non-finite covariate at row {row}")
        for k in range(n):
            if not 1 <= d[k] <= J:
                raise DataValidationError(f"treatment label out of range at row {k}")
            if not (e[k] > 0.0 and e[k] >= eta):
                raise DataValidationError(f"overlap violated at row {k}")
            if e[k] > 1.0:
                raise DataValidationError(f"propensity above 1 at row {k}")
            if not 0.0 <= y[k] <= M:
                raise DataValidationError(f"reward outside [0, M] at row {k}")
        model = self.propensity_model
        if model is not None:
            model = np.asarray(model, dtype=float)
            if model.shape != (n, J):
                raise DataValidationError(
                    f"propensity model has shape {model.shape}, expected {(n, J)}"
                )
            for k in range(n):
                row = model[k]
                if abs(row.sum() - 1.0) > 1e-6:
                    raise DataValidationError(f"propensity row does not sum to 1 at row {k}")
                if np.any(row < eta) or np.any(row > 1.0):
                    raise DataValidationError(f"overlap violated at row {k}")
                if abs(row[d[k] - 1] - e[k]) > 1e-9:
                    raise DataValidationError(
                        f"propensity model disagrees with logged propensity at row {k}"
                    )
            model = _frozen(model)
        object.__setattr__(self, "covariates", _frozen(X))
        object.__setattr__(self, "treatments", _frozen(d))
        object.__setattr__(self, "rewards", _frozen(y))
        object.__setattr__(self, "propensities", _frozen(e))
        object.__setattr__(self, "num_treatments", J)
        object.__setattr__(self, "reward_bound", M)
        object.__setattr__(self, "overlap_floor", eta)
        object.__setattr__(self, "propensity_model", model)

    @property
    def n(self) -> int:
        return int(self.covariates.shape[0])

    @property
    def dim(self) -> int:
        return int(self.covariates.shape[1])

    def __len__(self) -> int:
        return self.n

    @property
    def samples(self) -> Iterator[Sample]:
        for k in range(self.n):
            yield Sample(
                self.covariates[k],
                int(self.treatments[k]),
                float(self.rewards[k]),
                float(self.propensities[k]),
            )

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        model = None if self.propensity_model is None else self.propensity_model[idx]
        return Dataset(
            self.covariates[idx],
            self.treatments[idx],
            self.rewards[idx],
            self.propensities[idx],
            self.num_treatments,
            self.reward_bound,
            self.overlap_floor,
            model,
        )

    def require_propensity_model(self) -> np.ndarray:
        if self.propensity_model is None:
            raise DataValidationError(
                "full propensity columns e1..eJ are required for this operation"
            )
        return self.propensity_model


@dataclass(frozen=True, eq=False)
class LinearPolicy:
    """Assigns argmax_j (x . beta_j + b_j), ties going to the lowest index."""

    coefficients: np.ndarray
    base_scores: np.ndarray

    def __post_init__(self) -> None:
        beta = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        b = np.asarray(self.base_scores, dtype=float).reshape(-1)
        if beta.shape[0] != b.size:
            raise ValueError(
                f"{beta.shape[0]} coefficient vectors but {b.size} base scores"
            )
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(b))):
            raise ValueError("policy parameters must be finite")
        object.__setattr__(self, "coefficients", _frozen(beta))
        object.__setattr__(self, "base_scores", _frozen(b))

    @property
    def num_treatments(self) -> int:
        return int(self.base_scores.size)

    @property
    def dim(self) -> int:
        return int(self.coefficients.shape[1])

    @classmethod
    def zeros(cls, num_treatments: int, dim: int) -> "LinearPolicy":
        return cls(np.zeros((num_treatments, dim)), np.zeros(num_treatments))

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.coefficients.T + self.base_scores

    def assign(self, X: np.ndarray) -> np.ndarray:
        """1-based labels for each row of ``X``."""
        # np.argmax returns the first maximiser, which is the tie rule we want.
        return np.argmax(self.scores(X), axis=1).astype(np.int64) + 1

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients.tolist(),
            "base_scores": self.base_scores.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "LinearPolicy":
        return cls(np.asarray(payload["coefficients"], dtype=float),
                   np.asarray(payload["base_scores"], dtype=float))


def assign(policy: LinearPolicy, covariates: np.ndarray) -> int:
    """Label chosen by ``policy`` for a single covariate vector."""
    x = np.asarray(covariates, dtype=float).reshape(1, -1)
    if x.shape[1] != policy.dim:
        raise ValueError(f"expected {policy.dim} covariates, got {x.shape[1]}")
    return int(policy.assign(x)[0])


class RewardModel:
    """Per-arm reward predictor with outputs clamped to [0, M]."""

    reward_bound: float

    def _raw(self, X: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def predict(self, X: np.ndarray) -> np.ndarray:
        """(n, J) matrix of mu_hat(x, j)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.clip(self._raw(X), 0.0, self.reward_bound)


@dataclass(frozen=True, eq=False)
class ConstantRewardModel(RewardModel):
    value: float
    num_treatments: int
    reward_bound: float

    def _raw(self, X: np.ndarray) -> np.ndarray:
        return np.full((X.shape[0], self.num_treatments), float(self.value))


@dataclass(frozen=True, eq=False)
class LinearRewardModel(RewardModel):
    """mu_hat(x, j) = x . weights[j] + intercepts[j], clamped."""

    weights: np.ndarray
    intercepts: np.ndarray
    reward_bound: float

    def _raw(self, X: np.ndarray) -> np.ndarray:
        return X @ np.asarray(self.weights).T + np.asarray(self.intercepts)

    def to_dict(self) -> dict:
        return {
            "weights": np.asarray(self.weights).tolist(),
            "intercepts": np.asarray(self.intercepts).tolist(),
            "reward_bound": self.reward_bound,
        }


def reward_matrix(dataset: Dataset, reward_model: RewardModel | np.ndarray | float) -> np.ndarray:
    """Resolve a reward model into the (N, J) matrix of mu_hat on ``dataset``.

    A precomputed matrix or a scalar constant is accepted as well and is
    clamped to [0, M] the same way a model would be.
    """
    n, J, M = dataset.n, dataset.num_treatments, dataset.reward_bound
    if isinstance(reward_model, RewardModel):
        mu = reward_model.predict(dataset.covariates)
    elif np.isscalar(reward_model):
        mu = np.full((n, J), float(reward_model))
    else:
        mu = np.asarray(reward_model, dtype=float)
    if mu.shape != (n, J):
        raise ValueError(f"reward matrix has shape {mu.shape}, expected {(n, J)}")
    return np.clip(mu, 0.0, M)


def logged_ips(dataset: Dataset) -> np.ndarray:
    """1 / e(X^s, D_s)."""
    return 1.0 / dataset.propensities


def counterfactual_ips(dataset: Dataset, policy: LinearPolicy) -> np.ndarray:
    """C_s = 1 / e(X^s, g(X^s)) under the candidate policy."""
    model = dataset.require_propensity_model()
    g = policy.assign(dataset.covariates)
    return 1.0 / model[np.arange(dataset.n), g - 1]


# ---------------------------------------------------------------- CSV I/O


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for CSV ingestion.

    ``covariates=None`` picks every column named ``x<k>`` in numeric order.
    ``labels`` maps external treatment labels (as written in the file) to
    1-based internal labels; without it labels are read as integers as-is.
    """

    covariates: tuple[str, ...] | None = None
    treatment: str = "d"
    reward: str = "y"
    propensity: str = "e"
    propensity_prefix: str = "e"
    labels: Mapping[str, int] | None = None
    num_treatments: int | None = None


def _covariate_columns(header: Sequence[str]) -> list[str]:
    cols = [c for c in header if c.startswith("x") and c[1:].isdigit()]
    return sorted(cols, key=lambda c: int(c[1:]))


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataValidationError(f"non-numeric value {text!r} in column '{column}' at row {row}") from None


def load_dataset(
    path: str | Path,
    schema: CsvSchema | None = None,
    bounds: tuple[float, float] | None = None,
) -> Dataset:
    """Read and validate a CSV file.

    ``bounds`` is (M, eta).  When omitted, M defaults to max(1, max reward)
    and eta to the smallest propensity found in the file.
    """
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError("empty file") from None
        rows = [r for r in reader if r]
    cov = list(schema.covariates) if schema.covariates is not None else _covariate_columns(header)
    if not cov:
        raise DataValidationError("missing column 'x1'")
    for name in [*cov, schema.treatment, schema.reward]:
        if name not in header:
            raise DataValidationError(f"missing column '{name}'")
    pos = {name: k for k, name in enumerate(header)}

    def label(text: str, k: int) -> int:
        if schema.labels is not None:
            if text not in schema.labels:
                raise DataValidationError(f"treatment label out of range at row {k}")
            return int(schema.labels[text])
        value = _parse_float(text, schema.treatment, k)
        if value != int(value):
            raise DataValidationError(f"treatment label out of range at row {k}")
        return int(value)

    n = len(rows)
    X = np.empty((n, len(cov)))
    d = np.empty(n, dtype=np.int64)
    y = np.empty(n)
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise DataValidationError(f"row {k} has {len(r)} fields, expected {len(header)}")
        X[k] = [_parse_float(r[pos[c]], c, k) for c in cov]
        d[k] = label(r[pos[schema.treatment]].strip(), k)
        y[k] = _parse_float(r[pos[schema.reward]], schema.reward, k)

    arm_cols = []
    J = schema.num_treatments
    if J is None:
        k = 1
        while f"{schema.propensity_prefix}{k}" in pos:
            k += 1
        J = k - 1 if k > 1 else (len(schema.labels) if schema.labels else int(d.max(initial=1)))
    candidate = [f"{schema.propensity_prefix}{j}" for j in range(1, J + 1)]
    if all(c in pos for c in candidate):
        arm_cols = candidate
    model = None
    for k in range(n):
        if not 1 <= d[k] <= J:
            raise DataValidationError(f"treatment label out of range at row {k}")
    if arm_cols:
        model = np.array([[_parse_float(r[pos[c]], c, k) for c in arm_cols] for k, r in enumerate(rows)])
        model = model.reshape(n, J)
        e = model[np.arange(n), d - 1]
        if schema.propensity in pos:
            logged = np.array([_parse_float(r[pos[schema.propensity]], schema.propensity, k)
                               for k, r in enumerate(rows)])
            bad = np.flatnonzero(np.abs(logged - e) > 1e-9)
            if bad.size:
                raise DataValidationError(
                    f"propensity model disagrees with logged propensity at row {int(bad[0])}"
                )
    elif schema.propensity in pos:
        e = np.array([_parse_float(r[pos[schema.propensity]], schema.propensity, k)
                      for k, r in enumerate(rows)])
    else:
        raise DataValidationError(
            f"missing column '{schema.propensity}' (or per-arm columns "
            f"{schema.propensity_prefix}1..{schema.propensity_prefix}{J})"
        )
    for k in range(n):
        if not e[k] > 0.0:
            raise DataValidationError(f"overlap violated at row {k}")
        if model is not None and np.any(model[k] <= 0.0):
            raise DataValidationError(f"overlap violated at row {k}")
    if bounds is None:
        M = max(1.0, float(y.max(initial=0.0)))
        floor = float(e.min(initial=1.0)) if model is None else float(model.min(initial=1.0))
        eta = min(floor, 1.0 - 1e-12)
    else:
        M, eta = float(bounds[0]), float(bounds[1])
    return Dataset(X, d, y, e, J, M, eta, model)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` as CSV using the default schema.

    Floats are written with ``repr`` so a round trip is exact.
    """
    p = dataset.dim
    J = dataset.num_treatments
    header = [f"x{k}" for k in range(1, p + 1)] + ["d", "y", "e"]
    if dataset.propensity_model is not None:
        header += [f"e{j}" for j in range(1, J + 1)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k in range(dataset.n):
            row = [_fmt(v) for v in dataset.covariates[k]]
            row += [str(int(dataset.treatments[k])), _fmt(dataset.rewards[k]),
                    _fmt(dataset.propensities[k])]
            if dataset.propensity_model is not None:
                row += [_fmt(v) for v in dataset.propensity_model[k]]
            writer.writerow(row)
