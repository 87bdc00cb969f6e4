"""A small mixed-integer linear program container.

Programs are always maximisation problems

    max  cost . x + offset
    s.t. row_lower <= A x <= row_upper,  lower <= x <= upper,
         x_k in {0, 1} for k with integer[k].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

__all__ = ["IntegerProgram", "MarginRow", "ProgramBuilder"]


@dataclass(frozen=True)
class MarginRow:
    """A row whose bound may be shifted inward by a small margin.

    The shift applies when every ``(var, value)`` in ``conditions`` holds in
    the binary assignment being polished.  ``side`` is +1 to raise the
    lower bound and -1 to lower the upper bound.  Polishing with a margin
    keeps the continuous solution strictly inside the cell selected by the
    binaries, so that re-evaluating the step functions reproduces them.
    """

    row: int
    side: int
    conditions: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True, eq=False)
class IntegerProgram:
    names: tuple[str, ...]
    cost: np.ndarray
    offset: float
    lower: np.ndarray
    upper: np.ndarray
    integer: np.ndarray
    A: sp.csr_matrix
    row_lower: np.ndarray
    row_upper: np.ndarray
    row_names: tuple[str, ...]
    groups: Mapping[str, np.ndarray] = field(default_factory=dict)
    big_m: Mapping[str, float] = field(default_factory=dict)
    margin_rows: tuple[MarginRow, ...] = ()
    # maps any candidate point to a feasible, self-consistent point
    completion: Callable[[np.ndarray], np.ndarray] | None = None
    beta_shape: tuple[int, int] | None = None
    regularization: float = 0.0

    @property
    def num_vars(self) -> int:
        return len(self.names)

    @property
    def num_rows(self) -> int:
        return int(self.A.shape[0])

    @property
    def binaries(self) -> np.ndarray:
        """Indices of binary variables that are not fixed by their bounds."""
        idx = np.flatnonzero(self.integer)
        return idx[self.lower[idx] < self.upper[idx]]

    @property
    def num_binaries(self) -> int:
        return int(self.binaries.size)

    def group(self, name: str) -> np.ndarray:
        return np.asarray(self.groups.get(name, np.zeros(0, dtype=np.int64)))

    def objective(self, x: np.ndarray) -> float:
        return float(self.cost @ x + self.offset)

    def beta(self, x: np.ndarray) -> np.ndarray | None:
        if self.beta_shape is None:
            return None
        if "beta" in self.groups:
            b = x[self.groups["beta"]]
        else:
            b = x[self.groups["beta_pos"]] - x[self.groups["beta_neg"]]
        return np.asarray(b, dtype=float).reshape(self.beta_shape)

    def regularization_value(self, x: np.ndarray) -> float:
        if self.regularization == 0.0 or self.beta_shape is None:
            return 0.0
        return float(self.regularization * np.abs(self.beta(x)).sum())

    def violation(self, x: np.ndarray) -> float:
        """Largest violation over rows, bounds and integrality."""
        x = np.asarray(x, dtype=float)
        ax = self.A @ x
        worst = 0.0
        if ax.size:
            worst = max(worst, float(np.max(self.row_lower - ax, initial=0.0)),
                        float(np.max(ax - self.row_upper, initial=0.0)))
        worst = max(worst, float(np.max(self.lower - x, initial=0.0)),
                    float(np.max(x - self.upper, initial=0.0)))
        xi = x[self.integer]
        if xi.size:
            worst = max(worst, float(np.max(np.abs(xi - np.round(xi)))))
        return worst

    def is_feasible(self, x: np.ndarray, tol: float = 1e-6) -> bool:
        return self.violation(x) <= tol

    def with_bounds(self, lower: np.ndarray, upper: np.ndarray) -> "IntegerProgram":
        fields = dict(self.__dict__)
        fields["lower"] = np.asarray(lower, dtype=float)
        fields["upper"] = np.asarray(upper, dtype=float)
        return IntegerProgram(**fields)

    def fix_binaries(self, values: np.ndarray) -> "IntegerProgram":
        """Copy with every binary fixed to the rounded entry of ``values``."""
        lo = self.lower.copy()
        hi = self.upper.copy()
        idx = np.flatnonzero(self.integer)
        v = np.round(np.asarray(values, dtype=float)[idx])
        lo[idx] = v
        hi[idx] = v
        return self.with_bounds(lo, hi)

    def to_lp(self) -> str:
        """Serialise in CPLEX LP text format.

        Ranged rows become two rows with suffixes ``_lo`` and ``_hi``; the
        objective offset is written as a comment since not every reader
        accepts constants in the objective.
        """
        names = [_lp_name(n) for n in self.names]

        def expr(cols, vals) -> str:
            parts = []
            for c, v in zip(cols, vals):
                if v == 0:
                    continue
                sign = "-" if v < 0 else "+"
                parts.append(f"{sign} {abs(v):.17g} {names[c]}")
            text = " ".join(parts) if parts else "0 " + names[0]
            return text[2:] if text.startswith("+ ") else text

        lines = ["\\ mixed-integer program written by ocdrl",
                 f"\\ objective offset: {self.offset:.17g}", "Maximize"]
        nz = np.flatnonzero(self.cost)
        lines.append(" obj: " + expr(nz, self.cost[nz]))
        lines.append("Subject To")
        A = self.A.tocsr()
        for r in range(self.num_rows):
            cols = A.indices[A.indptr[r]:A.indptr[r + 1]]
            vals = A.data[A.indptr[r]:A.indptr[r + 1]]
            e = expr(cols, vals)
            lo, hi = self.row_lower[r], self.row_upper[r]
            rn = _lp_name(self.row_names[r])
            if lo == hi:
                lines.append(f" {rn}: {e} = {lo:.17g}")
                continue
            if np.isfinite(lo):
                suffix = "_lo" if np.isfinite(hi) else ""
                lines.append(f" {rn}{suffix}: {e} >= {lo:.17g}")
            if np.isfinite(hi):
                suffix = "_hi" if np.isfinite(lo) else ""
                lines.append(f" {rn}{suffix}: {e} <= {hi:.17g}")
        lines.append("Bounds")
        for k, n in enumerate(names):
            lo, hi = self.lower[k], self.upper[k]
            if self.integer[k] and lo == 0 and hi == 1:
                continue
            if not np.isfinite(lo) and not np.isfinite(hi):
                lines.append(f" {n} free")
            elif lo == hi:
                lines.append(f" {n} = {lo:.17g}")
            else:
                left = f"{lo:.17g}" if np.isfinite(lo) else "-inf"
                right = f"{hi:.17g}" if np.isfinite(hi) else "+inf"
                lines.append(f" {left} <= {n} <= {right}")
        bins = [names[k] for k in np.flatnonzero(self.integer)]
        if bins:
            lines.append("Binaries")
            for start in range(0, len(bins), 10):
                lines.append(" " + " ".join(bins[start:start + 10]))
        lines.append("End")
        return "\n".join(lines) + "\n"


def _lp_name(name: str) -> str:
    # brackets open quadratic terms in LP files, so z1[2,3] becomes z1(2_3)
    name = name.replace("[", "(").replace("]", ")")
    return "".join(ch if ch.isalnum() or ch in "_.()" else "_" for ch in name)


class ProgramBuilder:
    """Incremental assembly of an ``IntegerProgram``."""

    def __init__(self) -> None:
        self.names: list[str] = []
        self.cost: list[float] = []
        self.lower: list[float] = []
        self.upper: list[float] = []
        self.integer: list[bool] = []
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.row_lower: list[float] = []
        self.row_upper: list[float] = []
        self.row_names: list[str] = []
        self.offset = 0.0

    def var(self, name: str, lb: float, ub: float, cost: float = 0.0, binary: bool = False) -> int:
        self.names.append(name)
        self.lower.append(float(lb))
        self.upper.append(float(ub))
        self.cost.append(float(cost))
        self.integer.append(bool(binary))
        return len(self.names) - 1

    def add_cost(self, col: int, value: float) -> None:
        self.cost[col] += float(value)

    def row(self, terms, lo: float = -np.inf, hi: float = np.inf, name: str = "") -> int:
        r = len(self.row_lower)
        merged: dict[int, float] = {}
        for c, v in terms:
            merged[c] = merged.get(c, 0.0) + float(v)
        for c in sorted(merged):
            if merged[c] != 0.0:
                self.rows.append(r)
                self.cols.append(c)
                self.vals.append(merged[c])
        self.row_lower.append(float(lo))
        self.row_upper.append(float(hi))
        self.row_names.append(name or f"r{r}")
        return r

    def build(self, **extra) -> IntegerProgram:
        n = len(self.names)
        m = len(self.row_lower)
        A = sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(m, n))
        A.sort_indices()
        return IntegerProgram(
            names=tuple(self.names),
            cost=np.asarray(self.cost, dtype=float),
            offset=float(self.offset),
            lower=np.asarray(self.lower, dtype=float),
            upper=np.asarray(self.upper, dtype=float),
            integer=np.asarray(self.integer, dtype=bool),
            A=A,
            row_lower=np.asarray(self.row_lower, dtype=float),
            row_upper=np.asarray(self.row_upper, dtype=float),
            row_names=tuple(self.row_names),
            **extra,
        )
