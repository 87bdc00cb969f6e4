from __future__ import annotations

import json

import numpy as np
import pytest

from ocdrl.core import Dataset
from ocdrl.hscop import build_problem, eval_psi_eps
from ocdrl.mip import build_full_mip, solve
from ocdrl.pip import (
    PipConfig,
    build_bands,
    induced_binary_pattern,
    nearest_rank,
    psi,
    run_pip,
)

from conftest import make_dataset


def problem(seed, n=8, J=3, p=2):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng, n, J, p)
    return rng, build_problem(ds, rng.uniform(size=(n, J)), "ocdr")


class TestNearestRank:
    def test_half_of_three(self):
        assert nearest_rank(np.array([3.0, 1.0, 2.0]), 0.5) == 2.0
        assert nearest_rank(np.array([-1.0, -2.0, -3.0]), 0.5, upper=True) == -2.0

    def test_extremes(self):
        v = np.array([4.0, 1.0, 2.0, 3.0])
        assert nearest_rank(v, 0.0) == 0.0
        assert nearest_rank(np.array([]), 0.7) == 0.0
        assert nearest_rank(v, 1.0) == 4.0
        assert nearest_rank(v, 1.0, upper=True) == 1.0
        assert nearest_rank(v, 0.25) == 1.0


class TestBands:
    def test_symmetric_margins(self):
        # with eps = 0 the two arms have h1 margins x.v and -x.v
        base = make_dataset(np.random.default_rng(0), 3, 2, 1)
        ds = Dataset(np.array([[1.0], [2.0], [3.0]]), base.treatments, base.rewards,
                     base.propensities, 2, 1.0, base.overlap_floor, base.propensity_model)
        pr = build_problem(ds, 0.5, "ocdr", eps=0.0)
        bands = build_bands(pr, np.array([[1.0], [0.0]]), 0.5)
        assert (bands.lower1, bands.upper1) == (2.0, 2.0)

    def test_zero_ratio_fixes_everything(self):
        rng, pr = problem(1)
        bands = build_bands(pr, rng.normal(size=(3, 2)), 0.0)
        assert bands.as_tuple() == (0.0, 0.0, 0.0, 0.0)

    def test_ratio_range(self):
        _, pr = problem(1)
        with pytest.raises(ValueError):
            build_bands(pr, np.zeros((3, 2)), 1.5)

    def test_bands_grow_with_ratio(self):
        rng, pr = problem(2)
        beta = rng.normal(size=(3, 2))
        small, big = build_bands(pr, beta, 0.1), build_bands(pr, beta, 0.6)
        assert all(a <= b for a, b in zip(small.as_tuple(), big.as_tuple()))

    def test_induced_pattern_at_zero(self):
        _, pr = problem(3)
        pat = induced_binary_pattern(pr, np.zeros((3, 2)))
        # all scores tie, so only the first arm clears the eps gap
        np.testing.assert_array_equal(pat.z1[:, 0], 1.0)
        np.testing.assert_array_equal(pat.z1[:, 1:], 0.0)
        np.testing.assert_array_equal(pat.z2, (pr.arms == 0).astype(float))

    def test_zero_margins_do_not_collapse_bands(self):
        _, pr = problem(3)
        # at beta = 0 the h1 margins are 0 or -eps; the zeros must not
        # take the quantile rank and pin the lower band at 0
        bands = build_bands(pr, np.zeros((3, 2)), 0.05)
        assert bands.lower1 == pytest.approx(pr.eps)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"initial_ratio": 0.6},
        {"min_ratio": 0.1, "initial_ratio": 0.05},
        {"max_iterations": 0},
        {"max_stalls": 0},
        {"expand": -0.1},
        {"time_limit": 0.0},
        {"node_limit": 0},
        {"lam": -1.0},
        {"radius": 0.0},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            PipConfig(**kwargs)


class TestRun:
    def test_monotone_and_bounded(self):
        for seed in range(3):
            rng, pr = problem(seed)
            beta0 = rng.normal(size=(3, 2))
            beta, trace = run_pip(pr, PipConfig(radius=5.0), beta0)
            assert trace.is_monotone()
            assert trace.initial_objective == pytest.approx(eval_psi_eps(pr, beta0))
            assert trace.final_objective == pytest.approx(psi(pr, beta))
            full = solve(build_full_mip(pr, 5.0)).objective
            assert trace.final_objective <= full + 1e-6

    def test_stalls_at_the_optimum(self):
        _, pr = problem(4)
        best = solve(build_full_mip(pr, 5.0)).beta
        cfg = PipConfig(radius=5.0, max_stalls=3, initial_ratio=0.05, expand=0.05)
        beta, trace = run_pip(pr, cfg, best)
        assert len(trace) == 3
        assert not any(it.accepted for it in trace.iterations)
        np.testing.assert_allclose([it.ratio for it in trace.iterations], [0.05, 0.10, 0.15])
        np.testing.assert_array_equal(beta, best)

    def test_ratio_schedule(self):
        rng, pr = problem(5, n=10)
        cfg = PipConfig(radius=5.0, initial_ratio=0.3, shrink=0.1, expand=0.05, max_iterations=6)
        _, trace = run_pip(pr, cfg, rng.normal(size=(3, 2)))
        its = trace.iterations
        assert its[0].ratio == 0.3
        for prev, cur in zip(its, its[1:]):
            step = -0.1 if prev.accepted else 0.05
            expected = min(max(prev.ratio + step, cfg.min_ratio), cfg.max_ratio)
            assert cur.ratio == pytest.approx(expected)

    def test_deterministic(self):
        rng, pr = problem(6)
        beta0 = rng.normal(size=(3, 2))
        a = run_pip(pr, PipConfig(radius=5.0), beta0)
        b = run_pip(pr, PipConfig(radius=5.0), beta0)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1].to_jsonl() == b[1].to_jsonl()

    def test_initial_point_outside_box(self):
        _, pr = problem(7)
        with pytest.raises(ValueError):
            run_pip(pr, PipConfig(radius=1.0), np.full((3, 2), 2.0))

    def test_jsonl_records(self):
        rng, pr = problem(8)
        _, trace = run_pip(pr, PipConfig(radius=5.0, max_iterations=2), rng.normal(size=(3, 2)))
        lines = [json.loads(line) for line in trace.to_jsonl().splitlines()]
        assert lines[0] == {"nu": 0, "objective": trace.initial_objective}
        assert [r["nu"] for r in lines[1:]] == list(range(1, len(trace) + 1))
        assert "wall_time" not in lines[1]
        assert "wall_time" in json.loads(trace.to_jsonl(timing=True).splitlines()[1])
        for r in lines[1:]:
            assert len(r["bands"]) == 4
            assert r["retained_binaries"] >= r["retained_z1"] + r["retained_z2"]

    def test_regularised_objective(self):
        rng, pr = problem(9)
        beta, trace = run_pip(pr, PipConfig(radius=5.0, lam=0.05), rng.normal(size=(3, 2)))
        assert trace.final_objective == pytest.approx(
            eval_psi_eps(pr, beta) - 0.05 * np.abs(beta).sum())
