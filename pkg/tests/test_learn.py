from __future__ import annotations

import json

import numpy as np
import pytest

from ocdrl.bench import generate_statistical
from ocdrl.core import DataValidationError, Dataset
from ocdrl.hscop import build_problem
from ocdrl.learn import (
    LearnerSpec,
    fit_reward_model,
    hinge_fit,
    initial_points,
    learn_policy,
    split_dataset,
)
from ocdrl.pip import PipConfig, psi

from conftest import make_dataset

THETA = np.array([[1.0, 0.5], [-0.5, 1.0], [-0.5, -0.5]])

QUICK = PipConfig(max_iterations=3, max_stalls=2, node_limit=200)


class TestSplit:
    @pytest.mark.parametrize("n,fraction,sizes", [(10, 0.5, (5, 5)), (10, 0.95, (9, 1)),
                                                  (10, 0.01, (1, 9)), (7, 0.5, (3, 4))])
    def test_sizes(self, n, fraction, sizes):
        ds = make_dataset(np.random.default_rng(0), n, 2, 1)
        a, b = split_dataset(ds, fraction, seed=3)
        assert (a.n, b.n) == sizes

    def test_partition_and_determinism(self):
        ds = make_dataset(np.random.default_rng(0), 20, 2, 1)
        a, b = split_dataset(ds, 0.5, seed=4)
        a2, _ = split_dataset(ds, 0.5, seed=4)
        np.testing.assert_array_equal(a.covariates, a2.covariates)
        both = np.sort(np.concatenate([a.rewards, b.rewards]))
        np.testing.assert_array_equal(both, np.sort(ds.rewards))

    def test_rejects(self):
        ds = make_dataset(np.random.default_rng(0), 1, 2, 1)
        with pytest.raises(ValueError):
            split_dataset(ds)
        with pytest.raises(ValueError):
            split_dataset(make_dataset(np.random.default_rng(0), 4, 2, 1), 1.0)


class TestRewardModel:
    def test_interpolates_linear_data(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(size=(40, 2))
        d = np.tile([1, 2], 20)
        y = np.where(d == 1, 0.2 + X @ [0.3, 0.1], 0.5 - X @ [0.2, 0.1])
        probs = np.full((40, 2), 0.5)
        ds = Dataset(X, d, y, probs[:, 0], 2, 1.0, 0.5, probs)
        m = fit_reward_model(ds, ridge=0.0)
        np.testing.assert_allclose(m.weights, [[0.3, 0.1], [-0.2, -0.1]], atol=1e-10)
        np.testing.assert_allclose(m.intercepts, [0.2, 0.5], atol=1e-10)

    def test_empty_arm_falls_back_to_mean(self):
        rng = np.random.default_rng(2)
        probs = np.full((6, 3), 1 / 3)
        d = np.array([1, 2, 1, 2, 1, 2])
        y = rng.uniform(size=6)
        ds = Dataset(rng.uniform(size=(6, 2)), d, y, probs[:, 0], 3, 1.0, 0.3, probs)
        m = fit_reward_model(ds)
        np.testing.assert_array_equal(m.weights[2], 0.0)
        assert m.intercepts[2] == pytest.approx(y.mean())

    def test_recovers_statistical_truth(self):
        ds, _ = generate_statistical(1000, seed=0)
        m = fit_reward_model(ds)
        # the rare third arm has about fifteen samples, so it gets a wider margin
        np.testing.assert_allclose(m.weights[:2], THETA[:2], atol=0.1)
        np.testing.assert_allclose(m.intercepts[:2], 1.2, atol=0.1)
        np.testing.assert_allclose(m.weights[2], THETA[2], atol=0.3)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            fit_reward_model(make_dataset(np.random.default_rng(0), 4, 2, 1), "forest")


class TestInitialPoints:
    def test_hinge_inside_box(self):
        rng = np.random.default_rng(3)
        ds = make_dataset(rng, 30, 3, 2)
        pr = build_problem(ds, rng.uniform(size=(30, 3)), "ocdr")
        beta = hinge_fit(pr, 2.0)
        assert beta.shape == (3, 2) and np.all(np.abs(beta) <= 2.0 + 1e-9)

    def test_candidates(self):
        rng = np.random.default_rng(4)
        ds = make_dataset(rng, 12, 3, 2)
        pr = build_problem(ds, rng.uniform(size=(12, 3)), "ocdr")
        names = [name for name, _ in initial_points(pr, 5.0, 0.0)]
        assert names == ["lp", "hinge", "zero"]
        assert [name for name, _ in initial_points(pr, 5.0, 0.0, "zero")] == ["zero"]


@pytest.fixture(scope="module")
def data():
    return generate_statistical(80, seed=5)[0]


class TestLearnPolicy:
    def test_improves_on_start_and_reports(self, data):
        res = learn_policy(data, LearnerSpec(pip=QUICK))
        assert res.objective >= res.initial_objective - 1e-9
        assert res.trace.is_monotone()
        assert res.tau is not None and res.tau > 0
        out = res.to_dict()
        assert out["estimator"] == "ocdr" and out["init"] in ("lp", "hinge", "zero")
        assert out["pip_iterations"] == len(res.trace)

    def test_best_start_dominates_lp(self, data):
        res = learn_policy(data, LearnerSpec(pip=QUICK))
        lp = res.diagnostics["lp_relaxation_objective"]
        assert lp is None or res.initial_objective >= lp - 1e-9

    def test_reproducible_json(self, data):
        a = learn_policy(data, LearnerSpec(pip=QUICK, seed=2)).to_json()
        b = learn_policy(data, LearnerSpec(pip=QUICK, seed=2)).to_json()
        assert a == b
        assert json.loads(a)["policy"]

    @pytest.mark.parametrize("kind", ["dr", "ipw"])
    def test_other_estimators(self, data, kind):
        res = learn_policy(data, LearnerSpec(estimator=kind, pip=QUICK, init="zero"))
        assert res.tau is None and "tau" not in res.to_dict()

    def test_explicit_model_uses_all_rows(self, data):
        model = fit_reward_model(data)
        res = learn_policy(data, LearnerSpec(pip=QUICK, init="zero"), reward_model=model)
        pr = build_problem(data, model, "ocdr")
        assert res.objective == pytest.approx(psi(pr, res.policy.coefficients))

    def test_needs_propensity_model(self):
        ds = Dataset(np.zeros((4, 1)), [1, 2, 1, 2], np.zeros(4), np.full(4, 0.5), 2, 1.0, 0.5)
        with pytest.raises(DataValidationError):
            learn_policy(ds, LearnerSpec(pip=QUICK))

    @pytest.mark.parametrize("kwargs", [{"estimator": "switch"}, {"split_fraction": 1.0},
                                        {"lam": -1.0}, {"init": "random"}, {"ridge": -1.0}])
    def test_spec_rejects(self, kwargs):
        with pytest.raises(ValueError):
            LearnerSpec(**kwargs)
