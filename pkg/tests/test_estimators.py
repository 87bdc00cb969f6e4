from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocdrl.core import Dataset, LinearPolicy
from ocdrl.estimators import (
    cdr_scores,
    diagnostic_bounds,
    dm_scores,
    dm_value,
    dr_scores,
    estimator_report,
    ips_weight_histogram,
    ipw_scores,
    mse_objective,
    ocdr_value,
)
from ocdrl.threshold import oracle_threshold

from conftest import make_dataset


def two_sample(c=(2.0, 4.0), y=(1.0, 0.0), arm=1):
    """Two rows logged on arm 1 with IPS ``c``; the zero policy picks arm 1."""
    e = 1.0 / np.asarray(c)
    model = np.column_stack([e, 1 - e])
    ds = Dataset(np.zeros((2, 1)), [arm, arm], list(y), e, 2, 1.0, float(min(e.min(), (1 - e).min())), model)
    return ds, LinearPolicy.zeros(2, 1)


class TestCdr:
    def test_hand_example(self):
        ds, pol = two_sample()
        sv = cdr_scores(ds, pol, 0.5, 2.0)
        np.testing.assert_allclose(sv.scores, [1.5, 0.5])
        assert sv.value == pytest.approx(1.0)

    def test_full_clipping_is_dm(self):
        ds, pol = two_sample()
        np.testing.assert_array_equal(cdr_scores(ds, pol, 0.5, 0.0).scores, [0.5, 0.5])

    def test_no_clipping_is_dr(self):
        ds, pol = two_sample()
        np.testing.assert_allclose(cdr_scores(ds, pol, 0.5, 4.0).scores, [1.5, -1.5])
        np.testing.assert_allclose(dr_scores(ds, pol, 0.5).scores, [1.5, -1.5])

    def test_negative_threshold(self):
        ds, pol = two_sample()
        with pytest.raises(ValueError):
            cdr_scores(ds, pol, 0.5, -1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_interpolation_identity(self, seed):
        rng = np.random.default_rng(seed)
        ds = make_dataset(rng, int(rng.integers(1, 40)), int(rng.integers(2, 5)), 2)
        pol = LinearPolicy(rng.normal(size=(ds.num_treatments, 2)), np.zeros(ds.num_treatments))
        mu = rng.uniform(size=(ds.n, ds.num_treatments))
        np.testing.assert_array_equal(cdr_scores(ds, pol, mu, 0.0).scores, dm_scores(ds, pol, mu).scores)
        top = float((1.0 / ds.propensities).max())
        np.testing.assert_array_equal(cdr_scores(ds, pol, mu, top).scores, dr_scores(ds, pol, mu).scores)
        np.testing.assert_array_equal(
            ipw_scores(ds, pol).scores, cdr_scores(ds, pol, 0.0, 1.0 / ds.overlap_floor).scores
        )


class TestDm:
    def test_constant_model(self):
        ds = make_dataset(np.random.default_rng(0), 9, 3, 2)
        assert dm_value(ds, LinearPolicy.zeros(3, 2), 0.5) == pytest.approx(0.5)

    def test_two_point_mean(self):
        ds, pol = two_sample()
        assert dm_value(ds, pol, np.array([[0.2, 0.9], [0.8, 0.1]])) == pytest.approx(0.5)

    def test_statistical_truth_mean(self):
        rng = np.random.default_rng(0)
        n = 200_000
        X = rng.uniform(size=(n, 2))
        probs = np.full((n, 3), 1 / 3)
        ds = Dataset(X, np.ones(n, dtype=int), np.zeros(n), probs[:, 0], 3, 2.0, 0.3, probs)
        theta = np.array([[1.0, 0.5], [-0.5, 1.0], [-0.5, -0.5]])
        mu = 0.2 + X @ theta.T
        assert dm_value(ds, LinearPolicy.zeros(3, 2), mu) == pytest.approx(0.95, abs=1e-2)


class TestOcdr:
    def test_two_sample_clips_the_large_weight(self):
        ds, pol = two_sample(c=(1.1, 3.7), y=(1.0, 0.0))
        res = ocdr_value(ds, pol, 0.5)
        assert res.tau == pytest.approx(1.1, rel=1e-8)
        np.testing.assert_allclose(res.scores.scores, [0.5 + 1.1 * 0.5, 0.5])

    def test_no_matches(self):
        ds, _ = two_sample(c=(1.1, 3.7))
        pol = LinearPolicy(np.zeros((2, 1)), np.array([0.0, 1.0]))  # always arm 2
        res = ocdr_value(ds, pol, 0.3)
        # clipping ranks the logged IPS, whose largest value is 3.7
        assert res.tau == pytest.approx(3.7, rel=1e-8)
        assert res.value == pytest.approx(dm_value(ds, pol, 0.3))

    def test_unpacks(self):
        ds, pol = two_sample()
        value, tau, scores = ocdr_value(ds, pol, 0.5)
        assert value == scores.value and tau == scores.tau

    def test_tau_matches_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            ds = make_dataset(rng, 40, 3, 2)
            pol = LinearPolicy(rng.normal(size=(3, 2)), np.zeros(3))
            assert ocdr_value(ds, pol, 0.5).tau == oracle_threshold(ds, pol)

    def test_mse_at_tau_is_minimal(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            ds = make_dataset(rng, int(rng.integers(5, 200)), 3, 2)
            pol = LinearPolicy(rng.normal(size=(3, 2)), np.zeros(3))
            obj = mse_objective(ds, pol)
            tau = ocdr_value(ds, pol, 0.5).tau
            assert obj.at(tau) <= obj.values.min()
            assert np.all(obj.values >= 0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        ds = make_dataset(rng, 60, 3, 2)
        pol = LinearPolicy(rng.normal(size=(3, 2)), np.zeros(3))
        mu = rng.uniform(size=(60, 3))
        perm = rng.permutation(60)
        a = ocdr_value(ds, pol, mu).value
        b = ocdr_value(ds.subset(perm), pol, mu[perm]).value
        assert a == pytest.approx(b, rel=1e-12)


class TestDiagnostics:
    def test_two_sample_value(self):
        ds, pol = two_sample(c=(1.1, 3.7))
        tau = ocdr_value(ds, pol, 0.5).tau
        assert diagnostic_bounds(ds, pol, tau).b_hat == pytest.approx(0.5525, rel=1e-8)

    def test_full_clipping(self):
        ds, pol = two_sample()
        d = diagnostic_bounds(ds, pol, 0.0)
        assert d.b_hat == d.b_tilde == 1.0 and d.delta == 0.0

    def test_no_clipping_all_matched(self):
        ds, pol = two_sample()
        d = diagnostic_bounds(ds, pol, 10.0)
        assert d.b_hat == pytest.approx((4.0 + 16.0) / 4)
        assert d.delta == pytest.approx((10.0 / 2) ** 1.5)

    def test_agrees_with_mse_table(self):
        rng = np.random.default_rng(11)
        ds = make_dataset(rng, 30, 3, 2)
        pol = LinearPolicy(rng.normal(size=(3, 2)), np.zeros(3))
        obj = mse_objective(ds, pol)
        for t, bias, var in zip(obj.thresholds, obj.bias_sq, obj.variance):
            d = diagnostic_bounds(ds, pol, float(t))
            assert d.b_hat == pytest.approx(bias + var, abs=1e-12)

    def test_report_and_histogram(self):
        ds = make_dataset(np.random.default_rng(2), 20, 3, 2)
        pol = LinearPolicy.zeros(3, 2)
        rep = estimator_report("ocdr", ds, pol, 0.5, include_scores=True)
        assert set(rep) == {"estimator", "value", "tau", "diagnostics", "per_sample_scores"}
        assert estimator_report("ipw", ds, pol, 0.5)["tau"] is None
        counts, _ = ips_weight_histogram(ds, pol)
        assert counts.sum() == ds.n
        with pytest.raises(ValueError):
            estimator_report("switch", ds, pol, 0.5)
