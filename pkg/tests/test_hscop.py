from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocdrl.core import Dataset
from ocdrl.estimators import dm_value, dr_scores, ipw_scores, ocdr_value
from ocdrl.hscop import (
    build_problem,
    check_sign_invariance,
    default_eps,
    eval_margins,
    eval_pattern,
    eval_psi_eps,
    eval_psi_hsc,
    exact_phi,
)

from conftest import make_dataset


def random_problem(seed, n=None, J=None, p=2, kind="ocdr"):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 11)) if n is None else n
    J = int(rng.integers(2, 5)) if J is None else J
    ds = make_dataset(rng, n, J, p)
    return rng, build_problem(ds, rng.uniform(size=(n, J)), kind)


class TestMargins:
    def test_two_arm_empty_blocks(self):
        _, pr = random_problem(0, n=5, J=2)
        beta = np.array([[0.3, -0.2], [0.1, 0.4]])
        m = eval_margins(pr, beta, 0.01)
        np.testing.assert_allclose(m.lower[:, 0], m.pairwise[:, 0, 1])
        np.testing.assert_allclose(m.lower[:, 1], m.pairwise[:, 1, 0] - 0.01)
        np.testing.assert_allclose(m.upper[:, 0], m.pairwise[:, 0, 1] + 0.01)

    def test_zero_beta(self):
        _, pr = random_problem(1, n=4, J=3)
        m = eval_margins(pr, np.zeros((3, 2)), 0.05)
        np.testing.assert_array_equal(m.pairwise, 0.0)
        np.testing.assert_array_equal(m.lower[:, 0], 0.0)
        np.testing.assert_allclose(m.lower[:, 1:], -0.05)

    def test_antisymmetry_and_order(self):
        rng, pr = random_problem(2, n=8, J=4)
        m = eval_margins(pr, rng.normal(size=(4, 2)), 0.1)
        np.testing.assert_allclose(m.pairwise, -np.swapaxes(m.pairwise, 1, 2))
        assert np.all(m.lower <= m.upper)

    def test_default_eps(self):
        assert default_eps(np.array([[0.0, 1.0], [2.0, 3.0]])) == pytest.approx(1e-4 * 2.5)


class TestProblem:
    def test_specialisations(self):
        rng = np.random.default_rng(3)
        ds = make_dataset(rng, 12, 3, 2)
        mu = rng.uniform(size=(12, 3))
        o, d, i = (build_problem(ds, mu, k) for k in ("ocdr", "dr", "ipw"))
        np.testing.assert_array_equal(o.mu, d.mu)
        np.testing.assert_array_equal(i.mu, 0.0)
        assert d.m_star == i.m_star == 13
        np.testing.assert_array_equal(o.order, d.order)
        # DR equals OCDR with every clipping indicator forced on
        beta = rng.normal(size=(3, 2))
        pd = eval_pattern(d, beta)
        assert np.all(pd.w1 == 1) and np.all(pd.w2 == 1)

    def test_unknown_kind(self):
        ds = make_dataset(np.random.default_rng(0), 3, 2, 1)
        with pytest.raises(ValueError):
            build_problem(ds, 0.5, "switch")

    def test_samples_sorted_by_ips(self):
        _, pr = random_problem(4, n=10)
        assert np.all(np.diff(pr.ips) > 0)


class TestObjective:
    @pytest.mark.parametrize("kind", ["ocdr", "dr", "ipw"])
    def test_hsc_matches_estimators(self, kind):
        for seed in range(15):
            rng, pr = random_problem(seed, kind=kind)
            beta = rng.normal(size=(pr.num_treatments, 2))
            pol = pr.policy(beta)
            ds = pr.dataset
            if kind == "ocdr":
                ref = ocdr_value(ds, pol, pr.mu_dataset).value
            elif kind == "dr":
                ref = dr_scores(ds, pol, pr.mu_dataset).value
            else:
                ref = ipw_scores(ds, pol).value
            assert eval_psi_hsc(pr, beta) / ds.n == pytest.approx(ref, abs=1e-10)

    def test_zero_residuals_reduce_to_dm(self):
        rng = np.random.default_rng(5)
        ds = make_dataset(rng, 9, 3, 2)
        mu = np.tile(ds.rewards[:, None], (1, 3))
        pr = build_problem(ds, mu, "ocdr")
        beta = rng.normal(size=(3, 2))
        assert eval_psi_hsc(pr, beta) == pytest.approx(ds.n * dm_value(ds, pr.policy(beta), mu))

    def test_no_matches_reduce_to_dm(self):
        rng = np.random.default_rng(6)
        X = rng.uniform(size=(6, 1))
        probs = np.full((6, 2), 0.5)
        ds = Dataset(X, np.full(6, 2), rng.uniform(size=6), probs[:, 1], 2, 1.0, 0.4, probs)
        mu = rng.uniform(size=(6, 2))
        pr = build_problem(ds, mu, "ocdr")
        beta = np.zeros((2, 1))  # always arm 1, never the logged one
        assert eval_psi_hsc(pr, beta) == pytest.approx(mu[:, 0].sum())

    def test_eps_zero_agrees_away_from_ties(self):
        for seed in range(20):
            rng, pr = random_problem(seed)
            beta = rng.normal(size=(pr.num_treatments, 2)) * 3
            m = eval_margins(pr, beta, 0.0)
            off = ~np.eye(pr.num_treatments, dtype=bool)
            assert np.min(np.abs(m.pairwise[:, off])) > 0
            assert eval_psi_eps(pr, beta, 0.0) == pytest.approx(eval_psi_hsc(pr, beta), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-6, 0.5))
    def test_sandwich_and_lower_bound(self, seed, eps):
        rng, pr = random_problem(seed)
        J = pr.num_treatments
        # include exact ties now and then, where the approximation bites
        beta = rng.normal(size=(J, 2)) * rng.choice([0.0, 0.01, 1.0])
        pat = eval_pattern(pr, beta, eps)
        phi = exact_phi(pr, beta)
        assert np.all(pat.phi2 <= phi + 1e-9)
        assert np.all(phi <= pat.phi1 + 1e-9)
        assert pat.phi1[-1] == pat.phi2[-1] == 0.0
        assert pat.value <= eval_psi_hsc(pr, beta) + 1e-9

    def test_indicator_monotone_in_eps(self):
        rng, pr = random_problem(8, n=10, J=3)
        beta = rng.normal(size=(3, 2)) * 0.001
        big = eval_pattern(pr, beta, 0.1).z1
        small = eval_pattern(pr, beta, 0.001).z1
        assert np.all(big <= small)

    def test_window_indicators_monotone(self):
        for seed in range(30):
            rng, pr = random_problem(seed, n=10)
            pat = eval_pattern(pr, rng.normal(size=(pr.num_treatments, 2)))
            assert np.all(np.diff(pat.w1) <= 0) and np.all(np.diff(pat.w2) <= 0)
            assert np.all(pat.w1 <= pat.w2)

    def test_fixing_overrides(self):
        rng, pr = random_problem(9, n=6, J=2)
        beta = rng.normal(size=(2, 2))
        fix1 = np.full((6, 2), -1.0)
        fix1[0] = [1.0, 0.0]
        pat = eval_pattern(pr, beta, fix1=fix1, fix2=np.zeros(6))
        np.testing.assert_array_equal(pat.z1[0], [1.0, 0.0])
        np.testing.assert_array_equal(pat.z2, 0.0)


class TestSignInvariance:
    def test_boundary(self):
        _, pr = random_problem(0, n=5, J=2)
        rep = check_sign_invariance(pr, np.zeros((2, 2)), 0.1)
        assert rep.status == "boundary"
        assert "unverified" in rep.message

    def test_stable_by_continuity(self):
        _, pr = random_problem(0, n=5, J=2)
        beta = np.array([[5.0, 5.0], [0.0, 0.0]])
        rep = check_sign_invariance(pr, beta, 0.01)
        assert rep.status == "sign-stable" and rep.trials == 0

    def test_sampled(self):
        rng, pr = random_problem(3, n=10, J=3)
        beta = rng.normal(size=(3, 2))
        rep = check_sign_invariance(pr, beta, 1e-9, trials=20)
        assert rep.status in ("sign-stable", "sampled-stable")

    def test_detects_flip(self):
        _, pr = random_problem(0, n=5, J=2)
        x = pr.X[0]
        # put sample 0 a hair away from the switching surface
        beta = np.array([[1e-7 / x.sum(), 1e-7 / x.sum()], [0.0, 0.0]])
        rep = check_sign_invariance(pr, beta, 1.0, trials=50)
        assert rep.status == "unstable" and rep.flips > 0

    def test_radius_positive(self):
        _, pr = random_problem(0, n=3, J=2)
        with pytest.raises(ValueError):
            check_sign_invariance(pr, np.zeros((2, 2)), 0.0)
