import math

import mpmath
import numpy as np
import pytest
from scipy.integrate import quad

from shapedmlp.errors import ProbabilityOverflow
from shapedmlp.features import ShapeParams, build_hat_dataset
from shapedmlp.selfloops import (g1, g2, g3, g4, prior_laplace_firstorder,
                                 selfloop_dp, selfloop_expectations, selfloop_mc)

from conftest import make_hat, make_raw

ETAS = (-2.0, -0.5, -1e-3, 1e-3, 0.5, 2.0)


def g1_mp(eta):
    """High-precision oracle straight from the defining formula."""
    eta = mpmath.mpf(eta)
    return 0.5 * (1 + mpmath.coth(eta) - 1 / eta)


def g2_mp(eta):
    eta = mpmath.mpf(eta)
    return 0.25 * (mpmath.coth(eta) / eta - mpmath.csch(eta) ** 2)


class TestGFunctions:
    def test_g3_endpoints(self):
        for eta in ETAS:
            assert g3(eta, 1.0) == pytest.approx(0.0, abs=1e-14)
            assert g3(eta, 0.0) == pytest.approx(1.0, abs=1e-14)

    def test_limits_via_series_oracle(self):
        mpmath.mp.dps = 40
        # evaluation near zero tracks the Laurent-series oracle ...
        assert abs(g1(1e-3) - float(g1_mp(1e-3))) < 1e-5
        assert abs(g2(1e-3) - float(g2_mp(1e-3))) < 1e-5
        # ... which itself approaches the limits 1/2 and 1/6
        assert abs(float(g1_mp(1e-6)) - 0.5) < 1e-6
        assert abs(float(g2_mp(1e-6)) - 1.0 / 6.0) < 1e-6

    def test_matches_mpmath_across_range(self):
        mpmath.mp.dps = 40
        for eta in ETAS:
            assert g1(eta) == pytest.approx(float(g1_mp(eta)), rel=1e-12)
            assert g2(eta) == pytest.approx(float(g2_mp(eta)), rel=1e-12)

    def test_quadrature_identities(self):
        # int g3 = g1, int g3^2 = g1 - g2, int g4 = g2
        for eta in ETAS:
            i3, _ = quad(lambda t: g3(eta, t), 0, 1, epsabs=1e-12)
            i33, _ = quad(lambda t: g3(eta, t) ** 2, 0, 1, epsabs=1e-12)
            i4, _ = quad(lambda t: g4(eta, t), 0, 1, epsabs=1e-12)
            assert abs(i3 - g1(eta)) < 1e-8
            assert abs(i33 - (g1(eta) - g2(eta))) < 1e-8
            assert abs(i4 - g2(eta)) < 1e-8

    def test_g3sq_identity_tight(self):
        i, _ = quad(lambda t: g3(0.7, t) ** 2, 0, 1, epsabs=1e-12)
        assert abs(i - (g1(0.7) - g2(0.7))) < 1e-10

    def test_g1_above_g2(self):
        for eta in ETAS:
            assert g1(eta) > g2(eta)


class TestClosedForms:
    def test_psi_zero_t00_is_one(self):
        hat = make_hat(8, 3, 0, psi=0.0, eta=0.4)
        stats = selfloop_expectations(hat)
        np.testing.assert_allclose(stats.t00, 1.0)
        assert stats.c_psi_eta == 0.0

    def test_t11b_sign_follows_psi(self):
        for psi in (0.45, -0.45):
            stats = selfloop_expectations(make_hat(8, 3, 1, psi=psi, eta=0.3))
            assert np.all(np.sign(stats.t11b) == np.sign(psi))

    def test_c_positive_iff_nonlinear(self):
        assert selfloop_expectations(make_hat(8, 3, 2, psi=0.2, eta=0.1)).c_psi_eta > 0

    def test_t11a_integrates_to_t11b(self):
        stats = selfloop_expectations(make_hat(8, 3, 3, psi=0.3, eta=0.6))
        integral = np.zeros(3)
        for mu in range(3):
            integral[mu], _ = quad(lambda t: stats.t11a(t)[mu], 0, 1, epsabs=1e-12)
        np.testing.assert_allclose(integral, stats.t11b, atol=1e-10)

    def test_mhat_test_matches_training_formula(self):
        hat = make_hat(8, 3, 4, psi=0.25, eta=0.2)
        hat2 = hat.with_test_point(hat.Xhat[:, 1])
        stats = selfloop_expectations(hat2)
        assert stats.mhat_test == pytest.approx(stats.Mhat_diag[1], rel=1e-12)


class TestChain:
    def test_psi_zero_deterministic(self):
        shape = ShapeParams(0.0, 0.3)
        out = selfloop_mc(shape, 0.4, 50, 500, seed=0)
        est, se = out["t00"]
        assert est == 1.0 and se == 0.0
        assert out["t11b"] == (0.0, 0.0) and out["t20"] == (0.0, 0.0)

    def test_probability_overflow(self):
        with pytest.raises(ProbabilityOverflow):
            selfloop_mc(ShapeParams(6.0, 0.0), 0.4, 5, 200, seed=0)

    def test_mc_matches_dp(self):
        shape = ShapeParams(-0.35, 0.3)
        depth = 150
        dp = selfloop_dp(shape, 0.4, depth, taus=(0.5,))
        mc = selfloop_mc(shape, 0.4, depth, 150_000, seed=21, taus=(0.5,))
        for key in ("t00", "t11b", "t20"):
            est, se = mc[key]
            assert abs(est - dp[key]) < 3.5 * se
        est, se = mc["t11a"][0.5]
        assert abs(est - dp["t11a"][0.5]) < 3.5 * se

    def test_dp_converges_at_rate_one_over_L(self):
        # Richardson-style fit: bias(L) ~ b/L means bias halves when L doubles
        shape = ShapeParams(0.3, 0.45)
        ph = shape.psi_hat * 0.4
        closed = {
            "t00": math.exp(-0.3) * (1 - 2 * ph) ** -0.5,
            "t11b": shape.psi_hat * math.exp(-0.3) * (1 - 2 * ph) ** -1.5 * g1(0.45),
            "t20": ph * math.exp(-0.3) * (1 - 2 * ph) ** -2.5
                   * ((1 + ph) * g1(0.45) - 3 * ph * g2(0.45)),
        }
        depths = (50, 100, 200, 400)
        for key, want in closed.items():
            bias = [abs(selfloop_dp(shape, 0.4, L)[key] - want) for L in depths]
            rates = [bias[i] / bias[i + 1] for i in range(3)]
            assert all(1.6 < r < 2.4 for r in rates), (key, rates)
            # extrapolating the finite-L values hits the closed form
            extrap = 2 * selfloop_dp(shape, 0.4, 400)[key] - selfloop_dp(shape, 0.4, 200)[key]
            assert abs(extrap - want) < 0.05 * max(bias[-1], 1e-12)


class TestPriorLaplace:
    def test_t_zero_gives_one(self):
        hat = make_hat(8, 3, 5, psi=0.3, eta=0.2)
        stats = selfloop_expectations(hat)
        assert prior_laplace_firstorder(hat, stats, np.zeros(3), 0.0, 10, 100) == 1.0

    def test_infinite_width_is_gaussian_factor(self, rng):
        hat = make_hat(8, 3, 6, psi=0.3, eta=0.2)
        stats = selfloop_expectations(hat)
        t = rng.standard_normal(3) * 0.5
        got = prior_laplace_firstorder(hat, stats, t, 0.0, 10, np.inf)
        want = math.exp(-0.5 * t @ hat.G @ t)
        assert got == pytest.approx(want, rel=1e-12)

    def test_sourced_needs_test_point(self, rng):
        raw = make_raw(8, 3, 7, with_test=False)
        hat = build_hat_dataset(raw, ShapeParams(0.1, 0.0))
        stats = selfloop_expectations(hat)
        with pytest.raises(ValueError):
            prior_laplace_firstorder(hat, stats, np.zeros(3), 0.5, 5, 50)
