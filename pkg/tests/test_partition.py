import json
import math
import warnings

import numpy as np
import pytest

from shapedmlp.errors import IllConditioned
from shapedmlp.features import HatDataset, ShapeParams, build_hat_dataset, embed
from shapedmlp.network import RawDataset
from shapedmlp.oracles import wick_quadrature
from shapedmlp.partition import (PerturbationTooLarge, attach_test_point,
                                 bracket_poly, build_posterior_geometry,
                                 eval_integrals, log_evidence, log_partition,
                                 posterior_cumulants, zero_temp_evidence,
                                 zero_temp_posterior)
from shapedmlp.selfloops import selfloop_expectations

from conftest import make_hat, make_raw


def random_instance(seed, p=3, n0=5, psi=0.3, eta=0.2, beta=2.0):
    hat = make_hat(n0, p, seed, psi=psi, eta=eta)
    geom = attach_test_point(build_posterior_geometry(hat, beta), hat.xhat_test)
    return hat, geom


class TestGeometry:
    def test_scalar_example(self):
        # P=1, |xhat|^2 = 2, beta = 1 -> M = 1/3
        xh = np.zeros((4, 1))
        xh[0, 0] = math.sqrt(2.0)
        hat = HatDataset(xh, np.array([1.0]), ShapeParams(0.0, 0.0))
        geom = build_posterior_geometry(hat, 1.0)
        assert geom.M[0, 0] == pytest.approx(1.0 / 3.0)

    def test_interpolation_geometry(self):
        hat = make_hat(7, 3, 40, psi=0.2, eta=0.1)
        geom = attach_test_point(build_posterior_geometry(hat, np.inf), hat.Xhat[:, 2])
        np.testing.assert_allclose(geom.a, [0, 0, 1], atol=1e-10)
        assert np.max(np.abs(geom.x_perp)) < 1e-7
        assert geom.npp == pytest.approx(0.0, abs=1e-10)

    def test_projection_example(self):
        # P=1, |x1|^2 = 2, <x1, x> = sqrt(2), beta=1: a = sqrt(2)/3,
        # xperp = x - (2/3) x for x = x1/sqrt(2)
        xh = np.zeros((4, 1))
        xh[0, 0] = math.sqrt(2.0)
        hat = HatDataset(xh, np.array([1.0]), ShapeParams(0.0, 0.0))
        x = xh[:, 0] / math.sqrt(2.0)
        geom = attach_test_point(build_posterior_geometry(hat, 1.0), x)
        assert geom.a[0] == pytest.approx(math.sqrt(2.0) / 3.0)
        np.testing.assert_allclose(geom.x_perp, x - (2.0 / 3.0) * x, atol=1e-14)

    def test_beta_inf_limit_of_M(self):
        hat = make_hat(7, 3, 41)
        m_inf = build_posterior_geometry(hat, np.inf).M
        m_big = build_posterior_geometry(hat, 1e13).M
        assert np.max(np.abs(m_inf - m_big)) / np.max(np.abs(m_inf)) < 1e-6
        np.testing.assert_allclose(m_inf @ hat.G, np.eye(3), atol=1e-10)

    def test_ill_conditioned(self, rng):
        x = rng.standard_normal((6, 2)) * 0.3
        x[:, 1] = x[:, 0] + 1e-9 * x[:, 1]
        hat = HatDataset(x, np.zeros(2), ShapeParams(0.0, 0.0), rank_tol=1e-14)
        with pytest.raises(IllConditioned):
            build_posterior_geometry(hat, np.inf)


class TestIntegrals:
    def test_all_coefficients_match_exact_quadrature(self):
        # the single most important correctness property: every coefficient
        # equals the brute-force Gaussian expectation
        cases = [(0.3, 0.2, 2.0), (0.0, 0.0, 1.0), (-0.4, 0.5, 10.0),
                 (0.3, -0.3, 1e12), (0.25, 0.0, 0.5), (-0.2, -0.2, 5.0),
                 (0.45, 0.1, 3.0), (0.0, 0.6, 1.0)]
        for i, (psi, eta, beta) in enumerate(cases):
            for p in (2, 3, 4):
                hat, geom = random_instance(100 + 10 * i + p, p=p, n0=p + 2,
                                            psi=psi, eta=eta, beta=beta)
                stats = selfloop_expectations(hat)
                table = eval_integrals(geom, stats.Mhat_diag, stats.mhat_test)
                quad = wick_quadrature(geom, stats.Mhat_diag, stats.mhat_test)
                for key, want in quad.items():
                    assert table[key] == pytest.approx(want, rel=1e-9, abs=1e-9), key
                assert table.parity_residual < 1e-10

    def test_I1_is_one(self):
        hat, geom = random_instance(1)
        assert eval_integrals(geom).I1 == 1.0

    def test_I6_4_vanishes_in_span(self):
        hat = make_hat(7, 3, 42, psi=0.2, eta=0.1)
        x_in_span = hat.Xhat @ np.array([0.3, -0.2, 0.5])
        geom = attach_test_point(build_posterior_geometry(hat, np.inf), x_in_span)
        table = eval_integrals(geom)
        assert table[("I6", 4)] == pytest.approx(0.0, abs=1e-12)

    def test_psi_zero_only_I6_contributes(self):
        hat, geom = random_instance(2, psi=0.0, eta=0.0)
        stats = selfloop_expectations(hat)
        table = eval_integrals(geom)
        lin, nonlin = bracket_poly(table, stats, hat.shape)
        assert np.all(nonlin == 0)
        np.testing.assert_allclose(lin, 0.25 * table.poly["I6"])

    def test_matches_printed_forms_where_correct(self):
        # spot-check the paper-style expressions for I2 and I6[4]
        hat, geom = random_instance(3, psi=0.35, eta=0.4, beta=3.0)
        table = eval_integrals(geom)
        d, a = geom.d, geom.a
        g3m = hat.G3
        gx3 = geom.g**3
        assert table[("I2", 0)] == pytest.approx(
            float(np.sum(g3m * geom.M)) - float(d @ g3m @ d), rel=1e-12)
        assert table[("I2", 1)] == pytest.approx(
            float(d @ gx3) - float(d @ g3m @ a), rel=1e-12)
        assert table[("I6", 4)] == pytest.approx(geom.npp**2, rel=1e-12)


class TestLogPartition:
    def test_tau_zero_reproduces_evidence_bitwise(self):
        hat, geom = random_instance(4, psi=0.25, eta=0.15, beta=4.0)
        rep = log_evidence(hat, 2, 80, beta=4.0)
        val = log_partition(build_posterior_geometry(hat, 4.0), 2, 80, 0.0)
        assert complex(val).real == rep.log_Z0
        assert complex(val).imag == 0.0

    def test_finite_difference_consistency(self):
        hat, geom = random_instance(5, psi=0.3, eta=0.2, beta=5.0)
        summ = posterior_cumulants(hat, 3, 90, beta=5.0, geom=geom)
        h = 1e-4

        def lp(tau):
            return log_partition(geom, 3, 90, tau)

        mean_fd = (1j * (lp(h) - lp(-h)) / (2 * h)).real
        var_fd = (-(lp(h) - 2 * lp(0.0) + lp(-h)) / h**2).real
        assert abs(summ.mean - mean_fd) / abs(mean_fd) < 1e-6
        assert abs(summ.variance - var_fd) / abs(var_fd) < 1e-6
        # higher cumulants against wider central stencils
        h = 0.05
        d3 = (lp(2 * h) - 2 * lp(h) + 2 * lp(-h) - lp(-2 * h)) / (2 * h**3)
        d4 = (lp(2 * h) - 4 * lp(h) + 6 * lp(0.0) - 4 * lp(-h) + lp(-2 * h)) / h**4
        assert summ.third_cumulant == pytest.approx((-1j * d3).real, rel=2e-2, abs=1e-4)
        assert summ.fourth_cumulant == pytest.approx(d4.real, rel=2e-2, abs=1e-4)

    def test_perturbation_warning(self):
        hat, geom = random_instance(6, psi=0.3, eta=0.2, beta=5.0)
        with pytest.warns(PerturbationTooLarge):
            log_partition(geom, 50, 60, 0.0)


class TestEvidence:
    def test_matches_bayesian_linear_regression(self, rng):
        # psi = 0, L/N = 0: standard marginal likelihood of the hat model,
        # computed independently as a P-dimensional Gaussian integral;
        # the shared constant is P log(2 pi)
        for seed in range(5):
            hat = make_hat(9, 4, 50 + seed, psi=0.0, eta=0.0)
            beta = float(rng.uniform(0.5, 20.0))
            rep = log_evidence(hat, 0.0, 1.0, beta=beta)
            cov = hat.G + np.eye(4) / beta
            analytic = (-0.5 * math.log(np.linalg.det(2 * np.pi * cov))
                        - 0.5 * hat.Y @ np.linalg.solve(cov, hat.Y))
            assert rep.log_Z0 - analytic == pytest.approx(4 * math.log(2 * np.pi), rel=1e-10)

    def test_parts_compose(self):
        hat = make_hat(8, 3, 60, psi=0.3, eta=0.2)
        rep = log_evidence(hat, 2, 300, beta=3.0)
        assert rep.log_Z0 == pytest.approx(
            rep.kernel_term + math.log1p(rep.linear_term + rep.nonlinear_term), rel=1e-14)
        # additive within the quadratic log1p remainder
        resid = abs(rep.log_Z0 - (rep.kernel_term + rep.linear_term + rep.nonlinear_term))
        assert resid <= 0.6 * rep.bracket**2

    def test_monotone_in_depth_for_linear_data(self):
        # labels from a small-norm teacher keep |theta_hat|^2 < P
        raw = make_raw(8, 3, 61)
        rng = np.random.default_rng(61)
        theta0 = 0.3 * rng.standard_normal(8)
        raw = RawDataset(raw.X, embed(raw.X, ShapeParams(0.0, 0.0)).T @ theta0)
        hat = build_hat_dataset(raw, ShapeParams(0.0, 0.0))
        theta2 = float(hat.Y @ np.linalg.solve(hat.G, hat.Y))
        assert theta2 < 3.0
        vals = [log_evidence(hat, eps, 1.0, beta=np.inf).log_Z0
                for eps in (0.0, 0.005, 0.01)]
        assert vals[0] < vals[1] < vals[2]

    def test_report_json(self):
        rep = log_evidence(make_hat(8, 3, 62, psi=0.1), 1, 100, beta=2.0)
        doc = json.loads(rep.to_json())
        assert doc["kind"] == "evidence_report" and doc["schema_version"] == 1
        assert {"log_Z0", "kernel_term", "linear_term", "nonlinear_term"} <= doc.keys()


class TestPosteriorCumulants:
    def test_kernel_regime_formulas(self):
        # beta = inf, L/N = 0: mean = sum a_mu y_mu, variance = |xperp|^2
        hat = make_hat(8, 3, 70, psi=0.35, eta=0.25)
        geom = attach_test_point(build_posterior_geometry(hat, np.inf), hat.xhat_test)
        summ = posterior_cumulants(hat, 0.0, 1.0, beta=np.inf, geom=geom)
        a = np.linalg.solve(hat.G, hat.g_test)
        xperp = hat.xhat_test - hat.Xhat @ a
        assert summ.mean == pytest.approx(float(a @ hat.Y), rel=1e-10)
        assert summ.variance == pytest.approx(float(xperp @ xperp), rel=1e-8, abs=1e-12)
        assert summ.third_cumulant == 0.0 and summ.fourth_cumulant == 0.0

    def test_interpolation_point_exact(self):
        hat = make_hat(8, 3, 71, psi=0.3, eta=0.2)
        geom = attach_test_point(build_posterior_geometry(hat, np.inf), hat.Xhat[:, 0])
        summ = posterior_cumulants(hat, 2, 40, beta=np.inf, geom=geom)
        assert summ.mean == pytest.approx(hat.Y[0], abs=1e-10)
        assert summ.variance_zeroth == pytest.approx(0.0, abs=1e-10)

    def test_variance_zeroth_nonnegative(self):
        for seed in range(6):
            hat = make_hat(8, 3, 80 + seed, psi=0.2, eta=0.3)
            summ = posterior_cumulants(hat, 1, 200, beta=2.0, xhat_test=hat.xhat_test)
            assert summ.variance_zeroth >= 0.0

    def test_json(self):
        hat = make_hat(8, 3, 72, psi=0.1)
        summ = posterior_cumulants(hat, 1, 100, beta=3.0, xhat_test=hat.xhat_test)
        doc = json.loads(summ.to_json())
        assert doc["kind"] == "posterior_summary"
        assert doc["mean"] == pytest.approx(doc["mean_zeroth"] + doc["mean_correction"])


def transcribed_zero_temp_posterior(hat, depth, width, xhat_test, c):
    """Independent second transcription of the zero-temperature posterior
    display (mean shift through Sigma quadratic forms, small branch)."""
    p = hat.n_points
    ginv = np.linalg.inv(hat.G)
    a = ginv @ (hat.Xhat.T @ xhat_test)
    d = ginv @ hat.Y
    lpn = depth / width * p
    sig_mu = np.array([hat.sigma_quad_form(hat.Xhat[:, m]) for m in range(p)])
    sig_x = hat.sigma_quad_form(xhat_test)
    mean = float(np.sum(a * hat.Y * (1.0 + lpn * c * (sig_mu - sig_x))))
    var = float(xhat_test @ xhat_test - (hat.Xhat.T @ xhat_test) @ a) * (1.0 - lpn)
    return mean, var


class TestZeroTemperature:
    def test_limit_consistency_evidence(self):
        # beta -> inf limit of the exact route at vanishing depth ratio
        for seed in range(4):
            hat = make_hat(8, 3, 90 + seed, psi=0.25, eta=0.15)
            zt = zero_temp_evidence(hat, 1e-8, 1.0)
            lv = log_evidence(hat, 1e-8, 1.0, beta=1e12)
            assert zt.log_Z0 == pytest.approx(lv.log_Z0, rel=1e-6)

    def test_psi_zero_two_blocks(self):
        rep = zero_temp_evidence(make_hat(8, 3, 91, psi=0.0, eta=0.0), 1, 50)
        assert rep.nonlinear_term == 0.0
        assert rep.linear_term > 0.0
        assert rep.log_Z0 == rep.kernel_term + rep.linear_term

    def test_orthonormal_example(self):
        # P=2 orthonormal hats, Y = (1, 0): tr log = 0, |theta|^2 = 1,
        # linear block (LP/4N)[theta^4/P - 2 theta^2 + P] = L/(4N)
        xh = np.eye(4)[:, :2]
        hat = HatDataset(xh, np.array([1.0, 0.0]), ShapeParams(0.0, 0.0))
        rep = zero_temp_evidence(hat, 1.0, 100.0)
        assert rep.kernel_term == pytest.approx(math.log(2 * np.pi) - 0.5)
        assert rep.linear_term == pytest.approx(1.0 / 400.0)

    def test_depth_gain_identity(self):
        # d(log Z0)/d(LP/N) = (P/4)(1 - |theta|^2/P)^2, exact
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = int(rng.integers(2, 6))
            hat = make_hat(10, p, int(rng.integers(10**6)), psi=0.0, eta=0.0,
                           with_test=False)
            rep = zero_temp_evidence(hat, 1.0, 512.0)
            theta2 = float(hat.Y @ np.linalg.solve(hat.G, hat.Y))
            want = p / 4.0 * (1.0 - theta2 / p) ** 2
            got = rep.linear_term / ((1.0 / 512.0) * p)
            assert got == pytest.approx(want, abs=1e-10 * max(1.0, want))
            assert got >= 0.0

    def test_posterior_small_branch_display(self):
        # mean/variance equal an independent transcription at rel 1e-10
        hat = make_hat(9, 4, 92, psi=0.3, eta=0.2)
        c = selfloop_expectations(hat).c_psi_eta
        lpn_over_p = 0.05 / hat.n_points     # LP/N = 0.05
        summ = zero_temp_posterior(hat, lpn_over_p, 1.0, hat.xhat_test, branch="small")
        mean, var = transcribed_zero_temp_posterior(hat, lpn_over_p, 1.0, hat.xhat_test, c)
        assert summ.mean == pytest.approx(mean, rel=1e-10)
        assert summ.variance == pytest.approx(var, rel=1e-10)

    def test_posterior_interpolation_leading_order(self):
        hat = make_hat(8, 3, 93, psi=0.25, eta=0.1)
        summ = zero_temp_posterior(hat, 1, 100, hat.Xhat[:, 1])
        assert summ.mean_zeroth == pytest.approx(hat.Y[1], abs=1e-10)
        assert summ.variance_zeroth == pytest.approx(0.0, abs=1e-10)

    def test_posterior_limit_consistency(self):
        hat = make_hat(8, 3, 94, psi=0.2, eta=0.3)
        small = zero_temp_posterior(hat, 1e-9, 1.0, hat.xhat_test, branch="small")
        summ = posterior_cumulants(hat, 1e-9, 1.0, beta=1e12, xhat_test=hat.xhat_test)
        assert small.mean == pytest.approx(summ.mean, rel=1e-5)
        assert small.variance == pytest.approx(summ.variance, rel=1e-5)

    def test_branch_selection(self):
        hat = make_hat(8, 3, 95, psi=0.2, eta=0.0)
        auto = zero_temp_posterior(hat, 1, 100, hat.xhat_test)
        theta2 = float(hat.Y @ np.linalg.solve(hat.G, hat.Y))
        pick = "large" if theta2 / 3 >= 0.1 else "small"
        manual = zero_temp_posterior(hat, 1, 100, hat.xhat_test, branch=pick)
        assert auto.mean == manual.mean and auto.variance == manual.variance
