"""kth-principal power-law data model and the three-regime predictions.

The hat-space data matrix is Xhat = sqrt(P) sum_j sqrt(lam_j) u_j v_j^T with
Haar-random orthonormal U, V and lam_j proportional to j^{-alpha}, normalized
so tr(Sigma) = sum_j lam_j = 1; labels are Y = sqrt(P) v_k + eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutsidePerturbativeRegime, ShapedMLPError
from .features import HatDataset, ShapeParams, unembed
from .network import RawDataset
from .partition import (attach_test_point, build_posterior_geometry,
                        eval_integrals, log_evidence, posterior_cumulants)
from .seeding import child_seed_sequences
from .selfloops import selfloop_expectations


@dataclass(frozen=True)
class PowerLawSpec:
    """Spectrum exponent alpha, label direction k, label-noise variance."""

    p: int
    n0: int
    alpha: float
    k: int = 1
    sigma_eps2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.p >= self.n0:
            raise ShapedMLPError(f"need P < N0, got P={self.p}, N0={self.n0}")
        if self.alpha <= 0.0:
            raise ShapedMLPError("alpha must be positive")
        if not 1 <= self.k <= self.p:
            raise ShapedMLPError("label direction k must lie in [1, P]")
        if self.sigma_eps2 < 0.0:
            raise ShapedMLPError("noise variance must be nonnegative")

    @property
    def lam(self):
        """Normalized spectrum lam_j = j^{-alpha} / sum_i i^{-alpha}."""
        raw = np.arange(1, self.p + 1, dtype=float) ** (-self.alpha)
        return raw / raw.sum()


def haar_orthonormal(n, m, rng):
    """n x m matrix with Haar-distributed orthonormal columns (QR sign-fixed)."""
    z = rng.standard_normal((n, m))
    q, r = np.linalg.qr(z)
    return q * np.sign(np.diag(r))


def generate_powerlaw(spec, shape=None, rng=None, with_raw=False):
    """Draw a power-law HatDataset (and optionally its raw preimage).

    Returns ``hat`` or ``(hat, raw)``; ``raw`` is obtained by ``unembed`` and
    requires feasibility for the requested (psi, eta).
    """
    shape = shape or ShapeParams(0.0, 0.0)
    rng = rng or np.random.default_rng(spec.seed)
    u = haar_orthonormal(spec.n0, spec.p, rng)
    v = haar_orthonormal(spec.p, spec.p, rng)
    lam = spec.lam
    xhat = math.sqrt(spec.p) * (u * np.sqrt(lam)) @ v.T
    y = math.sqrt(spec.p) * v[:, spec.k - 1]
    if spec.sigma_eps2 > 0.0:
        y = y + math.sqrt(spec.sigma_eps2) * rng.standard_normal(spec.p)
    hat = HatDataset(xhat, y, shape)
    if not with_raw:
        return hat
    raw = RawDataset(unembed(xhat, shape), y)
    return hat, raw


def teacher_direction(hat, spec):
    """theta = +/- u_k / sqrt(lam_k): the noiseless minimum-norm interpolant.

    The stored SVD is recomputed from Xhat, so the (u_k, v_k) pair can carry
    the opposite sign from the generator's; the sign is fixed by aligning
    Xhat^T theta with the labels.
    """
    theta = hat.svd.U[:, spec.k - 1] / np.sqrt(hat.svd.lam[spec.k - 1])
    if float((hat.Xhat.T @ theta) @ hat.Y) < 0.0:
        theta = -theta
    return theta


def fresh_test_points(hat, spec, n_test, rng, noisy=True):
    """Draw fresh hat-space test points from the sample covariance.

    x = sum_j sqrt(lam_j) z_j u_j with z iid standard normal, labels
    y = <x, theta_teacher> (+ test noise), so E[y^2] = 1 + sigma_eps2 and
    E[|x_perp_of_train|^2] follows the spectrum tail.
    """
    lam = hat.svd.lam
    z = rng.standard_normal((n_test, len(lam)))
    xs = (z * np.sqrt(lam)) @ hat.svd.U.T
    ys = xs @ teacher_direction(hat, spec)
    if noisy and spec.sigma_eps2 > 0.0:
        ys = ys + math.sqrt(spec.sigma_eps2) * rng.standard_normal(n_test)
    return xs, ys


# ---------------------------------------------------------------------------
# Appendix reference quantities (computed exactly, not by the M_beta expansion)


def appendix_scalings(hat, beta, Y=None):
    """Exact values of every Appendix reference row at inverse temperature beta.

    All quantities are spectral sums over the stored SVD; the <1/B vs >1/B
    split thresholds the Sigma eigenvalues lam_j against 1/B, B = beta*P.
    """
    if Y is None:
        Y = hat.Y
    p = hat.n_points
    lam = hat.svd.lam
    gev = p * lam                       # eigenvalues of Xhat^T Xhat
    shift = gev + (0.0 if np.isinf(beta) else 1.0 / beta)
    b_norm = beta * p
    below = lam < 1.0 / b_norm
    w = hat.svd.V.T @ Y
    m_eig = 1.0 / shift
    rd_eig = gev / shift
    return {
        "B": float(b_norm),
        "dim_below": int(np.sum(below)),
        "dim_above": int(np.sum(~below)),
        "tr_sigma_below": float(np.sum(lam[below])),
        "tr_sigma2_below": float(np.sum(lam[below] ** 2)),
        "tr_sigma2": float(np.sum(lam**2)),
        "tr_M": float(np.sum(m_eig)),
        "tr_XdagX": float(np.sum(rd_eig)),
        "tr_XdagX_sq": float(np.sum(rd_eig**2)),
        "tr_XXdagXXt_over_P": float(np.sum(gev * rd_eig)) / p,
        "tr_log_M": float(-np.sum(np.log(shift))),
        "norm_Mhalf_Xt_theta": float(np.sum(w**2 * m_eig)),
        "norm_Xdag_theta": float(np.sum(w**2 * m_eig**2)),
        "norm_XXdag_theta": float(np.sum(w**2 * gev * m_eig**2)),
        "norm_XtXXdag_theta_over_P": float(np.sum(w**2 * gev**2 * m_eig**2)) / p,
        "norm_Mhalf_XtXXdag_theta": float(np.sum(w**2 * gev**2 * m_eig**3)),
    }


# ---------------------------------------------------------------------------
# Leading-order regime formulas


@dataclass
class RegimeReport:
    """Classified temperature regime and its leading log-evidence expression."""

    regime: str                 # lowT | highT_strong | highT_weak
    value: float                # leading log-evidence (constants set to 1)
    depth_term: float           # the (L/N)[...] block alone
    B: float
    k_ratio: float              # k / B^(1/alpha)
    b_ratio: float              # B / P^alpha


def _classify(spec, B):
    k_ratio = spec.k / B ** (1.0 / spec.alpha)
    b_ratio = B / spec.p**spec.alpha
    if b_ratio > 1.0:
        return "lowT", k_ratio, b_ratio
    return ("highT_strong" if k_ratio < 1.0 else "highT_weak"), k_ratio, b_ratio


def _check_regime_preconditions(spec, c):
    if spec.alpha <= 1.0:
        raise OutsidePerturbativeRegime("need alpha > 1 (non-vanishing model)")
    margin = spec.p ** (1.0 / spec.alpha) / math.log(spec.p)
    if spec.k > margin:
        raise OutsidePerturbativeRegime(
            f"k = {spec.k} violates k = o(P^(1/alpha)) (margin {margin:.1f})")
    if c == 0.0:
        if spec.sigma_eps2 > spec.p ** (1.0 - spec.alpha):
            raise OutsidePerturbativeRegime("label noise above P^(1-alpha)")
    else:
        if spec.alpha >= 2.0:
            raise OutsidePerturbativeRegime("nonlinear corollary needs alpha < 2")
        if spec.sigma_eps2 != 0.0:
            raise OutsidePerturbativeRegime("nonlinear corollary needs noiseless labels")


def regime_log_evidence(spec, B, ln, c=0.0):
    """Leading-order log evidence for the classified regime (constants = 1).

    ``ln`` is L/N and ``c`` the nonlinear constant c_{psi,eta}; c = 0 selects
    the linear corollary (noise allowed), c > 0 the nonlinear one.
    """
    _check_regime_preconditions(spec, c)
    regime, k_ratio, b_ratio = _classify(spec, B)
    p, alpha, k, s2 = spec.p, spec.alpha, spec.k, spec.sigma_eps2
    if c == 0.0:
        if regime == "lowT":
            lead = (alpha - 1.0) * p * math.log(p) - s2 * p**alpha - float(k) ** alpha
            depth = ln * (p**2 + s2**2 * p ** (2 * alpha) + float(k) ** (2 * alpha))
        elif regime == "highT_strong":
            lead = p * math.log(B / p) + s2 * B - float(k) ** alpha
            depth = ln * (B ** (2.0 / alpha) + s2**2 * B ** (2 + 2.0 / alpha) / p**2
                          + float(k) ** (2 * alpha))
        else:
            lead = p * math.log(B / p) + s2 * B - B
            depth = ln * (B ** (2.0 / alpha) + s2**2 * B ** (2 + 2.0 / alpha) / p**2
                          + B**4 * float(k) ** (-2 * alpha))
    else:
        if regime == "lowT":
            lead = (alpha - 1.0) * p * math.log(p) - float(k) ** alpha
            depth = ln * ((1 + c) * (p**2 + float(k) ** (2 * alpha)) - c * p**alpha)
        elif regime == "highT_strong":
            lead = p * math.log(B / p) - float(k) ** alpha
            depth = ln * ((1 + c) * (B ** (2.0 / alpha) + float(k) ** (2 * alpha)) - c * B)
        else:
            lead = p * math.log(B / p) - B
            depth = ln * ((1 + c) * (B ** (2.0 / alpha) + B**4 * float(k) ** (-2 * alpha))
                          - c * B)
    return RegimeReport(regime=regime, value=lead + depth, depth_term=depth,
                        B=float(B), k_ratio=float(k_ratio), b_ratio=float(b_ratio))


@dataclass
class GenErrorReport:
    regime: str
    value: float
    order_one: bool    # True when k > B^(1/alpha): error is an O(1) constant


def regime_generalization_error(spec, B, ln):
    """Leading generalization error (1 - LP/N) * {P^(1-alpha) or B^(-1+1/alpha)}.

    Linear network only; requires sigma_eps2 = o(P^(1-alpha)).
    """
    if spec.alpha <= 1.0:
        raise OutsidePerturbativeRegime("need alpha > 1")
    if spec.sigma_eps2 > spec.p ** (1.0 - spec.alpha) / math.log(spec.p):
        raise OutsidePerturbativeRegime("noise above the o(P^(1-alpha)) margin")
    regime, k_ratio, _ = _classify(spec, B)
    if k_ratio >= 1.0:
        return GenErrorReport(regime=regime, value=1.0, order_one=True)
    depth_factor = 1.0 - ln * spec.p
    scale = spec.p ** (1.0 - spec.alpha) if regime == "lowT" else B ** (-1.0 + 1.0 / spec.alpha)
    return GenErrorReport(regime=regime, value=depth_factor * scale, order_one=False)


# ---------------------------------------------------------------------------
# Exact sweeps


def mc_generalization_error(hat, spec, depth_ratio, beta, n_test, rng, geom=None):
    """Average predictive error over fresh test points: mean of (k1-y)^2 + k2.

    Returns (error, se, per-point array). The posterior is the first-order
    one from posterior_cumulants (linear path when psi = 0).
    """
    if geom is None:
        geom = build_posterior_geometry(hat, beta)
    stats = selfloop_expectations(hat)
    xs, ys = fresh_test_points(hat, spec, n_test, rng)
    vals = np.empty(n_test)
    for i in range(n_test):
        g2 = attach_test_point(geom, xs[i])
        table = eval_integrals(g2, stats.Mhat_diag,
                               _mhat_of(hat, float(xs[i] @ xs[i])))
        summ = posterior_cumulants(hat, depth_ratio, 1.0, beta=beta,
                                   geom=g2, table=table)
        vals[i] = (summ.mean - ys[i]) ** 2 + summ.variance
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_test)), vals


def _mhat_of(hat, hat_norm2):
    from .features import hat_norm_to_raw_ratio
    from .selfloops import _mhat_formula
    rho = hat_norm_to_raw_ratio(hat_norm2, hat.shape)
    return float(_mhat_formula(rho, hat.shape))


def benign_overfit_report(spec, ln_grid, b_grid, shape=None, n_test=100, seed=None):
    """One row per (L/N, B) cell: exact evidence parts, MC generalization
    error with SE, and the regime prediction. Returns a list of dicts
    (CSV-ready) sharing one dataset drawn from ``spec``.
    """
    shape = shape or ShapeParams(0.0, 0.0)
    if seed is None:
        seed = spec.seed
    hat = generate_powerlaw(spec, shape, rng=np.random.default_rng(seed))
    c = selfloop_expectations(hat, shape).c_psi_eta
    rows = []
    cells = [(ln, b) for ln in ln_grid for b in b_grid]
    children = child_seed_sequences(seed, len(cells))
    for (ln, b), child in zip(cells, children):
        beta = b / spec.p
        rep = log_evidence(hat, ln, 1.0, shape, beta=beta)
        err = err_se = None
        if n_test:
            err, err_se, _ = mc_generalization_error(
                hat, spec, ln, beta, n_test, np.random.default_rng(child))
        try:
            regime = regime_log_evidence(spec, b, ln, c=c)
            tag, pred = regime.regime, regime.value
        except OutsidePerturbativeRegime as exc:
            tag, pred = f"excluded ({exc})", float("nan")
        rows.append({
            "ln": ln, "B": b, "beta": beta,
            "kernel": rep.kernel_term, "linear": rep.linear_term,
            "nonlinear": rep.nonlinear_term, "log_Z0": rep.log_Z0,
            "flagged": rep.perturbation_flag,
            "gen_error": err, "gen_error_se": err_se,
            "regime": tag, "regime_value": pred,
        })
    return rows


def fit_regime_constants(values, term_matrix):
    """Nonnegative least-squares fit of the omitted positive constants.

    ``term_matrix`` rows hold the leading terms (with their displayed signs)
    evaluated per instance; returns coefficients minimizing
    |term_matrix @ coef - values|.
    """
    from scipy.optimize import nnls
    coef, _ = nnls(np.asarray(term_matrix, dtype=float), np.asarray(values, dtype=float))
    return coef
