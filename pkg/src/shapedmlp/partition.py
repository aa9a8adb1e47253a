"""First-order partition function, evidence, and posterior cumulants.

Up to a constant, Z(x, tau) = sqrt(det 2 pi M_beta) exp[Q(t*)] (1 + (L/N) C(tau)),
where Q is the Gaussian saddle and the first-order bracket is

    C = -e^{-4 eta} psi_hat^2 (g1-g2) I2  -  2 psi_hat I3
        + (e^{-2 eta} psi_hat / 2) g1 I4
        + e^{-4 eta} psi_hat^2 (g1-g2) I5  +  I6 / 4.

Each I_j is a Gaussian expectation over t ~ N(i Xdag theta_hat, M_beta) of a
polynomial in A(tau) = Xhat t + tau xperp and in the cubic feature vector
B(tau) = sum_mu beta_mu(tau) xhat_mu^{(x3)}. They are evaluated exactly by
complex-mean Wick contraction, entirely through P-space contractions (Gram
Hadamard powers); N0^3 tensors are never materialized. Cubic inner products
use pure cubes of hat vectors; the e^{-4 eta} / e^{-2 eta} prefactors above
carry the tensor-normalization conversion.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import IllConditioned
from .selfloops import selfloop_expectations

BRACKET_FLAG_THRESHOLD = 0.5


class PerturbationTooLarge(UserWarning):
    """First-order bracket magnitude >= 0.5; result returned but flagged."""


# tau-power prefactors of Prop-5.2-style coefficients:
# I_j(tau) = sum_p PREF[j][p] * (i if p odd else 1) * I_j[p] * tau^p
_PREFACTOR = {
    "I2": (1, 2, 1),
    "I3": (1, 1, 1),
    "I4": (1, 1, 3, 1, 1),
    "I5": (1, 2, 1, 2, 1),
    "I6": (1, 4, 2, 4, 1),
}

ALL_COEFF_KEYS = tuple((name, p) for name, pref in _PREFACTOR.items()
                       for p in range(len(pref)))


def _pmul(a, b):
    """Product of two small complex polynomials (1-d coefficient arrays)."""
    out = np.zeros(len(a) + len(b) - 1, dtype=complex)
    for i, ai in enumerate(a):
        out[i:i + len(b)] += ai * b
    return out


def _qform(A, mat, B):
    """sum_{mu nu} A_mu(tau) mat_{mu nu} B_nu(tau) on coefficient stacks (n, d+1)."""
    da, db = A.shape[1], B.shape[1]
    out = np.zeros(da + db - 1, dtype=complex)
    for i in range(da):
        v = mat.T @ A[:, i]
        for j in range(db):
            out[i + j] += v @ B[:, j]
    return out


@dataclass
class PosteriorGeometry:
    """Temperature-dependent caches for the hat-space Gaussian integrals."""

    hat: object
    beta: float
    M: np.ndarray            # (I/beta + G)^{-1}
    logdet_M: float
    R: np.ndarray            # M G
    S: np.ndarray            # G M G
    d: np.ndarray            # Xdag theta_hat = M Y
    h: np.ndarray            # G d
    q_const: float           # Y^T M Y (the saddle constant)
    dGd: float               # |Xhat d|^2 = d^T G d
    tr_R: float
    tr_R2: float
    hMh: float
    # test-point block (None when no test point)
    g: np.ndarray | None = None     # Xhat^T xhat
    a: np.ndarray | None = None     # M g  (= Xdag xhat)
    gp: np.ndarray | None = None    # Xhat^T xperp = g - G a
    n2: float | None = None         # |xhat|^2
    qg: float | None = None         # <xhat, xperp> = n2 - g.a
    npp: float | None = None        # |xperp|^2
    dgp: float | None = None        # <Xhat d, xperp>
    gpMh: float | None = None
    gpMgp: float | None = None

    @property
    def x_perp(self):
        """xperp = xhat - Xhat a, materialized on demand."""
        return self.hat.xhat_test - self.hat.Xhat @ self.a


def build_posterior_geometry(hat, beta, xhat_test=None, cond_limit=1e12):
    """Assemble M_beta = (I/beta + Xhat^T Xhat)^{-1} and every derived cache.

    ``beta = inf`` (zero temperature) is a distinct path through the Gram
    inverse, not a large-beta limit. Raises IllConditioned when the condition
    number of (I/beta + G) exceeds ``cond_limit``.
    """
    G = hat.G
    evals, Q = np.linalg.eigh(G)
    shifted = evals if np.isinf(beta) else evals + 1.0 / beta
    if shifted[0] <= 0.0 or shifted[-1] / shifted[0] > cond_limit:
        raise IllConditioned(
            f"condition number {shifted[-1] / max(shifted[0], 1e-300):.3g} exceeds {cond_limit:.0e}")
    inv = 1.0 / shifted
    M = (Q * inv) @ Q.T
    R = M @ G
    S = G @ R
    d = M @ hat.Y
    h = G @ d
    geom = PosteriorGeometry(
        hat=hat, beta=float(beta), M=M,
        logdet_M=float(np.sum(np.log(inv))),
        R=R, S=S, d=d, h=h,
        q_const=float(hat.Y @ d),
        dGd=float(d @ h),
        tr_R=float(np.trace(R)),
        tr_R2=float(np.sum(R * R.T)),
        hMh=float(h @ M @ h),
    )
    if xhat_test is None and hat.xhat_test is not None:
        xhat_test = hat.xhat_test
    if xhat_test is not None:
        xhat_test = np.asarray(xhat_test, dtype=float)
        geom.hat = hat.with_test_point(xhat_test)
        g = hat.Xhat.T @ xhat_test
        a = M @ g
        Ga = G @ a
        geom.g = g
        geom.a = a
        geom.gp = g - Ga
        geom.n2 = float(xhat_test @ xhat_test)
        geom.qg = geom.n2 - float(g @ a)
        geom.npp = geom.n2 - 2.0 * float(g @ a) + float(a @ Ga)
        geom.dgp = float(d @ geom.gp)
        geom.gpMh = float(geom.gp @ M @ h)
        geom.gpMgp = float(geom.gp @ M @ geom.gp)
    return geom


def attach_test_point(geom, xhat_test):
    """A copy of ``geom`` carrying a (new) test point; M-caches are shared."""
    import copy

    hat = geom.hat
    xhat_test = np.asarray(xhat_test, dtype=float)
    out = copy.copy(geom)
    out.hat = hat.with_test_point(xhat_test)
    g = hat.Xhat.T @ xhat_test
    a = geom.M @ g
    Ga = hat.G @ a
    out.g = g
    out.a = a
    out.gp = g - Ga
    out.n2 = float(xhat_test @ xhat_test)
    out.qg = out.n2 - float(g @ a)
    out.npp = out.n2 - 2.0 * float(g @ a) + float(a @ Ga)
    out.dgp = float(geom.d @ out.gp)
    out.gpMh = float(out.gp @ geom.M @ geom.h)
    out.gpMgp = float(out.gp @ geom.M @ out.gp)
    return out


@dataclass
class IntegralTable:
    """tau-polynomials of I2..I6 plus the bracketed-coefficient tables.

    ``poly[name]`` is the complex coefficient array of I_name(tau);
    ``coeffs[(name, p)]`` is the real Prop-5.2-convention coefficient. Even
    tau-powers are real and odd ones imaginary; ``parity_residual`` records
    the worst off-parity magnitude as an internal consistency diagnostic.
    """

    poly: dict
    coeffs: dict = field(default_factory=dict)
    parity_residual: float = 0.0
    I1 = 1.0    # the zeroth integral is identically one

    def __post_init__(self):
        worst = 0.0
        for name, pc in self.poly.items():
            pref = _PREFACTOR[name]
            scale = max(1.0, float(np.max(np.abs(pc))))
            for power in range(len(pref)):
                c = pc[power] if power < len(pc) else 0.0 + 0.0j
                want = c.imag if power % 2 else c.real
                off = c.real if power % 2 else c.imag
                worst = max(worst, abs(off) / scale)
                self.coeffs[(name, power)] = float(want) / pref[power]
        self.parity_residual = worst

    def __getitem__(self, key):
        return self.coeffs[key]

    def poly_value(self, name, tau):
        return complex(np.polyval(self.poly[name][::-1], tau))


def eval_integrals(geom, mhat_diag=None, mhat_test=None):
    """Exact Gaussian expectations I2..I6 as tau-polynomials.

    The Mhat/mhat reweightings for I3 come from the self-loop closed forms
    unless supplied. Cost O(P^3) once plus O(P^2) per test point.
    """
    hat = geom.hat
    if mhat_diag is None:
        stats = selfloop_expectations(hat)
        mhat_diag, mhat_test = stats.Mhat_diag, stats.mhat_test
    if mhat_test is None and geom.g is not None:
        from .selfloops import _mhat_formula
        mhat_test = float(_mhat_formula(hat.rho_test, hat.shape))
    p = hat.n_points
    G, M, R, S, d, h = hat.G, geom.M, geom.R, geom.S, geom.d, geom.h
    r = np.diag(R).copy()
    has_test = geom.g is not None

    if has_test:
        n = p + 1
        g, a, gp = geom.g, geom.a, geom.gp
        K = np.empty((n, n))
        K[:p, :p] = G
        K[:p, p] = K[p, :p] = g
        K[p, p] = geom.n2
        mean_b = np.zeros((n, 2), dtype=complex)
        mean_b[:p, 0] = 1j * d
        mean_b[:p, 1] = -a
        mean_b[p, 1] = 1.0
        mean_f = np.zeros((n, 2), dtype=complex)
        mean_f[:p, 0] = 1j * h
        mean_f[p, 0] = 1j * float(d @ g)
        mean_f[:p, 1] = gp
        mean_f[p, 1] = geom.qg
        Cbb = np.zeros((n, n))
        Cbb[:p, :p] = M
        Cbf = np.zeros((n, n))
        Cbf[:p, :p] = R
        Cbf[:p, p] = a
        Cff = np.empty((n, n))
        Cff[:p, :p] = S
        Cff[:p, p] = Cff[p, :p] = G @ a
        Cff[p, p] = float(g @ a)
    else:
        n = p
        K = G
        mean_b = (1j * d)[:, None]
        mean_f = (1j * h)[:, None]
        Cbb, Cbf, Cff = M, R, S

    K2 = K * K
    K3 = K2 * K
    cbf_d = np.diag(Cbf).copy()
    cff_d = np.diag(Cff).copy()

    # I2 = E[<B, B>]
    i2 = _qform(mean_b, K3, mean_b)
    i2[0] += np.sum(K3 * Cbb)

    # I4 = sum_mu E[beta_mu phi_mu^3]
    deg = mean_f.shape[1] - 1
    mf2 = np.zeros((n, 2 * deg + 1), dtype=complex)
    mf3 = np.zeros((n, 3 * deg + 1), dtype=complex)
    mbf = np.zeros((n, 2 * deg + 1), dtype=complex)
    for i in range(n):
        mf2[i] = _pmul(mean_f[i], mean_f[i])
        mf3[i] = _pmul(mf2[i], mean_f[i])
        mbf[i] = _pmul(mean_b[i], mean_f[i])
    i4 = np.zeros(4 * deg + 1, dtype=complex)
    for i in range(n):
        i4[: 4 * deg + 1] += _pmul(mean_b[i], mf3[i])
    i4[: 2 * deg + 1] += 3.0 * np.einsum("i,ij->j", cff_d, mbf)
    i4[: 2 * deg + 1] += 3.0 * np.einsum("i,ij->j", cbf_d, mf2)
    i4[0] += 3.0 * float(cbf_d @ cff_d)

    # I5 = sum_{mu nu} K2_{mu nu} E[beta_mu phi_mu phi_nu beta_nu]
    i5 = np.zeros(4 * deg + 1, dtype=complex)
    i5[: 4 * deg + 1] += _qform(mbf, K2, mbf)
    pair12 = np.einsum("i,ij->j", K2 @ cbf_d, mbf)      # (beta_mu, phi_mu) pair
    i5[: 2 * deg + 1] += 2.0 * pair12                    # plus its (phi_nu, beta_nu) mirror
    i5[: 2 * deg + 1] += _qform(mean_f, K2 * Cbf, mean_b)
    i5[: 2 * deg + 1] += _qform(mean_b, K2 * Cbf.T, mean_f)
    i5[: 2 * deg + 1] += _qform(mean_f, K2 * Cbb, mean_f)
    i5[: 2 * deg + 1] += _qform(mean_b, K2 * Cff, mean_b)
    i5[0] += float(cbf_d @ K2 @ cbf_d)
    i5[0] += np.sum(K2 * Cbf * Cbf.T)
    i5[0] += np.sum(K2 * Cbb * Cff)

    # I6 = E[<A, A>^2] via the Gaussian-vector quartic identity
    #   E[|A|^4] = (m.m + tr C)^2 + 2 tr(C^2) + 4 m^T C m,  A ~ N(m, C)
    if has_test:
        mm = np.array([-geom.dGd, 2j * geom.dgp, geom.npp], dtype=complex)
        mcm = np.array([-geom.hMh, 2j * geom.gpMh, geom.gpMgp], dtype=complex)
    else:
        mm = np.array([-geom.dGd], dtype=complex)
        mcm = np.array([-geom.hMh], dtype=complex)
    mm[0] += geom.tr_R
    i6 = _pmul(mm, mm)
    i6[0] += 2.0 * geom.tr_R2
    i6[: len(mcm)] += 4.0 * mcm

    # I3: explicit degree-2 scalars
    i3 = np.zeros(3, dtype=complex)
    i3[0] = float(mhat_diag @ r) - float(d @ G @ (mhat_diag * d))
    if has_test:
        mh_t = float(mhat_test)
        i3[1] = 1j * (mh_t * float(d @ g) - float(d @ G @ (mhat_diag * a))
                      + float(gp @ (mhat_diag * d)))
        i3[2] = mh_t * geom.qg - float(gp @ (mhat_diag * a))

    def pad(v):
        out = np.zeros(5, dtype=complex)
        out[: len(v)] = v
        return out

    return IntegralTable(poly={"I2": pad(i2), "I3": pad(i3), "I4": pad(i4),
                               "I5": pad(i5), "I6": pad(i6)})


def bracket_weights(stats, shape):
    """Coefficients multiplying I2..I6 inside the first-order bracket."""
    psi_hat, eta = shape.psi_hat, shape.eta
    gg = stats.g1 - stats.g2
    half_c = np.exp(-4.0 * eta) * psi_hat**2 * gg       # = c_{psi,eta}/2
    return {
        "I2": -half_c,
        "I3": -2.0 * psi_hat,
        "I4": 0.5 * np.exp(-2.0 * eta) * psi_hat * stats.g1,
        "I5": half_c,
        "I6": 0.25,
    }


def bracket_poly(table, stats, shape):
    """(linear, nonlinear) complex tau-polynomials of the 1/N bracket.

    linear = I6/4 (the only surviving term at psi = 0); nonlinear collects
    every psi_hat-weighted integral.
    """
    w = bracket_weights(stats, shape)
    linear = w["I6"] * table.poly["I6"]
    nonlinear = np.zeros(5, dtype=complex)
    if shape.psi_hat != 0.0:
        for name in ("I2", "I3", "I4", "I5"):
            nonlinear = nonlinear + w[name] * table.poly[name]
    return linear, nonlinear


@dataclass
class EvidenceReport:
    """log Z(0) and its decomposition: kernel + first-order linear/nonlinear.

    ``log_Z0 = kernel_term + log1p(bracket)`` with
    ``bracket = linear_term + nonlinear_term`` (each already carries L/N);
    the three parts sum to log_Z0 up to the quadratic remainder of log1p,
    and exactly for the additive zero-temperature transcription.
    """

    log_Z0: float
    kernel_term: float
    linear_term: float
    nonlinear_term: float
    bracket: float
    perturbation_flag: bool
    beta: float
    depth_ratio: float
    additive: bool = False

    def to_json(self):
        doc = {k: getattr(self, k) for k in
               ("log_Z0", "kernel_term", "linear_term", "nonlinear_term",
                "bracket", "perturbation_flag", "beta", "depth_ratio", "additive")}
        doc["schema_version"] = 1
        doc["kind"] = "evidence_report"
        return json.dumps(doc)


@dataclass
class PosteriorSummary:
    """Predictive-posterior cumulants with zeroth-order and 1/N parts split."""

    mean: float
    variance: float
    mean_zeroth: float
    mean_correction: float
    variance_zeroth: float
    variance_correction: float
    third_cumulant: float
    fourth_cumulant: float
    perturbation_flag: bool
    beta: float
    depth_ratio: float

    def to_json(self):
        doc = {k: getattr(self, k) for k in
               ("mean", "variance", "mean_zeroth", "mean_correction",
                "variance_zeroth", "variance_correction", "third_cumulant",
                "fourth_cumulant", "perturbation_flag", "beta", "depth_ratio")}
        doc["schema_version"] = 1
        doc["kind"] = "posterior_summary"
        return json.dumps(doc)


def _saddle_poly(geom):
    """Q(t*) as a tau-polynomial: -Y.d/2 - i (d.g) tau - (qg/2) tau^2."""
    q = np.zeros(3, dtype=complex)
    q[0] = -0.5 * geom.q_const
    if geom.g is not None:
        q[1] = -1j * float(geom.d @ geom.g)
        q[2] = -0.5 * geom.qg
    return q


def log_partition(geom, depth, width, tau, table=None, stats=None):
    """log Z(x, tau) up to the shared constant; complex for tau != 0.

    log Z = (1/2) log det(2 pi M_beta) + Q(t*) + log(1 + (L/N) C(tau)).
    Warns (PerturbationTooLarge) when |(L/N) C(tau)| >= 0.5.
    """
    hat = geom.hat
    if stats is None:
        stats = selfloop_expectations(hat)
    if table is None:
        table = eval_integrals(geom, stats.Mhat_diag, stats.mhat_test)
    eps = depth / width
    lin, nonlin = bracket_poly(table, stats, hat.shape)
    cpoly = lin + nonlin
    cval = complex(np.polyval(cpoly[::-1], tau))
    qval = complex(np.polyval(_saddle_poly(geom)[::-1], tau))
    p = hat.n_points
    kernel = 0.5 * (p * np.log(2.0 * np.pi) + geom.logdet_M) + qval
    if abs(eps * cval) >= BRACKET_FLAG_THRESHOLD:
        warnings.warn(f"first-order bracket magnitude {abs(eps * cval):.3g} >= 0.5",
                      PerturbationTooLarge, stacklevel=2)
    return kernel + np.log(1.0 + eps * cval)


def log_evidence(hat, depth, width, shape=None, beta=np.inf, geom=None):
    """Evidence report at inverse temperature beta (beta = inf allowed)."""
    if shape is None:
        shape = hat.shape
    stats = selfloop_expectations(hat, shape)
    if geom is None:
        geom = build_posterior_geometry(hat, beta)
    table = eval_integrals(geom, stats.Mhat_diag, stats.mhat_test)
    eps = depth / width
    lin, nonlin = bracket_poly(table, stats, shape)
    p = hat.n_points
    kernel = 0.5 * (p * np.log(2.0 * np.pi) + geom.logdet_M) - 0.5 * geom.q_const
    linear = eps * lin[0].real
    nonlinear = eps * nonlin[0].real
    bracket = linear + nonlinear
    if bracket <= -1.0:
        raise IllConditioned("first-order bracket pushes 1 + (L/N)C below zero")
    return EvidenceReport(
        log_Z0=float(kernel + np.log1p(bracket)),
        kernel_term=float(kernel),
        linear_term=float(linear),
        nonlinear_term=float(nonlinear),
        bracket=float(bracket),
        perturbation_flag=bool(abs(bracket) >= BRACKET_FLAG_THRESHOLD),
        beta=float(beta),
        depth_ratio=float(eps),
    )


def posterior_cumulants(hat, depth, width, shape=None, beta=np.inf, xhat_test=None,
                        geom=None, table=None):
    """Predictive-posterior cumulants at a test point, first order in 1/N.

    mean = i d/dtau log Z|_0 and variance = -d^2/dtau^2 log Z|_0 are exact
    derivatives of ``log_partition`` (finite differences agree to ~1e-6
    relative); cumulants 3-4 come from the cubic/quartic tau-coefficients
    and are first-order-only.
    """
    if shape is None:
        shape = hat.shape
    if geom is None:
        geom = build_posterior_geometry(hat, beta, xhat_test=xhat_test)
    if geom.g is None:
        raise ValueError("posterior cumulants need a test point")
    hat = geom.hat                      # carries the active test point
    stats = selfloop_expectations(hat, shape)
    if table is None:
        table = eval_integrals(geom, stats.Mhat_diag, stats.mhat_test)
    eps = depth / width
    lin, nonlin = bracket_poly(table, stats, shape)
    c = lin + nonlin
    d0 = 1.0 + eps * c[0]
    if d0.real <= 0.0:
        raise IllConditioned("first-order bracket pushes 1 + (L/N)C below zero")
    q1 = float(geom.d @ geom.g)
    qg = geom.qg
    # exact tau-derivatives of Q + log(1 + eps C) at tau = 0
    l1 = -1j * q1 + eps * c[1] / d0
    l2 = -qg + eps * 2.0 * c[2] / d0 - (eps * c[1] / d0) ** 2
    l3 = (eps * 6.0 * c[3] / d0 - 3.0 * eps**2 * 2.0 * c[2] * c[1] / d0**2
          + 2.0 * (eps * c[1] / d0) ** 3)
    l4 = (eps * 24.0 * c[4] / d0
          - eps**2 * (24.0 * c[3] * c[1] + 12.0 * c[2] ** 2) / d0**2
          + 24.0 * eps**3 * c[2] * c[1] ** 2 / d0**3
          - 6.0 * (eps * c[1] / d0) ** 4)
    mean = (1j * l1).real
    variance = (-l2).real
    flag = abs(eps * c[0]) >= BRACKET_FLAG_THRESHOLD
    if flag:
        warnings.warn(f"first-order bracket magnitude {abs(eps * c[0]):.3g} >= 0.5",
                      PerturbationTooLarge, stacklevel=2)
    return PosteriorSummary(
        mean=float(mean), variance=float(variance),
        mean_zeroth=float(q1), mean_correction=float(mean - q1),
        variance_zeroth=float(qg), variance_correction=float(variance - qg),
        third_cumulant=float((-1j * l3).real), fourth_cumulant=float(l4.real),
        perturbation_flag=bool(flag), beta=float(beta), depth_ratio=float(eps),
    )


def zero_temp_evidence(hat, depth, width, shape=None):
    """Exact transcription of the zero-temperature evidence proposition.

    log Z(0) = (1/2) tr log(G^{-1}) - |theta|^2/2
             + (LP/4N)[|theta|^4/P - 2|theta|^2 + P]
             + (c/2)(L/N)[tr(G^2) - sum_mu (G^2)_mm y_m d_m
               + sum_{mu nu} y_mu y_nu G2_{mu nu} d_mu d_nu - sum G3 o G^{-1}],
    with d = G^{-1} Y. Parts are additive (the proposition is first order);
    the same 2-pi constant as ``log_evidence`` is kept so the beta -> inf
    limits agree.
    """
    if shape is None:
        shape = hat.shape
    p = hat.n_points
    eps = depth / width
    evals, Q = np.linalg.eigh(hat.G)
    if evals[0] <= 0.0 or evals[-1] / evals[0] > 1e12:
        raise IllConditioned("Gram matrix condition number exceeds 1e12")
    Ginv = (Q / evals) @ Q.T
    d = Ginv @ hat.Y
    theta2 = float(hat.Y @ d)
    kernel = 0.5 * (p * np.log(2.0 * np.pi) - float(np.sum(np.log(evals)))) - 0.5 * theta2
    linear = 0.25 * eps * p * (theta2**2 / p - 2.0 * theta2 + p)
    c = selfloop_expectations(hat, shape).c_psi_eta
    if c != 0.0:
        y, G2, G3 = hat.Y, hat.G2, hat.G3
        row2 = G2.sum(axis=1)                      # (G^2)_{mu mu}
        block = (float(np.sum(G2))
                 - float(row2 @ (y * d))
                 + float((y * d) @ G2 @ (y * d))
                 - float(np.sum(G3 * Ginv)))
        nonlinear = 0.5 * c * eps * block
    else:
        nonlinear = 0.0
    bracket = linear + nonlinear
    return EvidenceReport(
        log_Z0=float(kernel + bracket),
        kernel_term=float(kernel),
        linear_term=float(linear),
        nonlinear_term=float(nonlinear),
        bracket=float(bracket),
        perturbation_flag=bool(abs(bracket) >= BRACKET_FLAG_THRESHOLD),
        beta=np.inf,
        depth_ratio=float(eps),
        additive=True,
    )


def zero_temp_posterior(hat, depth, width, xhat_test, shape=None, branch="auto"):
    """Exact transcription of the zero-temperature posterior proposition.

    The small-interpolant branch (|theta|^2 = o(P)) gives
        mean = sum_mu a_mu y_mu [1 + (LP/N) c (xm^T S xm - x^T S x)],
        var  = |xperp|^2 (1 - LP/N);
    the large branch (|theta|^2/P order 1, selected when the ratio >= 0.1 or
    ``branch='large'``) adds the displayed cubic-contraction mean term and
    the variance addition.
    """
    if shape is None:
        shape = hat.shape
    p = hat.n_points
    eps = depth / width
    evals, Q = np.linalg.eigh(hat.G)
    if evals[0] <= 0.0 or evals[-1] / evals[0] > 1e12:
        raise IllConditioned("Gram matrix condition number exceeds 1e12")
    Ginv = (Q / evals) @ Q.T
    y = hat.Y
    d = Ginv @ y
    theta2 = float(y @ d)
    xhat_test = np.asarray(xhat_test, dtype=float)
    g = hat.Xhat.T @ xhat_test
    a = Ginv @ g
    n2 = float(xhat_test @ xhat_test)
    npp = n2 - float(g @ a)
    q1 = float(a @ y)
    c = selfloop_expectations(hat, shape).c_psi_eta

    sig_mu = hat.G2.sum(axis=1) / p            # xm^T Sigma xm
    sig_x = float(g @ g) / p                    # x^T Sigma x
    mean = float(np.sum(a * y * (1.0 + eps * p * c * (sig_mu - sig_x))))
    variance = npp * (1.0 - eps * p)

    if branch == "auto":
        branch = "large" if theta2 / p >= 0.1 else "small"
    if branch == "large":
        gx2 = g**2
        mean += eps * c * (q1 * float(d @ (y * gx2))
                           - float((a * y) @ hat.G2 @ (y * d))
                           - float(a @ hat.G3 @ d))
        variance += npp * eps * (theta2 + 2.0 * c * float(gx2 @ (y * d)))
    elif branch != "small":
        raise ValueError("branch must be 'auto', 'small', or 'large'")

    return PosteriorSummary(
        mean=float(mean), variance=float(variance),
        mean_zeroth=float(q1), mean_correction=float(mean - q1),
        variance_zeroth=float(npp), variance_correction=float(variance - npp),
        third_cumulant=0.0, fourth_cumulant=0.0,
        perturbation_flag=bool(eps * p >= BRACKET_FLAG_THRESHOLD),
        beta=np.inf, depth_ratio=float(eps),
    )
