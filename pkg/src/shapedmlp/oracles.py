"""Independent brute-force verifiers.

Three routes that share no linear-algebra shortcuts with the closed forms
under test:

* ``wick_mc`` / ``wick_quadrature`` evaluate the partition-function integrals
  by materializing the cubic feature tensors explicitly (N0^3 vectors) and
  integrating over t ~ N(i Xdag theta_hat, M_beta) -- by sampling, or exactly
  by tensor Gauss-Hermite quadrature (the integrands are quartic
  polynomials, so a 5-node rule is exact).
* ``posterior_mcmc_small`` runs random-walk Metropolis over all weights of a
  small network.
* ``linear_exact_moments`` propagates exact Wishart recursions for psi = 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergence, ShapedMLPError
from .network import shaped_activation
from .seeding import block_generators, jackknife_mean_se

_COEFF_COUNT = {"I2": 3, "I3": 3, "I4": 5, "I5": 5, "I6": 5}
# same tau-power prefactors as the closed-form table
_PREFACTOR = {
    "I2": (1, 2, 1),
    "I3": (1, 1, 1),
    "I4": (1, 1, 3, 1, 1),
    "I5": (1, 2, 1, 2, 1),
    "I6": (1, 4, 2, 4, 1),
}


@dataclass
class OracleConfig:
    """Sampling budgets and MCMC tuning for the oracle runs."""

    n_samples: int = 10_000
    seed: int = 0
    step_size: float = 0.05
    burn_in: int = 20_000
    thinning: int = 1
    n_chains: int = 4
    rhat_limit: float = 1.1
    tolerance_scale: float = 1.0


class _WickIntegrands:
    """Explicit-tensor evaluation of the I2..I6 integrands at given t, tau."""

    def __init__(self, geom, mhat_diag, mhat_test):
        hat = geom.hat
        if geom.g is None:
            raise ShapedMLPError("wick oracle needs a geometry with a test point")
        self.n0 = hat.n0
        self.p = hat.n_points
        X = hat.Xhat
        x = hat.xhat_test
        self.X = X
        cubes = np.stack([np.einsum("i,j,k->ijk", X[:, m], X[:, m], X[:, m]).ravel()
                          for m in range(self.p)])
        cube_x = np.einsum("i,j,k->ijk", x, x, x).ravel()
        self.cubes = cubes
        self.perp3 = cube_x - geom.a @ cubes
        self.xperp = x - X @ geom.a
        self.mhat = np.asarray(mhat_diag, dtype=float)
        self.mh_shift = x * float(mhat_test) - X @ (self.mhat * geom.a)
        self.d = geom.d
        self.M = geom.M
        self.chol = np.linalg.cholesky(geom.M + 1e-300 * np.eye(self.p))

    def evaluate(self, t, tau):
        """Integrand values for a batch of t (n, P) at scalar tau.

        Complex bilinear squares throughout (sum v*v, never |v|^2).
        """
        n = t.shape[0]
        n0 = self.n0
        A = t @ self.X.T + tau * self.xperp          # (n, N0)
        B = t @ self.cubes + tau * self.perp3        # (n, N0^3)
        D = (t * self.mhat) @ self.X.T + tau * self.mh_shift
        out = {}
        out["I2"] = np.einsum("ci,ci->c", B, B)
        out["I3"] = np.einsum("ci,ci->c", A, D)
        # contract cube slots through batched matmuls (complex BLAS)
        bjk = (A[:, None, :] @ B.reshape(n, n0, n0 * n0)).reshape(n, n0, n0)
        c2 = B.reshape(n, n0 * n0, n0) @ A[:, :, None]
        out["I4"] = np.einsum("ci,ci->c", (A[:, None, :] @ bjk)[:, 0, :], A)
        out["I5"] = np.einsum("ci,ci->c", bjk.reshape(n, -1), c2[:, :, 0])
        a2 = np.einsum("ci,ci->c", A, A)
        out["I6"] = a2 * a2
        return out


def _coeff_nodes(degree):
    nodes = np.array([0.0, 1.0, -1.0]) if degree == 2 else np.array([0.0, 1.0, -1.0, 0.5, -0.5])
    vand = np.vander(nodes, degree + 1, increasing=True)
    return nodes, np.linalg.inv(vand)


_NODES5, _VINV5 = _coeff_nodes(4)


def _convention_value(name, power, raw_coeff):
    """Convert a raw complex tau-coefficient to the bracketed convention."""
    pref = _PREFACTOR[name][power]
    val = raw_coeff.imag if power % 2 else raw_coeff.real
    return val / pref


def wick_mc(geom, mhat_diag, mhat_test, n_samples=100_000, seed=0, which=None):
    """Complex-shift Gaussian MC estimates of the bracketed coefficients.

    Samples u ~ N(0, M_beta), sets t = u + i Xdag theta_hat, evaluates the
    integrand polynomials at five tau nodes per sample, and solves for the
    tau-coefficients; per-coefficient means carry jackknife standard errors.
    Returns {(name, power): (estimate, se)}, or a single (estimate, se) when
    ``which=(name, power)`` is given.
    """
    integrands = _WickIntegrands(geom, mhat_diag, mhat_test)
    mean_shift = 1j * geom.d
    samples = {name: [] for name in _COEFF_COUNT}
    for start, stop, rng in block_generators(seed, n_samples, block=8192):
        z = rng.standard_normal((stop - start, geom.hat.n_points))
        t = z @ integrands.chol.T + mean_shift
        node_vals = {name: np.empty((stop - start, len(_NODES5)), dtype=complex)
                     for name in _COEFF_COUNT}
        for col, tau in enumerate(_NODES5):
            vals = integrands.evaluate(t, tau)
            for name in _COEFF_COUNT:
                node_vals[name][:, col] = vals[name]
        for name in _COEFF_COUNT:
            samples[name].append(node_vals[name] @ _VINV5.T)

    out = {}
    for name, count in _COEFF_COUNT.items():
        coeffs = np.concatenate(samples[name])
        for power in range(count):
            pref = _PREFACTOR[name][power]
            raw = coeffs[:, power]
            vals = (raw.imag if power % 2 else raw.real) / pref
            est, se = jackknife_mean_se(vals)
            out[(name, power)] = (float(est), float(se))
    if which is not None:
        return out[tuple(which)]
    return out


def wick_quadrature(geom, mhat_diag, mhat_test, n_nodes=5):
    """Exact values of all bracketed coefficients by tensor Gauss-Hermite.

    The integrands are polynomials of degree <= 4 in t, so ``n_nodes = 5``
    per dimension (exact through degree 9) leaves no quadrature error.
    Practical for P <= 6.
    """
    integrands = _WickIntegrands(geom, mhat_diag, mhat_test)
    p = geom.hat.n_points
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / np.sqrt(2.0 * np.pi)
    grids = np.array(list(itertools.product(*[nodes] * p)))
    wts = np.prod(np.array(list(itertools.product(*[weights] * p))), axis=1)
    t = grids @ integrands.chol.T + 1j * geom.d
    out = {}
    node_vals = {name: np.empty(len(_NODES5), dtype=complex) for name in _COEFF_COUNT}
    for col, tau in enumerate(_NODES5):
        vals = integrands.evaluate(t, tau)
        for name in _COEFF_COUNT:
            node_vals[name][col] = wts @ vals[name]
    for name, count in _COEFF_COUNT.items():
        coeffs = _VINV5 @ node_vals[name]
        for power in range(count):
            out[(name, power)] = _convention_value(name, power, coeffs[power])
    return out


# ---------------------------------------------------------------------------
# Metropolis oracle


def _forward_all(weights, feats, psi, depth):
    h = feats
    for w in weights[:-1]:
        h = shaped_activation(w @ h / np.sqrt(h.shape[0]), psi, depth)
    return (weights[-1] @ h / np.sqrt(h.shape[0]))[0]


def _unpack(theta, shapes):
    out = []
    idx = 0
    for s in shapes:
        size = s[0] * s[1]
        out.append(theta[idx:idx + size].reshape(s))
        idx += size
    return out


def _split_rhat(chains):
    """Split-chain potential scale reduction factor."""
    half = chains.shape[1] // 2
    parts = np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)
    m, n = parts.shape
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _ess(series):
    """Effective sample size via the initial-positive-sequence estimator."""
    x = series - series.mean()
    n = len(x)
    acf = np.correlate(x, x, mode="full")[n - 1:] / (np.arange(n, 0, -1) * x.var() + 1e-300)
    tau_int = 1.0
    for lag in range(1, min(n // 2, 2000)):
        pair = acf[lag]
        if lag + 1 < len(acf):
            pair = acf[lag] + acf[lag + 1]
        if pair < 0:
            break
        tau_int += 2.0 * acf[lag]
    return max(1.0, n / max(tau_int, 1.0))


@dataclass
class McmcResult:
    mean: float
    variance: float
    se_mean: float
    se_variance: float
    ess: float
    rhat: float
    acceptance: float
    samples: np.ndarray = field(repr=False, default=None)


def posterior_mcmc_small(config, raw, beta, x_test, oracle_cfg=None, seed=None):
    """Random-walk Metropolis predictive posterior for networks <= 500 weights.

    Targets prior x exp(-(beta/2) sum_mu (f(x_mu) - y_mu)^2), i.e. ``beta``
    is the same per-point likelihood precision that enters M_beta; in the
    paper's (1/2P)-normalized loss this multiplier reads beta*P.
    """
    cfg = oracle_cfg or OracleConfig()
    if seed is None:
        seed = cfg.seed
    if not np.isfinite(beta):
        raise ShapedMLPError("the Metropolis oracle needs finite beta")
    shapes = []
    prev = config.n0
    for w in config.widths:
        shapes.append((w, prev))
        prev = w
    shapes.append((1, prev))
    n_par = sum(a * b for a, b in shapes)
    if n_par > 500:
        raise ShapedMLPError(f"{n_par} parameters exceed the 500-weight oracle limit")

    feats = raw.X
    y = raw.Y
    x_test = np.asarray(x_test, dtype=float)
    sigma2 = config.sigma2
    psi, depth = config.psi, config.depth

    def log_post(theta):
        ws = _unpack(theta, shapes)
        f = _forward_all(ws, feats, psi, depth)
        return -0.5 * theta @ theta / sigma2 - 0.5 * beta * np.sum((f - y) ** 2)

    def f_test(theta):
        return float(_forward_all(_unpack(theta, shapes), x_test.reshape(-1, 1), psi, depth)[0])

    root = np.random.SeedSequence(seed)
    chains = []
    acc_rates = []
    for chain_seed in root.spawn(cfg.n_chains):
        rng = np.random.default_rng(chain_seed)
        theta = np.sqrt(sigma2) * rng.standard_normal(n_par)
        lp = log_post(theta)
        step = cfg.step_size
        kept = np.empty(cfg.n_samples)
        n_acc = 0
        n_prop = 0
        total = cfg.burn_in + cfg.n_samples * cfg.thinning
        for it in range(total):
            prop = theta + step * rng.standard_normal(n_par)
            lp_prop = log_post(prop)
            n_prop += 1
            if np.log(rng.random()) < lp_prop - lp:
                theta, lp = prop, lp_prop
                n_acc += 1
            if it < cfg.burn_in:
                if (it + 1) % 500 == 0:      # stochastic-approximation tuning
                    rate = n_acc / n_prop
                    step *= np.exp(0.5 * (rate - 0.27))
                    n_acc = n_prop = 0
            else:
                k = it - cfg.burn_in
                if k % cfg.thinning == 0:
                    kept[k // cfg.thinning] = f_test(theta)
        chains.append(kept)
        acc_rates.append(n_acc / max(n_prop, 1))

    chains = np.array(chains)
    rhat = _split_rhat(chains)
    if rhat > cfg.rhat_limit:
        raise NonConvergence(f"split-chain R-hat = {rhat:.3f} > {cfg.rhat_limit}")
    flat = chains.ravel()
    ess = sum(_ess(c) for c in chains)
    mean = float(flat.mean())
    var = float(flat.var(ddof=1))
    centered2 = (flat - mean) ** 2
    mu4 = float(np.mean(centered2**2))
    se_mean = float(np.sqrt(var / ess))
    se_var = float(np.sqrt(max(mu4 - var**2, 0.0) / ess))
    return McmcResult(mean=mean, variance=var, se_mean=se_mean, se_variance=se_var,
                      ess=float(ess), rhat=rhat, acceptance=float(np.mean(acc_rates)),
                      samples=chains)


# ---------------------------------------------------------------------------
# Exact deep-linear recursions


def linear_exact_moments(config, X, pairs, q=1):
    """Exact final-layer overlap moments for psi = 0.

    ``q = 1``: E[<x_mu^L, x_nu^L>/N_L] = sigma^{2L} <x_mu, x_nu>/N0 for the
    single pair. ``q = 2``: E[prod of two overlaps] including the Wishart
    1/N_l exchange terms, for ``pairs = ((m1, n1), (m2, n2))``.
    """
    if config.psi != 0.0:
        raise ShapedMLPError("exact recursion applies to psi = 0 only")
    X = np.asarray(X, dtype=float)
    n0 = X.shape[0]
    s2 = config.sigma2
    ov = X.T @ X / n0
    if q == 1:
        (mu, nu) = pairs if np.ndim(pairs[0]) == 0 else pairs[0]
        return s2 ** config.depth * ov[mu, nu]
    if q == 2:
        (m1, n1), (m2, n2) = pairs
        v = np.array([
            ov[m1, n1] * ov[m2, n2],
            ov[m1, m2] * ov[n1, n2],
            ov[m1, n2] * ov[n1, m2],
        ])
        for width in config.widths:
            t = s2**2 * np.array([
                [1.0, 1.0 / width, 1.0 / width],
                [1.0 / width, 1.0, 1.0 / width],
                [1.0 / width, 1.0 / width, 1.0],
            ])
            v = t @ v
        return float(v[0])
    raise ShapedMLPError("order q <= 2 only")
