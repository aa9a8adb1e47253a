"""Self-loop process statistics: closed forms, chain Monte Carlo, and the
first-order prior Laplace transform.

The single-vertex birth chain adds a self-loop with probability
(|psi|/L)(1+2s) per layer; its path functionals have the closed forms

    E[c (s2 r)^{s0}]            = e^{-|psi|} (1-2ph)^{-1/2}
    E[c (s2 r)^{s0-1} s^{(l)}]  = psi_hat e^{-|psi|} (1-2ph)^{-3/2} g3(eta, l/L)
    E[c (s2 r)^{s0-1} A/L]      = psi_hat e^{-|psi|} (1-2ph)^{-3/2} g1(eta)
    E[c (s2 r)^{s0}  A2/L]      = ph e^{-|psi|} (1-2ph)^{-5/2} [(1+ph) g1 - 3 ph g2]

with r = |x|^2/N0, ph = psi_hat*r, c = sgn(psi)^{s0} exp(2(eta+|psi|) A / L),
A = sum_l s^{(l)}, A2 = sum_l (s^{(l)})^2, s2 = sigma^2 = 1 + 2 eta/L.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProbabilityOverflow, SingularEmbedding
from .seeding import block_generators, jackknife_mean_se


def g1(eta):
    """(1/2)(1 + coth(eta) - 1/eta), smooth through eta = 0 (value 1/2)."""
    eta = float(eta)
    if abs(eta) < 1e-3:
        return 0.5 + eta / 6.0 - eta**3 / 90.0 + eta**5 / 945.0
    return 0.5 * (1.0 + 1.0 / np.tanh(eta) - 1.0 / eta)


def g2(eta):
    """(1/4)(coth(eta)/eta - csch(eta)^2), smooth through eta = 0 (value 1/6)."""
    eta = float(eta)
    if abs(eta) < 1e-2:
        return 1.0 / 6.0 - eta**2 / 45.0 + eta**4 / 315.0
    return 0.25 * (1.0 / (np.tanh(eta) * eta) - 1.0 / np.sinh(eta) ** 2)


def g3(eta, tau):
    """(e^{2 eta} - e^{2 eta tau}) / (e^{2 eta} - 1); equals 1-tau at eta = 0."""
    tau = np.asarray(tau, dtype=float)
    if eta == 0.0:
        return (1.0 - tau) if tau.ndim else float(1.0 - tau)
    val = 1.0 - np.expm1(2.0 * eta * tau) / np.expm1(2.0 * eta)
    return val if tau.ndim else float(val)


def g4(eta, tau):
    """g3*(1-g3); integrates to g2 over tau in [0,1].

    The layer-resolved weight of the squared self-loop count. (The product
    form is forced by the integral identities; see the quadrature tests.)
    """
    v = g3(eta, tau)
    return v * (1.0 - v)


def c_psi_eta(shape):
    """The nonlinear-correction constant 2 e^{-4 eta} psi_hat^2 (g1 - g2); >= 0."""
    return 2.0 * np.exp(-4.0 * shape.eta) * shape.psi_hat**2 * (g1(shape.eta) - g2(shape.eta))


def _mhat_formula(rho, shape):
    """Reweighting diagonal (|x|^2/N0)(1-2ph)^{-2}[(1+ph) g1 - 3 ph g2]."""
    ph = shape.psi_hat_mu(rho)
    return rho / (1.0 - 2.0 * ph) ** 2 * ((1.0 + ph) * g1(shape.eta) - 3.0 * ph * g2(shape.eta))


@dataclass
class SelfLoopStats:
    """Closed-form self-loop expectations for one dataset."""

    g1: float
    g2: float
    g3: callable
    g4: callable
    c_psi_eta: float
    t00: np.ndarray
    t11b: np.ndarray
    t20: np.ndarray
    t11a: callable          # tau -> P-vector
    Mhat_diag: np.ndarray
    mhat_test: float | None


def selfloop_expectations(hat, shape=None):
    """Evaluate the four closed forms and the Mhat/mhat reweightings per point."""
    if shape is None:
        shape = hat.shape
    rho = hat.rho
    ph = shape.psi_hat_mu(rho)
    if np.any(1.0 - 2.0 * ph <= 0.0):
        raise SingularEmbedding("1 - 2*psi_hat_mu <= 0 for some training point")
    e = np.exp(-abs(shape.psi))
    eta = shape.eta
    one = 1.0 - 2.0 * ph
    t00 = e * one**-0.5
    t11b = shape.psi_hat * e * one**-1.5 * g1(eta)
    t20 = ph * e * one**-2.5 * ((1.0 + ph) * g1(eta) - 3.0 * ph * g2(eta))

    def t11a(tau):
        return shape.psi_hat * e * one**-1.5 * g3(eta, tau)

    mhat_test = None if hat.rho_test is None else float(_mhat_formula(hat.rho_test, shape))
    return SelfLoopStats(
        g1=g1(eta), g2=g2(eta),
        g3=lambda tau: g3(eta, tau),
        g4=lambda tau: g4(eta, tau),
        c_psi_eta=c_psi_eta(shape),
        t00=t00, t11b=t11b, t20=t20, t11a=t11a,
        Mhat_diag=_mhat_formula(rho, shape),
        mhat_test=mhat_test,
    )


def _chain_block(psi, depth, size, rng, snapshot_layers):
    """Simulate the birth chain for a block of replicas; vectorized over replicas.

    Returns (s0, A, A2, snapshots) where A = sum_l s^(l), A2 = sum_l s^(l)^2,
    and snapshots[l] holds s^(l) for the requested layer indices.
    """
    ap = abs(psi)
    s = np.zeros(size, dtype=np.int64)
    acc = np.zeros(size)
    acc2 = np.zeros(size)
    snaps = {}
    for step in range(depth, 0, -1):   # current layer index
        if step in snapshot_layers:
            snaps[step] = s.copy()
        acc += s
        acc2 += s * s
        prob = ap / depth * (1 + 2 * s)
        if np.any(prob > 1.0):
            raise ProbabilityOverflow(
                f"self-loop probability {prob.max():.3f} > 1 at |psi| = {ap}, L = {depth}")
        s = s + (rng.random(size) < prob)
    return s, acc, acc2, snaps


def selfloop_mc(shape, norm_ratio, depth, n_samples, seed=0, taus=()):
    """Chain-MC estimates of the four Prop-4.1 integrands with jackknife SEs.

    ``taus`` selects layer fractions at which the layer-resolved expectation
    (the g3 integrand) is recorded; layer index round(tau*L) is used.
    Returns a dict with keys 't00', 't11b', 't20' mapping to (est, se) and
    't11a' mapping to {tau: (est, se)}.
    """
    sigma2 = 1.0 + 2.0 * shape.eta / depth
    z = sigma2 * norm_ratio
    cw = 2.0 * (shape.eta + abs(shape.psi)) / depth
    sign = -1.0 if shape.psi < 0 else 1.0
    layers = {max(1, min(depth, int(round(t * depth)))): t for t in taus}

    t00_chunks, t11b_chunks, t20_chunks = [], [], []
    t11a_chunks = {t: [] for t in taus}
    for start, stop, rng in block_generators(seed, n_samples):
        s0, acc, acc2, snaps = _chain_block(shape.psi, depth, stop - start, rng, layers)
        base = sign**s0 * np.exp(cw * acc)
        zs = z**s0
        # z^{s0-1} only matters where a loop exists (the weight vanishes otherwise)
        zs_m1 = np.where(s0 > 0, z ** (s0 - 1.0), 0.0)
        t00_chunks.append(base * zs)
        t11b_chunks.append(base * zs_m1 * acc / depth)
        t20_chunks.append(base * zs * acc2 / depth)
        for layer, t in layers.items():
            t11a_chunks[t].append(base * zs_m1 * snaps[layer])

    def reduce(chunks):
        est, se = jackknife_mean_se(np.concatenate(chunks))
        return float(est), float(se)

    out = {"t00": reduce(t00_chunks), "t11b": reduce(t11b_chunks), "t20": reduce(t20_chunks)}
    out["t11a"] = {t: reduce(v) for t, v in t11a_chunks.items()}
    return out


def selfloop_dp(shape, norm_ratio, depth, taus=(), s_max=200):
    """Exact finite-L expectations of the same four integrands (no sampling).

    Forward dynamic programming over the loop count; the linear accumulators
    A and A2 ride along as companion weight vectors. Complexity O(L * s_max)
    plus O(L^2 s_max) when layer snapshots are requested.
    """
    ap, eta, psi = abs(shape.psi), shape.eta, shape.psi
    sigma2 = 1.0 + 2.0 * eta / depth
    z = sigma2 * norm_ratio
    cw = 2.0 * (eta + ap) / depth
    sign = -1.0 if psi < 0 else 1.0
    smax = int(min(s_max, (depth / ap - 1) // 2 if ap > 0 else s_max))
    svals = np.arange(smax + 1)
    probs = ap / depth * (1 + 2 * svals)
    if probs[-1] > 1.0:
        raise ProbabilityOverflow("truncation level exceeds the valid probability range")
    record = np.exp(cw * svals)

    def step(vec):
        vec = vec * record
        out = vec * (1.0 - probs)
        out[1:] += vec[:-1] * probs[:-1]
        return out

    # update order per layer: record s into the accumulators, then transition
    w = np.zeros(smax + 1)
    w[0] = 1.0
    u = np.zeros(smax + 1)    # A/L companion
    u2 = np.zeros(smax + 1)   # A2/L companion
    snap_layers = {max(1, min(depth, int(round(t * depth)))): t for t in taus}
    snap_vecs = {}
    for layer in range(depth, 0, -1):
        if layer in snap_layers:
            snap_vecs[layer] = w * svals
        u = u + w * (svals / depth)
        u2 = u2 + w * (svals**2 / depth)
        w = step(w)
        u = step(u)
        u2 = step(u2)
        snap_vecs = {k: step(v) for k, v in snap_vecs.items()}

    zpow = (sign * z) ** svals
    zpow_m1 = np.zeros(smax + 1)
    zpow_m1[1:] = sign ** svals[1:] * z ** (svals[1:] - 1.0)
    out = {
        "t00": float(w @ zpow),
        "t11b": float(u @ zpow_m1),
        "t20": float(u2 @ zpow),
        "t11a": {snap_layers[l]: float(v @ zpow_m1) for l, v in snap_vecs.items()},
    }
    return out


def prior_laplace_firstorder(hat, stats, t, tau=0.0, depth=1, width=np.inf):
    """First-order closed form of E[exp(-(sigma^2/2N_L)|X^(L) t + x^(L) tau|^2)].

    Cubic contractions use pure cubes of hat vectors; the e^{-4 eta} and
    e^{-2 eta} prefactors carry the tensor-normalization conversion.
    """
    t = np.asarray(t, dtype=float)
    p = hat.n_points
    shape = hat.shape
    if tau != 0.0 and hat.xhat_test is None:
        raise ValueError("a sourced transform (tau != 0) needs a test point")
    if hat.xhat_test is not None:
        c = np.concatenate([t, [tau]])
        gtest = hat.g_test
        K = np.empty((p + 1, p + 1))
        K[:p, :p] = hat.G
        K[:p, p] = K[p, :p] = gtest
        K[p, p] = hat.xhat_test @ hat.xhat_test
        mh = np.concatenate([stats.Mhat_diag, [stats.mhat_test]])
    else:
        c = t
        K = hat.G
        mh = stats.Mhat_diag
    eps = depth / width
    w = K @ c
    v2 = float(c @ w)
    zeroth = np.exp(-0.5 * v2)
    if eps == 0.0:
        return float(zeroth)
    psi_hat, eta = shape.psi_hat, shape.eta
    gg = stats.g1 - stats.g2
    cube2 = float(c @ (K**3) @ c)
    mterm = float(w @ (mh * c))
    c4 = float(np.sum(c * w**3))
    cw = c * w
    exch = float(cw @ (K**2) @ cw)
    bracket = (
        -np.exp(-4.0 * eta) * psi_hat**2 * gg * cube2
        - 2.0 * psi_hat * mterm
        + 0.5 * np.exp(-2.0 * eta) * psi_hat * stats.g1 * c4
        + 0.25 * v2**2
        + np.exp(-4.0 * eta) * psi_hat**2 * gg * exch
    )
    return float(zeroth * (1.0 + eps * bracket))
