"""Finite-size shaped MLPs and Monte-Carlo estimates of their prior statistics.

The network is

    f(x; theta) = W^{(L+1)} x^{(L)} / sqrt(N_L),
    x^{(l)} = phi(W^{(l)} x^{(l-1)} / sqrt(N_{l-1})),   phi(t) = t + psi t^3 / (3L),

with iid centered Gaussian weights of variance sigma^2 = 1 + 2*eta/L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ActivationOverflow, ShapedMLPError
from .seeding import block_generators, jackknife_mean_se


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and prior hyperparameters of a shaped MLP.

    ``eta_convention`` selects the weight-variance scaling: ``"2eta"`` gives
    sigma^2 = 1 + 2*eta/L (the convention all closed forms assume),
    ``"1eta"`` gives sigma^2 = 1 + eta/L.
    """

    n0: int
    widths: tuple
    psi: float = 0.0
    eta: float = 0.0
    seed: int = 0
    eta_convention: str = "2eta"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.n0 < 1 or self.depth < 1 or min(self.widths) < 1:
            raise ShapedMLPError("need n0 >= 1 and at least one hidden layer of width >= 1")
        if self.eta_convention not in ("2eta", "1eta"):
            raise ShapedMLPError("eta_convention must be '2eta' or '1eta'")
        if self.sigma2 <= 0.0:
            raise ShapedMLPError(f"weight variance sigma^2 = {self.sigma2} must be positive")

    @property
    def depth(self):
        return len(self.widths)

    @property
    def sigma2(self):
        scale = 2.0 if self.eta_convention == "2eta" else 1.0
        return 1.0 + scale * self.eta / self.depth

    @classmethod
    def equal_widths(cls, n0, width, depth, psi=0.0, eta=0.0, seed=0):
        return cls(n0=n0, widths=(width,) * depth, psi=psi, eta=eta, seed=seed)


@dataclass
class NetworkParams:
    """Weight matrices W^{(1)}..W^{(L+1)}; shapes chain from n0 through widths to 1."""

    weights: list

    def __post_init__(self):
        prev = self.weights[0].shape[1]
        for w in self.weights:
            if w.shape[1] != prev:
                raise ShapedMLPError("weight shapes are not chain compatible")
            prev = w.shape[0]
        if self.weights[-1].shape[0] != 1:
            raise ShapedMLPError("readout layer must have a single row")


@dataclass
class RawDataset:
    """Training inputs (columns of X), labels Y, optional test input."""

    X: np.ndarray
    Y: np.ndarray
    x_test: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        n0, p = self.X.shape
        if p >= n0:
            raise ShapedMLPError(f"need P < N0, got P={p}, N0={n0}")
        if self.Y.shape != (p,):
            raise ShapedMLPError("label vector length must match the number of inputs")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ShapedMLPError("inputs and labels must be finite")
        if np.linalg.matrix_rank(self.X) < p:
            raise ShapedMLPError("input matrix must have full column rank")
        if self.x_test is not None:
            self.x_test = np.asarray(self.x_test, dtype=float)

    @property
    def n0(self):
        return self.X.shape[0]

    @property
    def n_points(self):
        return self.X.shape[1]


def shaped_activation(t, psi, depth):
    """phi(t) = t + psi*t^3/(3L), elementwise."""
    t = np.asarray(t, dtype=float)
    return t + (psi / (3.0 * depth)) * (t * t * t)


def sample_prior(config, rng):
    """Draw network weights from the iid Gaussian prior N(0, sigma^2)."""
    sigma = np.sqrt(config.sigma2)
    shapes = []
    prev = config.n0
    for w in config.widths:
        shapes.append((w, prev))
        prev = w
    shapes.append((1, prev))
    return NetworkParams([sigma * rng.standard_normal(s) for s in shapes])


def forward(params, x, psi, depth=None):
    """Forward pass; returns (scalar output, list of post-activations).

    ``hidden[0]`` is the input itself; ``hidden[l]`` is x^{(l)}.
    """
    if depth is None:
        depth = len(params.weights) - 1
    h = np.asarray(x, dtype=float)
    hidden = [h]
    for w in params.weights[:-1]:
        pre = w @ h / np.sqrt(h.shape[0])
        h = shaped_activation(pre, psi, depth)
        hidden.append(h)
    out = float((params.weights[-1] @ h)[0]) / np.sqrt(h.shape[0])
    if not np.isfinite(out) or not np.all(np.isfinite(h)):
        raise ActivationOverflow("forward pass overflowed; shaped regime requires bounded |x|^2/N0")
    return out, hidden


@dataclass
class PriorStats:
    """MC estimates of prior moments and the Laplace transform, with jackknife SEs."""

    moments: dict            # q -> (estimate, se) of E[(|X^L t|^2/N_L)^q]
    laplace: tuple           # (estimate, se) of E[exp(-sigma^2 |X^L t + x^L tau|^2 / (2 N_L))]
    overlaps: dict = field(default_factory=dict)   # (mu, nu) -> (estimate, se) of E[<x_mu^L, x_nu^L>/N_L]
    overlap_products: dict = field(default_factory=dict)  # ((m1,n1),(m2,n2)) -> (est, se)
    n_samples: int = 0
    n_overflow: int = 0    # replicas excluded after cubic blowup


def _propagate_block(config, feats, rng, collect_final=True):
    """Sample final-layer states for a block of replicas by covariance propagation.

    Rows of W X / sqrt(N_prev) are iid N(0, sigma^2 X^T X / N_prev) given the
    current layer states, so each layer draws only width x n_feats correlated
    normals per replica instead of a full weight matrix. Exact in distribution
    and deterministic given the block generator.

    Replicas whose normalized layer covariance leaves the physical range
    (entries beyond 1e6; bounded trajectories stay O(10)) are marked as
    escaped: for psi > 0 the cubic map blows such paths up within a couple of
    layers, so the cut only removes genuinely divergent trajectories.
    """
    b = feats.shape[0]
    n_feats = feats.shape[2]
    depth = config.depth
    sigma2 = config.sigma2
    cur = np.ascontiguousarray(feats)
    bad = np.zeros(b, dtype=bool)
    eye = np.eye(n_feats)
    with np.errstate(over="ignore", invalid="ignore"):
        for width in config.widths:
            prev = cur.shape[1]
            cov = sigma2 / prev * (np.swapaxes(cur, 1, 2) @ cur)
            with np.errstate(invalid="ignore"):
                blown = ~(np.abs(cov) < 1e6).all(axis=(1, 2))
            if np.any(blown):
                # runaway cubic trajectory (psi > 0): mark and neutralize
                bad |= blown
                cov[bad] = eye
            # tiny jitter keeps Cholesky alive when columns become collinear
            jit = 1e-14 * np.trace(cov, axis1=1, axis2=2).reshape(b, 1)
            cov[:, np.arange(n_feats), np.arange(n_feats)] += jit
            chol = np.linalg.cholesky(cov)
            z = rng.standard_normal((b, width, n_feats))
            pre = z @ np.swapaxes(chol, 1, 2)
            cur = shaped_activation(pre, config.psi, depth)
        bad |= ~((cur * cur).mean(axis=1) < 1e7).all(axis=1)
    return cur, bad


def mc_prior_stats(config, X, t, tau=0.0, x_test=None, q_max=2, n_samples=1000,
                   seed=None, index_pairs=(), pair_products=()):
    """Monte-Carlo prior statistics of the final hidden layer.

    Estimates the moments M_q = E[(|X^{(L)} t|^2 / N_L)^q] for q = 1..q_max,
    the Laplace transform E[exp(-sigma^2 |X^{(L)} t + x^{(L)} tau|^2 / (2 N_L))]
    (sourced when ``x_test`` is given), and, optionally, raw overlap moments
    E[prod_p <x_{mu_p}^{(L)}, x_{nu_p}^{(L)}>/N_L] for the requested index pairs.

    Errors are jackknife standard errors over replica blocks. Replicas whose
    cubic trajectory overflows (possible for psi > 0 near the regime bound
    |x|^2/N0 < 1/(2 psi_hat)) are excluded and counted in ``n_overflow``;
    more than 1% of them raises ActivationOverflow.
    """
    if n_samples < 100:
        raise ShapedMLPError("need n_samples >= 100")
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    n0, p = X.shape
    feats = X if x_test is None else np.hstack([X, np.asarray(x_test, float).reshape(n0, 1)])
    if seed is None:
        seed = config.seed
    n_l = config.widths[-1]
    sigma2 = config.sigma2

    mq = {q: [] for q in range(1, q_max + 1)}
    lap = []
    ov = {pair: [] for pair in index_pairs}
    ovp = {prod: [] for prod in pair_products}
    n_overflow = 0
    for start, stop, rng in block_generators(seed, n_samples):
        base = np.broadcast_to(feats, (stop - start,) + feats.shape)
        final, bad = _propagate_block(config, base, rng)
        if np.any(bad):
            n_overflow += int(bad.sum())
            final = final[~bad]
        gram = np.swapaxes(final, 1, 2) @ final / n_l
        s_tt = np.einsum("j,bjk,k->b", t, gram[:, :p, :p], t)
        for q in range(1, q_max + 1):
            mq[q].append(s_tt**q)
        if x_test is None or tau == 0.0:
            arg = s_tt
        else:
            s_tx = np.einsum("j,bj->b", t, gram[:, :p, p])
            arg = s_tt + 2.0 * tau * s_tx + tau**2 * gram[:, p, p]
        lap.append(np.exp(-0.5 * sigma2 * arg))
        for (mu, nu) in index_pairs:
            ov[(mu, nu)].append(gram[:, mu, nu])
        for prod in pair_products:
            vals = np.ones(gram.shape[0])
            for (mu, nu) in prod:
                vals = vals * gram[:, mu, nu]
            ovp[prod].append(vals)
    if n_overflow > 0.01 * n_samples:
        raise ActivationOverflow(
            f"{n_overflow}/{n_samples} replicas overflowed; data outside the shaped regime")

    def reduce(chunks):
        est, se = jackknife_mean_se(np.concatenate(chunks))
        return float(est), float(se)

    return PriorStats(
        moments={q: reduce(v) for q, v in mq.items()},
        laplace=reduce(lap),
        overlaps={k: reduce(v) for k, v in ov.items()},
        overlap_products={k: reduce(v) for k, v in ovp.items()},
        n_samples=n_samples,
        n_overflow=n_overflow,
    )


def mc_predictive_mean(config, x, n_samples=1000, seed=None):
    """MC estimate (and SE) of the prior predictive mean E[f(x; theta)].

    Conditional on x^{(L)}, the output is N(0, sigma^2 |x^{(L)}|^2 / N_L); a
    standard normal per replica realizes it.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    if seed is None:
        seed = config.seed
    vals = []
    for start, stop, rng in block_generators(seed, n_samples):
        base = np.broadcast_to(x, (stop - start,) + x.shape)
        final, bad = _propagate_block(config, base, rng)
        var = config.sigma2 * np.einsum("bij,bij->b", final[~bad], final[~bad]) / config.widths[-1]
        vals.append(np.sqrt(var) * rng.standard_normal(int((~bad).sum())))
    est, se = jackknife_mean_se(np.concatenate(vals))
    return float(est), float(se)
