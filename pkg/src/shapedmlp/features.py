"""The psi-dependent feature map, hat-space datasets, and the kernel flow.

A raw input x in R^{N0} is embedded as

    xhat = e^eta * (1 - 2*psi_hat*|x|^2/N0)^{-1/2} * x / sqrt(N0),

with psi_hat = psi*(e^{2 eta} - 1)/(2 eta). All leading-order Bayesian
quantities are kernel computations in the hat variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FiniteTimeBlowup, RankDeficient, SingularEmbedding, Unreachable


def _expm1_ratio(x):
    """(e^x - 1)/x with the removable singularity at 0 handled by series."""
    x = float(x)
    if abs(x) < 2e-4:
        # 4-term Taylor expansion; error < x^4/120
        return 1.0 + x / 2.0 + x**2 / 6.0 + x**3 / 24.0
    return np.expm1(x) / x


@dataclass(frozen=True)
class ShapeParams:
    """Nonlinearity strength psi and weight-variance parameter eta."""

    psi: float = 0.0
    eta: float = 0.0

    @property
    def psi_hat(self):
        """psi * (e^{2 eta} - 1) / (2 eta); equals psi at eta = 0."""
        return self.psi * _expm1_ratio(2.0 * self.eta)

    def psi_hat_mu(self, norm_ratio):
        """Per-point psi_hat_mu = psi_hat * |x|^2 / N0."""
        return self.psi_hat * np.asarray(norm_ratio, dtype=float)


def embed(x, shape, check=True):
    """Feature-map one input vector (or the columns of a matrix).

    Raises SingularEmbedding when 1 - 2*psi_hat*|x|^2/N0 <= 0 (possible only
    for psi_hat > 0).
    """
    x = np.asarray(x, dtype=float)
    n0 = x.shape[0]
    ratio = np.sum(x * x, axis=0) / n0
    denom = 1.0 - 2.0 * shape.psi_hat_mu(ratio)
    if check and np.any(denom <= 0.0):
        raise SingularEmbedding(
            f"1 - 2*psi_hat*|x|^2/N0 = {np.min(denom):.3g} <= 0; data too large for psi = {shape.psi}")
    return np.exp(shape.eta) / np.sqrt(denom * n0) * x


def unembed(xhat, shape):
    """Invert the feature map (columns of a matrix allowed).

    The radial equation |xhat|^2 = e^{2 eta} rho / (1 - 2 psi_hat rho) with
    rho = |x|^2/N0 solves in closed form: always feasible for psi_hat >= 0,
    and for psi_hat < 0 only when |xhat|^2 < e^{2 eta}/(2 |psi_hat|).
    """
    xhat = np.asarray(xhat, dtype=float)
    n0 = xhat.shape[0]
    r2 = np.sum(xhat * xhat, axis=0)
    scale2 = np.exp(2.0 * shape.eta) + 2.0 * shape.psi_hat * r2
    if np.any(scale2 <= 0.0):
        raise Unreachable(
            f"|xhat|^2 exceeds e^(2 eta)/(2|psi_hat|) for psi = {shape.psi} < 0")
    return np.sqrt(n0) / np.sqrt(scale2) * xhat


def hat_norm_to_raw_ratio(hat_norm2, shape):
    """|x|^2/N0 of the preimage of a hat vector with squared norm ``hat_norm2``."""
    scale2 = np.exp(2.0 * shape.eta) + 2.0 * shape.psi_hat * np.asarray(hat_norm2, dtype=float)
    if np.any(scale2 <= 0.0):
        raise Unreachable("hat norm outside the reachable set for psi < 0")
    return hat_norm2 / scale2


@dataclass(frozen=True)
class SvdTriple:
    """Singular decomposition Xhat/sqrt(P) = sum_j sqrt(lam_j) u_j v_j^T."""

    lam: np.ndarray   # descending, length P
    U: np.ndarray     # N0 x P
    V: np.ndarray     # P x P


class HatDataset:
    """Feature-mapped dataset with the caches every downstream formula needs.

    Attributes
    ----------
    Xhat : (N0, P) hat-space inputs, theta_hat the minimal-norm interpolant
        with Xhat^T theta_hat = Y, G/G2/G3 the Gram matrix and its Hadamard
        square/cube, svd of Xhat/sqrt(P), rho the raw norm ratios |x|^2/N0.
    """

    def __init__(self, Xhat, Y, shape, rho=None, xhat_test=None, rho_test=None,
                 rank_tol=1e-10):
        Xhat = np.asarray(Xhat, dtype=float)
        Y = np.asarray(Y, dtype=float)
        n0, p = Xhat.shape
        if p >= n0:
            raise RankDeficient(f"need P < N0, got P={p}, N0={n0}")
        self.Xhat = Xhat
        self.Y = Y
        self.shape = shape
        self.G = Xhat.T @ Xhat
        self.G2 = self.G**2
        self.G3 = self.G**3
        sv_u, sv_s, sv_vt = np.linalg.svd(Xhat / np.sqrt(p), full_matrices=False)
        if sv_s[-1] < rank_tol * sv_s[0]:
            raise RankDeficient(
                f"singular value ratio {sv_s[-1] / sv_s[0]:.3g} below {rank_tol:.0e}")
        self.svd = SvdTriple(lam=sv_s**2, U=sv_u, V=sv_vt.T)
        # theta_hat = Xhat (Xhat^T Xhat)^{-1} Y through the SVD for stability
        coef = (sv_vt @ Y) / sv_s / np.sqrt(p)
        self.theta_hat = sv_u @ coef
        if rho is None:
            rho = hat_norm_to_raw_ratio(np.diag(self.G).copy(), shape)
        self.rho = np.asarray(rho, dtype=float)
        self.xhat_test = None if xhat_test is None else np.asarray(xhat_test, dtype=float)
        if self.xhat_test is not None and rho_test is None:
            rho_test = float(hat_norm_to_raw_ratio(self.xhat_test @ self.xhat_test, shape))
        self.rho_test = rho_test

    @property
    def n0(self):
        return self.Xhat.shape[0]

    @property
    def n_points(self):
        return self.Xhat.shape[1]

    @property
    def g_test(self):
        """Inner products <xhat_mu, xhat> of the test point with training points."""
        if self.xhat_test is None:
            raise ValueError("dataset carries no test point")
        return self.Xhat.T @ self.xhat_test

    # -- covariance Sigma = Xhat Xhat^T / P, exposed through its actions --

    def trace_sigma(self):
        return float(np.trace(self.G)) / self.n_points

    def trace_sigma2(self):
        return float(np.sum(self.G2)) / self.n_points**2

    def sigma_quad_form(self, v):
        """v^T Sigma v for a hat-space vector v."""
        w = self.Xhat.T @ np.asarray(v, dtype=float)
        return float(w @ w) / self.n_points

    def with_test_point(self, xhat_test):
        """A shallow copy carrying ``xhat_test`` (caches shared)."""
        other = object.__new__(HatDataset)
        other.__dict__.update(self.__dict__)
        other.xhat_test = np.asarray(xhat_test, dtype=float)
        other.rho_test = float(hat_norm_to_raw_ratio(other.xhat_test @ other.xhat_test, self.shape))
        return other

    # -- serialization ---------------------------------------------------

    def to_json(self):
        """Self-describing JSON container (row-major matrices, dims in header)."""
        doc = {
            "schema_version": 1,
            "kind": "hat_dataset",
            "shape": {"psi": self.shape.psi, "eta": self.shape.eta},
            "dims": {"n0": self.n0, "p": self.n_points},
            "Xhat": self.Xhat.ravel(order="C").tolist(),
            "Y": self.Y.tolist(),
            "rho": self.rho.tolist(),
        }
        if self.xhat_test is not None:
            doc["xhat_test"] = self.xhat_test.tolist()
            doc["rho_test"] = self.rho_test
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("kind") != "hat_dataset":
            raise ValueError("not a hat_dataset container")
        n0, p = doc["dims"]["n0"], doc["dims"]["p"]
        shape = ShapeParams(**doc["shape"])
        xhat_test = np.array(doc["xhat_test"]) if "xhat_test" in doc else None
        return cls(
            np.array(doc["Xhat"]).reshape(n0, p),
            np.array(doc["Y"]),
            shape,
            rho=np.array(doc["rho"]),
            xhat_test=xhat_test,
            rho_test=doc.get("rho_test"),
        )


def build_hat_dataset(raw, shape):
    """Embed a RawDataset and assemble all caches."""
    xhat = embed(raw.X, shape)
    rho = np.sum(raw.X * raw.X, axis=0) / raw.n0
    xhat_test = rho_test = None
    if raw.x_test is not None:
        xhat_test = embed(raw.x_test, shape)
        rho_test = float(raw.x_test @ raw.x_test) / raw.n0
    return HatDataset(xhat, raw.Y, shape, rho=rho, xhat_test=xhat_test, rho_test=rho_test)


def kernel_ode_flow(K0, psi, mode="closed_form", n_steps=None, tau=1.0):
    """Flow the NNGP kernel recursion to depth fraction ``tau``.

    ``closed_form`` evaluates K_{mu nu}^{(tau)} =
    (1-2 psi tau K_mm)^{-1/2} (1-2 psi tau K_nn)^{-1/2} K_{mu nu};
    ``discrete`` iterates K <- K * (1 + (psi/L)(K_mm + K_nn)) for
    ``n_steps`` layers. Raises FiniteTimeBlowup when a diagonal
    denominator crosses zero (psi > 0, kernel too large).
    """
    K0 = np.asarray(K0, dtype=float)
    if mode == "closed_form":
        denom = 1.0 - 2.0 * psi * tau * np.diag(K0)
        if np.any(denom <= 0.0):
            raise FiniteTimeBlowup(
                f"diagonal denominator reaches {np.min(denom):.3g} at tau = {tau}")
        scale = 1.0 / np.sqrt(denom)
        return scale[:, None] * K0 * scale[None, :]
    if mode == "discrete":
        if not n_steps or n_steps < 1:
            raise ValueError("discrete mode needs n_steps >= 1")
        steps = int(round(n_steps * tau))
        K = K0.copy()
        for _ in range(steps):
            d = np.diag(K)
            K = K * (1.0 + (psi / n_steps) * (d[:, None] + d[None, :]))
            if not np.all(np.isfinite(K)):
                raise FiniteTimeBlowup("discrete kernel recursion overflowed")
        return K
    raise ValueError(f"unknown mode {mode!r}")
