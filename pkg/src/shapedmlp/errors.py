"""Exception types shared across the package."""


class ShapedMLPError(Exception):
    """Base class for all package errors."""


class SingularEmbedding(ShapedMLPError):
    """The feature map is undefined: 1 - 2*psi_hat*|x|^2/N0 <= 0."""


class Unreachable(ShapedMLPError):
    """A hat-space vector has no raw-space preimage (psi < 0 norm bound)."""


class RankDeficient(ShapedMLPError):
    """Embedded data matrix is numerically rank deficient."""


class FiniteTimeBlowup(ShapedMLPError):
    """Kernel flow diagonal denominator crossed zero before tau = 1."""


class ProbabilityOverflow(ShapedMLPError):
    """A Bernoulli parameter of the graph chain exceeded 1 (N too small)."""


class ActivationOverflow(ShapedMLPError):
    """|x|^2 overflowed during a forward pass (psi > 0, data too large)."""


class IllConditioned(ShapedMLPError):
    """Condition number of (I/beta + Xhat^T Xhat) exceeds 1e12."""


class NonConvergence(ShapedMLPError):
    """MCMC split-chain diagnostic exceeded its threshold."""


class OutsidePerturbativeRegime(ShapedMLPError):
    """Parameter combination excluded by the regime corollaries."""


class ConfigError(ShapedMLPError):
    """Invalid experiment configuration."""
