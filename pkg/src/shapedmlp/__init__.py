"""Bayesian evidence and predictive posterior of deep shaped MLPs,
perturbatively to first order in 1/width, with Monte-Carlo oracles for
every closed form."""

__version__ = "0.1.0"

from .errors import (ActivationOverflow, ConfigError, FiniteTimeBlowup,
                     IllConditioned, NonConvergence, OutsidePerturbativeRegime,
                     ProbabilityOverflow, RankDeficient, ShapedMLPError,
                     SingularEmbedding, Unreachable)
from .features import (HatDataset, ShapeParams, build_hat_dataset, embed,
                       kernel_ode_flow, unembed)
from .network import (NetworkConfig, NetworkParams, RawDataset, forward,
                      mc_prior_stats, sample_prior, shaped_activation)
from .graphproc import estimate_moment, run_chain
from .selfloops import (SelfLoopStats, g1, g2, g3, g4, prior_laplace_firstorder,
                        selfloop_dp, selfloop_expectations, selfloop_mc)
from .partition import (EvidenceReport, IntegralTable, PerturbationTooLarge,
                        PosteriorGeometry, PosteriorSummary, attach_test_point,
                        build_posterior_geometry, eval_integrals, log_evidence,
                        log_partition, posterior_cumulants, zero_temp_evidence,
                        zero_temp_posterior)
from .powerlaw import (PowerLawSpec, RegimeReport, appendix_scalings,
                       benign_overfit_report, generate_powerlaw,
                       regime_generalization_error, regime_log_evidence)
from .oracles import (OracleConfig, linear_exact_moments, posterior_mcmc_small,
                      wick_mc, wick_quadrature)
