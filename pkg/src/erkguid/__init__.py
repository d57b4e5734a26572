"""Stiffness-aware guidance for probability-flow ODE samplers on analytic score fields."""

from .core import (
    CapabilityError,
    ConfigurationError,
    ERKPair,
    GuidanceConfig,
    RunManifest,
    Scaling,
    Schedule,
    StepTrace,
    StiffnessEstimate,
    build_edm_schedule,
)
from .estimators import eigenvector_estimate, power_iteration_dominant, stiffness_estimate
from .fields import GaussianMixture, GuidedField, LinearField, build_tree_gmm, single_gaussian
from .guidance import ERKProjConfig, alpha, erk_guid_correction, gamma_form_correction, phi
from .sampler import sample_batch, sample_trajectory

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigurationError",
    "ERKPair",
    "GuidanceConfig",
    "RunManifest",
    "Scaling",
    "Schedule",
    "StepTrace",
    "StiffnessEstimate",
    "build_edm_schedule",
    "eigenvector_estimate",
    "power_iteration_dominant",
    "stiffness_estimate",
    "GaussianMixture",
    "GuidedField",
    "LinearField",
    "build_tree_gmm",
    "single_gaussian",
    "ERKProjConfig",
    "alpha",
    "erk_guid_correction",
    "gamma_form_correction",
    "phi",
    "sample_batch",
    "sample_trajectory",
    "__version__",
]
