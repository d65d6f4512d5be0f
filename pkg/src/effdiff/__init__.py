"""Monte Carlo estimation of effective diffusivity for passive tracers in
time-dependent, divergence-free flows, using volume-preserving splitting
integrators."""

from __future__ import annotations

__version__ = "0.1.0"

from .analysis import (
    DiffusivityReport,
    SlopeFit,
    convergence_study,
    detect_plateau,
    effective_diffusivity,
    fit_loglog,
    sweep,
)
from .ensemble import (
    EnsembleStatistics,
    InitialDistribution,
    SimulationConfig,
    make_config,
    run_ensemble,
    run_particle,
)
from .errors import CatalogError, ConfigError, DomainError, EffdiffError, IntegrationError
from .flows import CATALOG, FlowField, check_structure, make_flow, velocity
from .integrators import (
    DiffusionSpec,
    ParticleState,
    step_2d_splitting,
    step_euler_maruyama,
    step_nd_volume_preserving,
)
from .oracles import ShearFlowSpec, reference_run, shear_effective_diffusivity, zero_flow_diffusivity
from .rng import derive_particle_rng

__all__ = [
    "CATALOG",
    "CatalogError",
    "ConfigError",
    "DiffusionSpec",
    "DiffusivityReport",
    "DomainError",
    "EffdiffError",
    "EnsembleStatistics",
    "FlowField",
    "InitialDistribution",
    "IntegrationError",
    "ParticleState",
    "ShearFlowSpec",
    "SimulationConfig",
    "SlopeFit",
    "check_structure",
    "convergence_study",
    "derive_particle_rng",
    "detect_plateau",
    "effective_diffusivity",
    "fit_loglog",
    "make_config",
    "make_flow",
    "reference_run",
    "run_ensemble",
    "run_particle",
    "shear_effective_diffusivity",
    "step_2d_splitting",
    "step_euler_maruyama",
    "step_nd_volume_preserving",
    "sweep",
    "velocity",
    "zero_flow_diffusivity",
]
