"""Ground-truth values for degenerate flows and fine-step reference runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import DiffusivityReport, effective_diffusivity
from .ensemble import SimulationConfig, run_ensemble
from .errors import DomainError
from .rng import derive_seed


@dataclass(frozen=True)
class ShearFlowSpec:
    a: float
    k: float
    d0: float

    def __post_init__(self):
        if not self.k > 0:
            raise DomainError("wavenumber k must be positive")
        if not self.d0 > 0:
            raise DomainError("D0 must be positive")


def shear_effective_diffusivity(spec: ShearFlowSpec) -> float:
    """D11 for v = (a sin(k x2), 0): the corrector is a sin(k x2) / (D0 k^2)."""
    return spec.d0 + spec.a**2 / (2.0 * spec.d0 * spec.k**2)


def zero_flow_diffusivity(d0: float, dim: int = 2) -> np.ndarray:
    if d0 < 0:
        raise DomainError("D0 must be >= 0")
    return d0 * np.eye(dim)


def reference_run(
    config: SimulationConfig, refinement: int = 8, n_particles: int | None = None, workers: int = 1
) -> DiffusivityReport:
    """Same pipeline at dt / refinement, with an independent seed; tagged as reference."""
    if refinement < 8:
        raise DomainError("reference runs need a refinement of at least 8")
    n = max(n_particles or config.n_particles, config.n_particles)
    cfg = config.with_(
        dt=config.dt / refinement,
        n_particles=n,
        master_seed=derive_seed(config.master_seed, 0xFFFFFFFF),
    )
    rep = effective_diffusivity(run_ensemble(cfg, workers=workers))
    return DiffusivityReport(rep.times, rep.D, rep.se, rep.n, cfg.fingerprint(), reference=True)
