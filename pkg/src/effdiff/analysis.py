"""Effective-diffusivity estimates and the experiment recipes built on them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ensemble import EnsembleStatistics, SimulationConfig, run_ensemble
from .errors import DomainError
from .flows import make_flow
from .integrators import DiffusionSpec
from .rng import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusivityReport:
    times: np.ndarray  # (K,)
    D: np.ndarray  # (K, d, d)
    se: np.ndarray  # (K, d, d), batch-means standard error
    n: int
    fingerprint: str = ""
    reference: bool = False

    @property
    def dim(self) -> int:
        return self.D.shape[-1]

    def final(self, i: int = 0, j: int = 0) -> tuple[float, float]:
        return float(self.D[-1, i, j]), float(self.se[-1, i, j])


def effective_diffusivity(stats: EnsembleStatistics) -> DiffusivityReport:
    """D_ij(t_k) = E[dx_i dx_j] / (2 t_k) with standard errors from batch means."""
    keep = stats.times > 0
    t = stats.times[keep]
    n, _, raw = stats.totals()
    D = raw[keep] / (2.0 * t[:, None, None])
    batches = stats.batch_second_moments()[:, keep] / (2.0 * t[None, :, None, None])
    full = stats.count > 0
    nb = int(full.sum())
    if nb >= 2:
        se = np.std(batches[full], axis=0, ddof=1) / math.sqrt(nb)
    else:
        se = np.full_like(D, np.nan)
    return DiffusivityReport(t, D, se, n, stats.fingerprint)


@dataclass(frozen=True)
class SlopeFit:
    u: np.ndarray
    w: np.ndarray
    slope: float
    intercept: float
    residual_norm: float
    r2: float

    def predict(self, u) -> np.ndarray:
        return np.exp(self.intercept) * np.asarray(u, dtype=np.float64) ** self.slope


def fit_loglog(points) -> SlopeFit:
    """Least-squares line through (log u, log w)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError("points must be a sequence of (u, w) pairs")
    u, w = pts[:, 0], pts[:, 1]
    if np.any(~(u > 0)) or np.any(~(w > 0)):
        raise DomainError("log-log fit needs strictly positive points")
    if len(np.unique(u)) < 2:
        raise DomainError("log-log fit needs at least two distinct abscissae")
    lu, lw = np.log(u), np.log(w)
    A = np.column_stack([lu, np.ones_like(lu)])
    (slope, intercept), *_ = np.linalg.lstsq(A, lw, rcond=None)
    resid = lw - (slope * lu + intercept)
    ss_tot = float(np.sum((lw - lw.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(u, w, float(slope), float(intercept), float(np.linalg.norm(resid)), r2)


@dataclass(frozen=True)
class PlateauDetection:
    window: int
    rho: float
    t_mix: float | None

    @property
    def mixed(self) -> bool:
        return self.t_mix is not None


def detect_plateau(report: DiffusivityReport, W: int = 8, rho: float = 0.05, i: int = 0, j: int = 0) -> PlateauDetection:
    """Earliest sample time after which every W-sample window of D_ij varies by < rho (relative)."""
    d = report.D[:, i, j]
    K = len(d)
    if W < 2 or K < W:
        raise DomainError(f"need at least W={W} sample times, have {K}")
    ok = np.empty(K - W + 1, dtype=bool)
    for s in range(K - W + 1):
        win = d[s : s + W]
        scale = abs(win.mean())
        if not np.all(np.isfinite(win)):
            ok[s] = False
        elif np.all(win == 0):
            ok[s] = True
        else:
            ok[s] = scale > 0 and (win.max() - win.min()) / scale < rho
    # first s with ok[s:] all true
    bad = np.flatnonzero(~ok)
    first = 0 if bad.size == 0 else bad[-1] + 1
    if first > K - W:
        return PlateauDetection(W, rho, None)
    return PlateauDetection(W, rho, float(report.times[first]))


# -- experiment recipes ------------------------------------------------------


Runner = Callable[[SimulationConfig], EnsembleStatistics]


def _default_runner(workers: int = 1) -> Runner:
    return lambda cfg: run_ensemble(cfg, workers=workers)


@dataclass(frozen=True)
class ConvergenceRow:
    dt: float
    D11: float
    se: float
    error: float
    noise_dominated: bool
    seed: int


@dataclass(frozen=True)
class ConvergenceResult:
    rows: list[ConvergenceRow]
    reference_value: float
    reference_se: float
    reference_dt: float | None
    fit: SlopeFit | None

    @property
    def slope(self) -> float | None:
        return None if self.fit is None else self.fit.slope

    @property
    def noise_dominated(self) -> bool:
        return self.fit is None


def convergence_study(
    base: SimulationConfig,
    dt_list: Sequence[float],
    ref_dt: float | None = None,
    ref_value: tuple[float, float] | float | None = None,
    ref_particles: int | None = None,
    runner: Runner | None = None,
) -> ConvergenceResult:
    """Error |D11(dt) - D11(ref)| at the final time for each dt, and the fitted order.

    Each dt level runs with its own seed ``derive_seed(base.master_seed, m)``;
    the self-run reference uses index ``len(dt_list)``. A level is excluded from
    the fit when ``|err| < 2 (SE + SE_ref)``.
    """
    runner = runner or _default_runner()
    dts = [float(v) for v in dt_list]
    if any(a <= b for a, b in zip(dts, dts[1:])):
        raise DomainError("dt_list must be strictly descending")
    if (ref_dt is None) == (ref_value is None):
        raise DomainError("give exactly one of ref_dt or ref_value")
    if ref_dt is not None:
        if ref_dt * 8 > min(dts) * (1 + 1e-12):
            raise DomainError("reference dt must be at least 8x smaller than the finest dt")
        ref_cfg = base.with_(dt=float(ref_dt), master_seed=derive_seed(base.master_seed, len(dts)),
                             n_particles=ref_particles or base.n_particles)
        ref_rep = effective_diffusivity(runner(ref_cfg))
        ref_D, ref_se = ref_rep.final()
    elif isinstance(ref_value, tuple):
        ref_D, ref_se = float(ref_value[0]), float(ref_value[1])
    else:
        ref_D, ref_se = float(ref_value), 0.0

    rows = []
    for m, dt in enumerate(dts):
        seed = derive_seed(base.master_seed, m)
        rep = effective_diffusivity(runner(base.with_(dt=dt, master_seed=seed)))
        D, se = rep.final()
        err = abs(D - ref_D)
        noisy = err < 2.0 * (se + ref_se)
        rows.append(ConvergenceRow(dt, D, se, err, bool(noisy), seed))
        log.info("dt=%g D11=%.6g +- %.2g err=%.3g%s", dt, D, se, err, " (noise-dominated)" if noisy else "")
    good = [(r.dt, r.error) for r in rows if not r.noise_dominated]
    fit = fit_loglog(good) if len({u for u, _ in good}) >= 2 else None
    return ConvergenceResult(rows, ref_D, ref_se, ref_dt, fit)


SWEEP_PARAMS = ("d0", "eps", "omega")


def with_parameter(cfg: SimulationConfig, parameter: str, value: float) -> SimulationConfig:
    if parameter == "d0":
        if value <= 0:
            raise DomainError("D0 values must be positive")
        return cfg.with_(diffusion=DiffusionSpec.from_d0(value))
    if parameter in ("eps", "omega"):
        if parameter not in cfg.flow.params:
            raise DomainError(f"flow {cfg.flow.name} has no parameter {parameter!r}")
        params = dict(cfg.flow.params)
        params[parameter] = float(value)
        return cfg.with_(flow=make_flow(cfg.flow.name, **params))
    raise DomainError(f"sweep parameter must be one of {SWEEP_PARAMS}")


@dataclass(frozen=True)
class SweepRow:
    value: float
    D11: float
    se: float
    T: float
    t_mix: float | None
    seed: int

    @property
    def mixed(self) -> bool:
        return self.t_mix is not None


@dataclass(frozen=True)
class SweepResult:
    parameter: str
    rows: list[SweepRow]
    fit: SlopeFit | None
    reports: list[DiffusivityReport] = field(default_factory=list, repr=False, compare=False)


def sweep(
    base: SimulationConfig,
    parameter: str,
    values: Sequence[float],
    T_max: float | None = None,
    W: int = 8,
    rho: float = 0.05,
    runner: Runner | None = None,
    fit: bool | None = None,
) -> SweepResult:
    """One ensemble per parameter value, seeds ``derive_seed(base.master_seed, m)``.

    With ``T_max`` the horizon is doubled from ``base.T`` until the plateau
    detector reports mixing or ``T_max`` is reached; runs that never mix are
    kept but flagged (``t_mix is None``).
    """
    runner = runner or _default_runner()
    if parameter not in SWEEP_PARAMS:
        raise DomainError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    rows, reports = [], []
    for m, v in enumerate(values):
        seed = derive_seed(base.master_seed, m)
        cfg = with_parameter(base, parameter, float(v)).with_(master_seed=seed)
        while True:
            rep = effective_diffusivity(runner(cfg))
            pl = detect_plateau(rep, W, rho)
            if pl.mixed or T_max is None or cfg.T * 2 > T_max:
                break
            log.info("%s=%g not mixed by T=%g, doubling", parameter, v, cfg.T)
            cfg = cfg.with_(T=cfg.T * 2)
        D, se = rep.final()
        rows.append(SweepRow(float(v), D, se, cfg.T, pl.t_mix, seed))
        reports.append(rep)
        log.info("%s=%g D11=%.6g +- %.2g T=%g%s", parameter, v, D, se, cfg.T, "" if pl.mixed else " (not mixed)")
    do_fit = parameter == "d0" if fit is None else fit
    sf = None
    if do_fit and len(rows) >= 2:
        sf = fit_loglog([(r.value, r.D11) for r in rows])
    return SweepResult(parameter, rows, sf, reports)
