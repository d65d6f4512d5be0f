"""Monte Carlo ensembles with deterministic, worker-count-invariant statistics.

Particles are processed in fixed-size chunks of consecutive indices. Each
chunk produces per-batch moment summaries (batch = particle index mod 32),
and summaries are merged strictly in chunk order, so the floating-point
reduction tree never depends on how many workers ran the chunks.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, DomainError, IntegrationError
from .flows import FlowField, make_flow
from .integrators import STEPPERS, DiffusionSpec
from .rng import fill_uniforms, split_key

log = logging.getLogger(__name__)

N_BATCHES = 32
CHECKPOINT_ENV = "EFFDIFF_CHECKPOINT_DIR"
LOG_INTERVAL = 10.0  # seconds between progress lines


@dataclass(frozen=True)
class InitialDistribution:
    kind: str = "dirac"
    point: tuple[float, ...] | None = None
    lo: tuple[float, ...] | None = None
    hi: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind == "dirac":
            if self.point is None:
                raise DomainError("dirac initial distribution needs a point")
            if not all(math.isfinite(v) for v in self.point):
                raise DomainError("initial point must be finite")
        elif self.kind == "uniform_box":
            if self.lo is None or self.hi is None or len(self.lo) != len(self.hi):
                raise DomainError("uniform_box needs lo and hi of equal length")
            for a, b in zip(self.lo, self.hi):
                if not (math.isfinite(a) and math.isfinite(b) and a < b):
                    raise DomainError("uniform_box bounds must be finite with lo < hi")
        else:
            raise DomainError(f"unknown initial distribution {self.kind!r}")

    @classmethod
    def dirac(cls, point) -> "InitialDistribution":
        return cls("dirac", point=tuple(float(v) for v in point))

    @classmethod
    def uniform_box(cls, lo, hi) -> "InitialDistribution":
        return cls("uniform_box", lo=tuple(float(v) for v in lo), hi=tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.point if self.kind == "dirac" else self.lo)

    def positions(self, master_seed: int, pids: np.ndarray) -> np.ndarray:
        """Initial positions ``(d, B)`` for the given particle indices."""
        d = self.dim
        if self.kind == "dirac":
            return np.repeat(np.asarray(self.point, dtype=np.float64)[:, None], len(pids), axis=1)
        u = np.empty((d, len(pids)))
        k0, k1 = split_key(master_seed)
        fill_uniforms(k0, k1, pids, d, u)
        lo = np.asarray(self.lo)[:, None]
        hi = np.asarray(self.hi)[:, None]
        return lo + (hi - lo) * u


@dataclass(frozen=True)
class SimulationConfig:
    flow: FlowField
    integrator: str
    diffusion: DiffusionSpec
    dt: float
    T: float
    n_particles: int
    master_seed: int
    initial: InitialDistribution
    sample_times: tuple[float, ...] | None = None  # None: default log-spaced schedule
    n_samples: int = 64
    start_time: float = 0.0
    chunk_size: int = 1024

    def __post_init__(self):
        if self.integrator not in STEPPERS:
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.integrator == "split2d" and self.flow.dim != 2:
            raise ConfigError("split2d needs a 2D flow; use splitnd")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive")
        if not (self.T >= self.dt and math.isfinite(self.T)):
            raise ConfigError("T must be finite and at least dt")
        if self.T / self.dt > 2**62:
            raise ConfigError("T/dt exceeds the step counter range")
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.initial.dim != self.flow.dim:
            raise ConfigError("initial distribution dimension does not match the flow")
        self.diffusion.as_matrix(self.flow.dim)
        if self.flow.dim > 3:
            raise ConfigError("compiled ensemble kernels support d <= 3")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def sample_steps(self) -> np.ndarray:
        """Step indices at which displacements are recorded (snapped, unique, ascending)."""
        n = self.n_steps
        if self.sample_times is None:
            lo = max(self.dt, self.T / 1e4)
            times = np.geomspace(lo, self.T, self.n_samples) if self.n_samples > 1 else np.array([self.T])
        else:
            times = np.asarray(self.sample_times, dtype=np.float64)
            if np.any(times <= 0) or np.any(times > self.T + 0.5 * self.dt):
                raise ConfigError("sample times must lie in (0, T]")
        steps = np.clip(np.rint(times / self.dt).astype(np.int64), 1, n)
        return np.unique(steps)

    def snap_error(self) -> float:
        """Largest distance between a requested sample time and the step boundary used."""
        if self.sample_times is None:
            return 0.0
        req = np.asarray(self.sample_times, dtype=np.float64)
        got = self.sample_steps() * self.dt
        return float(np.max(np.min(np.abs(req[:, None] - got[None, :]), axis=1)))

    def check_time_period(self) -> None:
        tp = self.flow.time_period
        if tp is None:
            return
        r = tp / self.dt
        if abs(r - round(r)) > 1e-9 * max(r, 1.0):
            warnings.warn(
                f"dt={self.dt} does not divide the flow time period {tp}", RuntimeWarning, stacklevel=2
            )

    def to_dict(self) -> dict:
        return {
            "flow": self.flow.name,
            "flow_params": dict(self.flow.params),
            "integrator": self.integrator,
            "sigma": self.diffusion.sigma,
            "sigma_matrix": None if self.diffusion.matrix is None else self.diffusion.matrix.tolist(),
            "dt": self.dt,
            "T": self.T,
            "n_particles": self.n_particles,
            "master_seed": self.master_seed,
            "initial": {"kind": self.initial.kind, "point": self.initial.point, "lo": self.initial.lo, "hi": self.initial.hi},
            "sample_times": None if self.sample_times is None else list(self.sample_times),
            "n_samples": self.n_samples,
            "start_time": self.start_time,
            "chunk_size": self.chunk_size,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_(self, **changes) -> "SimulationConfig":
        return replace(self, **changes)


@dataclass
class EnsembleStatistics:
    """Per-batch streaming moments of displacements at each sample time.

    ``mean[b, k]`` and ``m2[b, k]`` are the mean vector and centred co-moment
    sum (Welford / Chan) of batch ``b`` at sample ``k``.
    """

    times: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    m2: np.ndarray
    merges: int = 0
    fingerprint: str = ""

    @classmethod
    def empty(cls, times: np.ndarray, dim: int, fingerprint: str = "", n_batches: int = N_BATCHES) -> "EnsembleStatistics":
        K = len(times)
        return cls(
            np.asarray(times, dtype=np.float64),
            np.zeros(n_batches, dtype=np.int64),
            np.zeros((n_batches, K, dim)),
            np.zeros((n_batches, K, dim, dim)),
            0,
            fingerprint,
        )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def n(self) -> int:
        return int(self.count.sum())

    @property
    def n_batches(self) -> int:
        return len(self.count)

    @classmethod
    def from_samples(cls, times, samples: np.ndarray, pids: np.ndarray, fingerprint: str = "", n_batches: int = N_BATCHES):
        """Summaries of raw displacements ``samples[K, d, B]`` (two-pass, per batch)."""
        K, d, _ = samples.shape
        st = cls.empty(times, d, fingerprint, n_batches)
        batch = (np.asarray(pids, dtype=np.uint64) % np.uint64(n_batches)).astype(np.int64)
        for b in range(n_batches):
            sel = np.flatnonzero(batch == b)
            if sel.size == 0:
                continue
            x = samples[:, :, sel]  # K, d, m
            mu = x.mean(axis=2)
            c = x - mu[:, :, None]
            st.count[b] = sel.size
            st.mean[b] = mu
            st.m2[b] = np.einsum("kim,kjm->kij", c, c)
        return st

    def merge(self, other: "EnsembleStatistics") -> "EnsembleStatistics":
        """Pairwise (Chan et al.) merge of ``other`` into ``self``, in place."""
        if self.mean.shape != other.mean.shape or not np.array_equal(self.times, other.times):
            raise ValueError("cannot merge statistics with different layouts")
        for b in range(self.n_batches):
            nb = other.count[b]
            if nb == 0:
                continue
            na = self.count[b]
            if na == 0:
                self.mean[b] = other.mean[b]
                self.m2[b] = other.m2[b]
            else:
                n = na + nb
                delta = other.mean[b] - self.mean[b]
                self.mean[b] = self.mean[b] + delta * (nb / n)
                self.m2[b] = self.m2[b] + other.m2[b] + np.einsum("ki,kj->kij", delta, delta) * (na * nb / n)
            self.count[b] = na + nb
        self.merges += 1
        return self

    def batch_second_moments(self) -> np.ndarray:
        """Raw second moments E[dx_i dx_j] per batch, shape ``(nb, K, d, d)``; NaN for empty batches."""
        with np.errstate(invalid="ignore", divide="ignore"):
            cnt = self.count[:, None, None, None].astype(np.float64)
            raw = self.m2 / cnt + np.einsum("bki,bkj->bkij", self.mean, self.mean)
        raw[self.count == 0] = np.nan
        return raw

    def totals(self) -> tuple[int, np.ndarray, np.ndarray]:
        """Merged (n, mean[K, d], raw second moment[K, d, d]) over all batches, in batch order."""
        acc = EnsembleStatistics.empty(self.times, self.dim, n_batches=1)
        for b in range(self.n_batches):
            one = EnsembleStatistics(self.times, self.count[b : b + 1], self.mean[b : b + 1], self.m2[b : b + 1])
            acc.merge(one)
        n = int(acc.count[0])
        mean = acc.mean[0]
        raw = acc.m2[0] / max(n, 1) + np.einsum("ki,kj->kij", mean, mean)
        return n, mean, raw

    def save(self, path, **extra) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(
                fh,
                times=self.times,
                count=self.count,
                mean=self.mean,
                m2=self.m2,
                merges=np.int64(self.merges),
                fingerprint=np.str_(self.fingerprint),
                **{k: np.asarray(v) for k, v in extra.items()},
            )
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> tuple["EnsembleStatistics", dict]:
        with np.load(path, allow_pickle=False) as z:
            st = cls(z["times"], z["count"], z["mean"], z["m2"], int(z["merges"]), str(z["fingerprint"]))
            extra = {k: z[k] for k in z.files if k not in ("times", "count", "mean", "m2", "merges", "fingerprint")}
        return st, extra


# -- running ---------------------------------------------------------------


@dataclass
class _Plan:
    config: SimulationConfig
    kernel: object
    params: np.ndarray
    sig: np.ndarray
    use_matrix: bool
    steps: np.ndarray
    times: np.ndarray
    key: tuple


def _plan(config: SimulationConfig) -> _Plan:
    flow = config.flow
    if flow.name not in _kernels.FLOW_KERNELS:
        raise ConfigError(f"flow {flow.name!r} has no compiled kernel; only catalog flows can be ensembled")
    kern = _kernels.get_kernel(flow.name, config.integrator, flow.dim)
    steps = config.sample_steps()
    return _Plan(
        config,
        kern,
        _kernels.pack_params(flow.name, flow.params),
        config.diffusion.as_matrix(flow.dim),
        not config.diffusion.is_scalar,
        steps,
        steps * config.dt,
        split_key(config.master_seed),
    )


def _simulate_block(plan: _Plan, pids: np.ndarray, check_each: bool = False) -> tuple[np.ndarray, int]:
    cfg = plan.config
    X = np.ascontiguousarray(cfg.initial.positions(cfg.master_seed, pids))
    out = np.zeros((len(plan.steps), cfg.flow.dim, len(pids)))
    bad = plan.kernel(
        X, pids, plan.key[0], plan.key[1], cfg.start_time, cfg.dt, cfg.n_steps,
        plan.sig, plan.use_matrix, plan.params, plan.steps, out, check_each,
    )
    return out, int(bad)


def _locate_failure(plan: _Plan, pids: np.ndarray) -> IntegrationError:
    for pid in pids:
        _, step = _simulate_block(plan, np.array([pid], dtype=np.uint64), check_each=True)
        if step >= 0:
            return IntegrationError(
                f"particle {int(pid)} became non-finite at step {step} (t={plan.config.start_time + (step + 1) * plan.config.dt})",
                particle=int(pid),
                step=step,
            )
    return IntegrationError("non-finite state in block but no single particle reproduces it")


def run_particle(config: SimulationConfig, particle_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Displacements ``X(t_k) - X(0)`` of one particle, shape ``(K, d)``, with the times ``t_k``."""
    plan = _plan(config)
    pids = np.array([particle_index], dtype=np.uint64)
    out, bad = _simulate_block(plan, pids)
    if bad >= 0:
        raise _locate_failure(plan, pids)
    return plan.times.copy(), out[:, :, 0]


def _chunk(plan: _Plan, start: int, stop: int) -> EnsembleStatistics:
    pids = np.arange(start, stop, dtype=np.uint64)
    out, bad = _simulate_block(plan, pids)
    if bad >= 0:
        raise _locate_failure(plan, pids)
    return EnsembleStatistics.from_samples(plan.times, out, pids, plan.config.fingerprint())


def _checkpoint_path(config: SimulationConfig, checkpoint_dir) -> Path | None:
    d = os.environ.get(CHECKPOINT_ENV) or checkpoint_dir
    if d is None:
        return None
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    return d / f"ensemble-{config.fingerprint()}.npz"


def resolve_workers(workers: int) -> int:
    if workers < 0:
        raise ConfigError("workers must be >= 0")
    return workers or (os.cpu_count() or 1)


def run_ensemble(
    config: SimulationConfig,
    workers: int = 1,
    checkpoint_every: int = 0,
    checkpoint_dir=None,
    resume: bool = True,
) -> EnsembleStatistics:
    """Simulate all particles and return merged statistics.

    Results are bitwise identical for any ``workers`` and across
    checkpoint/resume, because chunk boundaries and the merge order depend only
    on ``config``.
    """
    config.check_time_period()
    plan = _plan(config)
    fp = config.fingerprint()
    n, cs = config.n_particles, config.chunk_size
    stats = EnsembleStatistics.empty(plan.times, config.flow.dim, fp)
    next_chunk = 0

    ckpt = _checkpoint_path(config, checkpoint_dir) if (checkpoint_every or checkpoint_dir or os.environ.get(CHECKPOINT_ENV)) else None
    if ckpt is not None and resume and ckpt.exists():
        saved, extra = EnsembleStatistics.load(ckpt)
        if saved.fingerprint != fp:
            raise ConfigError(f"checkpoint {ckpt} belongs to a different configuration")
        stats = saved
        next_chunk = int(extra["next_particle"]) // cs
        log.info("resuming %s at particle %d", ckpt.name, next_chunk * cs)

    chunks = [(i * cs, min((i + 1) * cs, n)) for i in range(next_chunk, -(-n // cs))]
    every = max(1, -(-checkpoint_every // cs)) if checkpoint_every else 0
    nw = resolve_workers(workers)
    t0 = time.perf_counter()
    done = 0
    last_log = 0.0
    pool = ThreadPoolExecutor(max_workers=nw) if nw > 1 else None
    try:
        results = pool.map(lambda c: _chunk(plan, *c), chunks) if pool else (_chunk(plan, *c) for c in chunks)
        for j, (c, part) in enumerate(zip(chunks, results)):
            stats.merge(part)
            done += c[1] - c[0]
            el = time.perf_counter() - t0
            if el - last_log >= LOG_INTERVAL or c[1] == n:
                last_log = el
                log.info(
                    "particles %d/%d  %.0f particles/s  %.3g particle-steps/s",
                    c[1], n, done / el, done * config.n_steps / el,
                )
            if ckpt is not None and every and (j + 1) % every == 0 and c[1] < n:
                stats.save(ckpt, next_particle=np.int64(c[1]))
    finally:
        if pool:
            pool.shutdown(wait=True, cancel_futures=True)
    if ckpt is not None and ckpt.exists():
        ckpt.unlink()
    return stats


def collect_samples(config: SimulationConfig, particles: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw displacements ``(K, d, m)`` for chosen particles (default: all); for diagnostics and tests."""
    plan = _plan(config)
    pids = np.asarray(range(config.n_particles) if particles is None else particles, dtype=np.uint64)
    out, bad = _simulate_block(plan, pids)
    if bad >= 0:
        raise _locate_failure(plan, pids)
    return plan.times.copy(), out


def make_config(
    flow: str | FlowField,
    *,
    integrator: str = "splitnd",
    sigma: float | None = None,
    d0: float | None = None,
    sigma_matrix=None,
    dt: float,
    T: float,
    n_particles: int,
    seed: int,
    initial: InitialDistribution | None = None,
    flow_params: dict | None = None,
    **kw,
) -> SimulationConfig:
    """Convenience constructor used by the experiment recipes and tests."""
    fl = flow if isinstance(flow, FlowField) else make_flow(flow, **(flow_params or {}))
    given = [v is not None for v in (sigma, d0, sigma_matrix)]
    if sum(given) != 1:
        raise ConfigError("give exactly one of sigma, d0, sigma_matrix")
    if sigma is not None:
        spec = DiffusionSpec(sigma=float(sigma))
    elif d0 is not None:
        spec = DiffusionSpec.from_d0(d0)
    else:
        spec = DiffusionSpec(matrix=np.asarray(sigma_matrix, dtype=np.float64))
    if initial is None:
        initial = InitialDistribution.dirac([0.0] * fl.dim)
    return SimulationConfig(fl, integrator, spec, float(dt), float(T), int(n_particles), int(seed), initial, **kw)
