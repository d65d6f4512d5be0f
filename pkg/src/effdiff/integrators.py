"""One-step maps for dX = v(t, X) dt + Sigma dW.

These are the readable reference implementations, vectorized over a leading
particle axis when given stacked positions. The ensemble runner uses compiled
kernels (``_kernels``) that implement the same update order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, IntegrationError
from .flows import FlowField


@dataclass(frozen=True)
class ParticleState:
    x: np.ndarray
    x0: np.ndarray
    t: float

    @classmethod
    def start(cls, x, t: float = 0.0) -> "ParticleState":
        x = np.array(x, dtype=np.float64)
        return cls(x, x.copy(), float(t))

    @property
    def displacement(self) -> np.ndarray:
        return self.x - self.x0


@dataclass(frozen=True)
class DiffusionSpec:
    """Constant additive noise: ``sigma * I`` or a full non-singular matrix."""

    sigma: float | None = None
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if (self.sigma is None) == (self.matrix is None):
            raise DomainError("give exactly one of sigma or matrix")
        if self.sigma is not None:
            if not (self.sigma >= 0 and np.isfinite(self.sigma)):
                raise DomainError("sigma must be finite and >= 0")
        else:
            m = np.array(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise DomainError("diffusion matrix must be square")
            if not np.all(np.isfinite(m)) or np.linalg.matrix_rank(m) < m.shape[0]:
                raise DomainError("diffusion matrix must be non-singular")
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)

    @classmethod
    def from_d0(cls, d0: float) -> "DiffusionSpec":
        if d0 < 0:
            raise DomainError("D0 must be >= 0")
        return cls(sigma=float(np.sqrt(2.0 * d0)))

    @property
    def is_scalar(self) -> bool:
        return self.sigma is not None

    @property
    def d0(self) -> float:
        """Molecular diffusivity sigma**2 / 2 (scalar case only)."""
        if self.sigma is None:
            raise DomainError("D0 is only defined for scalar noise")
        return 0.5 * self.sigma**2

    def as_matrix(self, dim: int) -> np.ndarray:
        if self.sigma is not None:
            return self.sigma * np.eye(dim)
        if self.matrix.shape[0] != dim:
            raise DomainError(f"diffusion matrix is {self.matrix.shape[0]}-dimensional, flow is {dim}")
        return np.array(self.matrix)

    def apply(self, dw: np.ndarray) -> np.ndarray:
        if self.sigma is not None:
            return self.sigma * dw
        # explicit j-ordered sum; matches the compiled kernels term by term
        m = self.matrix
        rows = []
        for i in range(m.shape[0]):
            acc = m[i, 0] * dw[..., 0]
            for j in range(1, m.shape[1]):
                acc = acc + m[i, j] * dw[..., j]
            rows.append(acc)
        return np.stack(rows, axis=-1)


def _as_spec(sigma) -> DiffusionSpec:
    if isinstance(sigma, DiffusionSpec):
        return sigma
    return DiffusionSpec(sigma=float(sigma))


def _check(state: ParticleState, dt: float, flow: FlowField, noise) -> np.ndarray:
    if not dt > 0:
        raise DomainError("dt must be positive")
    x = np.asarray(state.x, dtype=np.float64)
    if x.shape[-1] != flow.dim:
        raise DomainError(f"state is {x.shape[-1]}-dimensional, flow {flow.name} is {flow.dim}")
    if noise is not None and np.shape(noise)[-1] != flow.dim:
        raise DomainError("noise increment dimension does not match the flow")
    return x


def _finish(state: ParticleState, x: np.ndarray, dt: float) -> ParticleState:
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite state after step from t={state.t}")
    return ParticleState(x, state.x0, state.t + dt)


def sweep(flow: FlowField, t_mid: float, x: np.ndarray, dt: float) -> np.ndarray:
    """Deterministic volume-preserving sweep: update x_1, ..., x_d in order.

    Component ``i`` sees the already-updated ``x_1*..x_{i-1}*`` and the old
    ``x_{i+1}..x_d``, all at the single time ``t_mid``.
    """
    y = np.array(x, dtype=np.float64, copy=True)
    for i in range(flow.dim):
        y[..., i] = y[..., i] + dt * flow.component(i, t_mid, y, flow.params)
    return y


def step_2d_splitting(state: ParticleState, dt: float, flow: FlowField, sigma, noise) -> ParticleState:
    """Stochastic symplectic Lie-Trotter step for a 2D flow.

    x1+ = x1 + v1(t + dt/2, x2) dt + sigma dW1
    x2+ = x2 + v2(t + dt/2, x1 + v1 dt) dt + sigma dW2
    """
    if flow.dim != 2:
        raise DomainError("step_2d_splitting needs a 2D flow")
    x = _check(state, dt, flow, noise)
    spec = _as_spec(sigma)
    tm = state.t + 0.5 * dt
    y1 = x[..., 0] + dt * flow.component(0, tm, x, flow.params)
    y = np.stack([y1, x[..., 1]], axis=-1)
    y2 = x[..., 1] + dt * flow.component(1, tm, y, flow.params)
    y = np.stack([y1, y2], axis=-1)
    return _finish(state, y + spec.apply(np.asarray(noise, dtype=np.float64)), dt)


def step_nd_volume_preserving(state: ParticleState, dt: float, flow: FlowField, sigma, noise) -> ParticleState:
    """Sequential splitting for any d >= 2, noise added after the full sweep."""
    x = _check(state, dt, flow, noise)
    spec = _as_spec(sigma)
    y = sweep(flow, state.t + 0.5 * dt, x, dt)
    return _finish(state, y + spec.apply(np.asarray(noise, dtype=np.float64)), dt)


def step_euler_maruyama(state: ParticleState, dt: float, flow: FlowField, sigma, noise) -> ParticleState:
    x = _check(state, dt, flow, noise)
    spec = _as_spec(sigma)
    v = np.stack([flow.component(i, state.t, x, flow.params) for i in range(flow.dim)], axis=-1)
    return _finish(state, x + dt * v + spec.apply(np.asarray(noise, dtype=np.float64)), dt)


STEPPERS: dict[str, Callable[..., ParticleState]] = {
    "split2d": step_2d_splitting,
    "splitnd": step_nd_volume_preserving,
    "euler": step_euler_maruyama,
}


def get_stepper(name: str) -> Callable[..., ParticleState]:
    try:
        return STEPPERS[name]
    except KeyError:
        raise DomainError(f"unknown integrator {name!r}; choose from {', '.join(STEPPERS)}") from None


def deterministic_jacobian(stepper, flow: FlowField, t: float, x, dt: float, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of the noise-free one-step map X -> X+."""
    if isinstance(stepper, str):
        stepper = get_stepper(stepper)
    x = np.asarray(x, dtype=np.float64)
    d = flow.dim
    zero = np.zeros(d)
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fwd = stepper(ParticleState.start(x + e, t), dt, flow, 0.0, zero).x
        bwd = stepper(ParticleState.start(x - e, t), dt, flow, 0.0, zero).x
        jac[:, j] = (fwd - bwd) / (2 * h)
    return jac
