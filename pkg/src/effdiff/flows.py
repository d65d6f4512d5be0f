"""Space-time periodic, divergence-free velocity fields.

Every field here has ``v_i`` independent of ``x_i``, which is what makes the
sequential (shear-by-shear) splitting updates volume preserving. Evaluation is
done on unwrapped positions: periodicity lives inside the trig functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np
from scipy.stats import qmc

from .errors import CatalogError, DomainError

TWO_PI = 2.0 * math.pi

# component(i, t, x, params) -> v_i, with x of shape (..., d)
Component = Callable[[int, float, np.ndarray, Mapping[str, float]], np.ndarray]


@dataclass(frozen=True)
class FlowField:
    name: str
    dim: int
    params: Mapping[str, float]
    spatial_period: tuple[float, ...]
    time_period: float | None  # None: steady
    component: Component = field(repr=False, compare=False)
    doc: str = field(default="", repr=False, compare=False)

    def __post_init__(self):
        if self.dim < 2:
            raise DomainError("flow dimension must be at least 2")
        if len(self.spatial_period) != self.dim:
            raise DomainError("need one spatial period per dimension")
        if any(not (p > 0 and math.isfinite(p)) for p in self.spatial_period):
            raise DomainError("spatial periods must be positive and finite")
        if self.time_period is not None and not self.time_period > 0:
            raise DomainError("time_period must be positive or None")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    @property
    def is_steady(self) -> bool:
        return self.time_period is None


def velocity(flow: FlowField, t: float, x) -> np.ndarray:
    """Velocity at time ``t`` for a position of shape ``(d,)`` or a stack ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != flow.dim:
        raise DomainError(f"{flow.name} is {flow.dim}-dimensional, got position shape {x.shape}")
    if not (np.isfinite(t) and np.all(np.isfinite(x))):
        raise DomainError("non-finite time or position")
    return np.stack([flow.component(i, t, x, flow.params) for i in range(flow.dim)], axis=-1)


# -- catalog flows ---------------------------------------------------------


def _chaotic2d(i, t, x, p):
    s = math.sin(TWO_PI * t)
    if i == 0:
        a = 4.0 * x[..., 1] + 1.0 + s
        return np.sin(a) * np.exp(np.cos(a))
    b = 2.0 * x[..., 0] + s
    return np.cos(b) * np.exp(np.sin(b))


def _kolmogorov3d(i, t, x, p):
    ph = p["eps"] * math.sin(TWO_PI * t)
    # v1 = sin(x3), v2 = sin(x1), v3 = sin(x2)
    return np.sin(x[..., (i + 2) % 3] + ph)


def _abc_terms(i, ph, x, p):
    A, B, C = p["A"], p["B"], p["C"]
    if i == 0:
        return A * np.sin(x[..., 2] + ph) + C * np.cos(x[..., 1] + ph)
    if i == 1:
        return B * np.sin(x[..., 0] + ph) + A * np.cos(x[..., 2] + ph)
    return C * np.sin(x[..., 1] + ph) + B * np.cos(x[..., 0] + ph)


def _abc3d(i, t, x, p):
    return _abc_terms(i, p["eps"] * math.sin(TWO_PI * t), x, p)


def _abc3d_omega(i, t, x, p):
    return _abc_terms(i, math.sin(p["omega"] * t), x, p)


def _shear2d(i, t, x, p):
    if i == 0:
        return p["a"] * np.sin(p["k"] * x[..., 1])
    return np.zeros_like(x[..., 0])


def _zero(i, t, x, p):
    return np.zeros_like(x[..., 0])


def _params(given: Mapping[str, float], defaults: Mapping[str, float], flow: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise CatalogError(f"flow {flow!r} has no parameter(s) {sorted(unknown)}; known: {sorted(defaults)}")
    out = dict(defaults)
    for k, v in given.items():
        v = float(v)
        if not math.isfinite(v):
            raise DomainError(f"parameter {k} of flow {flow!r} must be finite")
        out[k] = v
    return out


def make_chaotic2d(**params) -> FlowField:
    p = _params(params, {}, "chaotic2d")
    return FlowField(
        "chaotic2d", 2, p, (math.pi, math.pi / 2), 1.0, _chaotic2d,
        "v1 = sin(4x2+1+sin 2pi t) exp(cos(4x2+1+sin 2pi t)), "
        "v2 = cos(2x1+sin 2pi t) exp(sin(2x1+sin 2pi t))",
    )


def make_kolmogorov3d(**params) -> FlowField:
    p = _params(params, {"eps": 0.1}, "kolmogorov3d")
    tp = 1.0 if p["eps"] != 0.0 else None
    return FlowField(
        "kolmogorov3d", 3, p, (TWO_PI,) * 3, tp, _kolmogorov3d,
        "v = (sin(x3+ph), sin(x1+ph), sin(x2+ph)), ph = eps sin(2 pi t)",
    )


def make_abc3d(**params) -> FlowField:
    p = _params(params, {"A": 1.0, "B": 1.0, "C": 1.0, "eps": 0.1}, "abc3d")
    tp = 1.0 if p["eps"] != 0.0 else None
    return FlowField(
        "abc3d", 3, p, (TWO_PI,) * 3, tp, _abc3d,
        "ABC flow with every argument shifted by eps sin(2 pi t)",
    )


def make_abc3d_omega(**params) -> FlowField:
    p = _params(params, {"A": 1.0, "B": 1.0, "C": 1.0, "omega": 0.1}, "abc3d_omega")
    if p["omega"] < 0:
        raise DomainError("omega must be non-negative")
    tp = TWO_PI / p["omega"] if p["omega"] != 0.0 else None
    return FlowField(
        "abc3d_omega", 3, p, (TWO_PI,) * 3, tp, _abc3d_omega,
        "ABC flow with every argument shifted by sin(omega t)",
    )


def make_shear2d(**params) -> FlowField:
    p = _params(params, {"a": 1.0, "k": TWO_PI}, "shear2d")
    if p["k"] <= 0:
        raise DomainError("shear wavenumber k must be positive")
    L = TWO_PI / p["k"]
    return FlowField("shear2d", 2, p, (L, L), None, _shear2d, "v = (a sin(k x2), 0)")


def make_zero(**params) -> FlowField:
    p = _params(params, {"dim": 2.0}, "zero")
    d = int(p["dim"])
    if d != p["dim"] or d < 2:
        raise DomainError("zero flow dim must be an integer >= 2")
    return FlowField("zero", d, p, (TWO_PI,) * d, None, _zero, "v = 0")


CATALOG: Mapping[str, Callable[..., FlowField]] = MappingProxyType(
    {
        "chaotic2d": make_chaotic2d,
        "kolmogorov3d": make_kolmogorov3d,
        "abc3d": make_abc3d,
        "abc3d_omega": make_abc3d_omega,
        "shear2d": make_shear2d,
        "zero": make_zero,
    }
)


def make_flow(name: str, **params) -> FlowField:
    try:
        ctor = CATALOG[name]
    except KeyError:
        raise CatalogError(f"unknown flow {name!r}; catalog: {', '.join(CATALOG)}") from None
    return ctor(**params)


# -- structure diagnostics -------------------------------------------------


@dataclass(frozen=True)
class StructureReport:
    flow: str
    max_abs_divergence: float
    max_abs_diag_jacobian: float
    max_abs_mean: float
    n_samples: int
    h: float

    def passes(self, tol: float = 1e-6, mean_tol: float = 1e-8) -> bool:
        return (
            self.max_abs_divergence < tol
            and self.max_abs_diag_jacobian < tol
            and self.max_abs_mean < mean_tol
        )


def _sample_points(flow: FlowField, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    pts = qmc.Halton(d=flow.dim + 1, scramble=True, seed=seed).random(n)
    tp = flow.time_period if flow.time_period is not None else 1.0
    return pts[:, 0] * tp, pts[:, 1:] * np.asarray(flow.spatial_period)


def _mean_over_others(flow: FlowField, i: int, t: float, xi: float, nodes: int) -> float:
    """Average of v_i over one period of every coordinate except x_i."""
    others = [j for j in range(flow.dim) if j != i]
    grids = [np.arange(nodes) * (flow.spatial_period[j] / nodes) for j in others]
    mesh = np.meshgrid(*grids, indexing="ij")
    x = np.empty(mesh[0].shape + (flow.dim,))
    x[..., i] = xi
    for j, g in zip(others, mesh):
        x[..., j] = g
    # periodic composite trapezoid: equal weights, endpoint dropped
    return float(np.mean(flow.component(i, t, x, flow.params)))


def check_structure(
    flow: FlowField, n_samples: int = 256, h: float = 1e-4, seed: int = 0, n_mean_samples: int = 10
) -> StructureReport:
    """Finite-difference divergence / Jacobian-diagonal maxima and a mean-zero check."""
    if not h > 0:
        raise DomainError("finite-difference step must be positive")
    ts, xs = _sample_points(flow, n_samples, seed)
    d = flow.dim
    diag = np.zeros((n_samples, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        for s in range(n_samples):
            fwd = flow.component(i, ts[s], xs[s] + e, flow.params)
            bwd = flow.component(i, ts[s], xs[s] - e, flow.params)
            diag[s, i] = (fwd - bwd) / (2 * h)
    div = diag.sum(axis=1)

    nodes = 2**10 if d == 2 else 2**6
    worst_mean = 0.0
    for s in range(min(n_mean_samples, n_samples)):
        for i in range(d):
            m = _mean_over_others(flow, i, ts[s], xs[s, i], nodes)
            worst_mean = max(worst_mean, abs(m))
    return StructureReport(
        flow.name,
        float(np.max(np.abs(div))),
        float(np.max(np.abs(diag))),
        worst_mean,
        n_samples,
        h,
    )
