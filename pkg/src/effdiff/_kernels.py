"""Compiled block kernels: advance a block of particles in lockstep.

Positions are stored structure-of-arrays, ``X[d, B]``, so the inner loop over
the block vectorizes. Every particle depends only on its own Philox stream,
which makes a particle's path independent of the block it is placed in.

The flow sweeps below mirror ``flows``/``integrators`` operation for
operation; they differ from the numpy reference only by FMA contraction and
by the polynomial elementary functions (a few ulp per step).
"""

from __future__ import annotations

import math
import os

import numpy as np
from numba import njit

from . import _fastmath as fm
from .rng import fill_normals

if os.environ.get("EFFDIFF_VECTOR_WIDTH", "8") != "0":
    import llvmlite.binding as _llvm

    # numba's default prefers 256-bit vectors; wider is ~1.5x faster on AVX-512
    _llvm.set_option("", "-force-vector-width=" + os.environ.get("EFFDIFF_VECTOR_WIDTH", "8"))

_TWO_PI = 2.0 * math.pi
_FAST = dict(inline="always", error_model="numpy", fastmath={"contract"})


# -- per-step time factors (scalar, libm) ---------------------------------


@njit(inline="always")
def _phase_none(t, p):
    return 0.0


@njit(inline="always")
def _phase_sin2pi(t, p):
    return math.sin(_TWO_PI * t)


@njit(inline="always")
def _phase_eps(t, p):
    return p[0] * math.sin(_TWO_PI * t)


@njit(inline="always")
def _phase_eps_abc(t, p):
    return p[3] * math.sin(_TWO_PI * t)


@njit(inline="always")
def _phase_omega(t, p):
    return math.sin(p[3] * t)


# -- deterministic sweeps --------------------------------------------------


@njit(**_FAST)
def _chaotic2d_split(x1, x2, x3, ph, dt, p):
    sa, ca = fm.sincos(4.0 * x2 + 1.0 + ph)
    y1 = x1 + dt * (sa * fm.exp(ca))
    sb, cb = fm.sincos(2.0 * y1 + ph)
    y2 = x2 + dt * (cb * fm.exp(sb))
    return y1, y2, x3


@njit(**_FAST)
def _chaotic2d_euler(x1, x2, x3, ph, dt, p):
    sa, ca = fm.sincos(4.0 * x2 + 1.0 + ph)
    sb, cb = fm.sincos(2.0 * x1 + ph)
    return x1 + dt * (sa * fm.exp(ca)), x2 + dt * (cb * fm.exp(sb)), x3


@njit(**_FAST)
def _kolmogorov_split(x1, x2, x3, ph, dt, p):
    y1 = x1 + dt * fm.sin(x3 + ph)
    y2 = x2 + dt * fm.sin(y1 + ph)
    y3 = x3 + dt * fm.sin(y2 + ph)
    return y1, y2, y3


@njit(**_FAST)
def _kolmogorov_euler(x1, x2, x3, ph, dt, p):
    return x1 + dt * fm.sin(x3 + ph), x2 + dt * fm.sin(x1 + ph), x3 + dt * fm.sin(x2 + ph)


@njit(**_FAST)
def _abc_split(x1, x2, x3, ph, dt, p):
    A = p[0]
    B = p[1]
    C = p[2]
    s3, c3 = fm.sincos(x3 + ph)
    s2, c2 = fm.sincos(x2 + ph)
    y1 = x1 + dt * (A * s3 + C * c2)
    s1, c1 = fm.sincos(y1 + ph)
    y2 = x2 + dt * (B * s1 + A * c3)
    s2n, c2n = fm.sincos(y2 + ph)
    y3 = x3 + dt * (C * s2n + B * c1)
    return y1, y2, y3


@njit(**_FAST)
def _abc_euler(x1, x2, x3, ph, dt, p):
    A = p[0]
    B = p[1]
    C = p[2]
    s1, c1 = fm.sincos(x1 + ph)
    s2, c2 = fm.sincos(x2 + ph)
    s3, c3 = fm.sincos(x3 + ph)
    return (
        x1 + dt * (A * s3 + C * c2),
        x2 + dt * (B * s1 + A * c3),
        x3 + dt * (C * s2 + B * c1),
    )


@njit(**_FAST)
def _shear_step(x1, x2, x3, ph, dt, p):
    return x1 + dt * (p[0] * fm.sin(p[1] * x2)), x2, x3


@njit(**_FAST)
def _identity(x1, x2, x3, ph, dt, p):
    return x1, x2, x3


# flow name -> (param order, phase fn, split sweep, euler step)
FLOW_KERNELS = {
    "chaotic2d": ((), _phase_sin2pi, _chaotic2d_split, _chaotic2d_euler),
    "kolmogorov3d": (("eps",), _phase_eps, _kolmogorov_split, _kolmogorov_euler),
    "abc3d": (("A", "B", "C", "eps"), _phase_eps_abc, _abc_split, _abc_euler),
    "abc3d_omega": (("A", "B", "C", "omega"), _phase_omega, _abc_split, _abc_euler),
    "shear2d": (("a", "k"), _phase_none, _shear_step, _shear_step),
    "zero": ((), _phase_none, _identity, _identity),
}


def _build(dim, phase, det, midpoint):
    nblocks = (dim + 1) // 2
    toff = 0.5 if midpoint else 0.0

    @njit(error_model="numpy", fastmath={"contract"}, nogil=True)
    def kernel(X, pids, k0, k1, t0, dt, nsteps, sig, use_matrix, params, sample_steps, out, check_each):
        B = X.shape[1]
        sqdt = math.sqrt(dt)
        s_scalar = sig[0, 0]
        z = np.empty((2 * nblocks, B))
        x0 = X.copy()
        kidx = 0
        K = sample_steps.shape[0]
        for s in range(nsteps):
            ph = phase(t0 + (s + toff) * dt, params)
            fill_normals(k0, k1, pids, np.uint64(s * nblocks), nblocks, z)
            for b in range(B):
                x1 = X[0, b]
                x2 = X[1, b]
                x3 = X[2, b] if dim >= 3 else 0.0
                y1, y2, y3 = det(x1, x2, x3, ph, dt, params)
                X[0, b] = y1
                X[1, b] = y2
                if dim >= 3:
                    X[2, b] = y3
            if use_matrix:
                for b in range(B):
                    for i in range(dim):
                        acc = sig[i, 0] * (sqdt * z[0, b])
                        for j in range(1, dim):
                            acc = acc + sig[i, j] * (sqdt * z[j, b])
                        X[i, b] = X[i, b] + acc
            else:
                for i in range(dim):
                    for b in range(B):
                        X[i, b] = X[i, b] + s_scalar * (sqdt * z[i, b])
            sampled = kidx < K and sample_steps[kidx] == s + 1
            if sampled or check_each or s + 1 == nsteps:
                nbad = 0
                for i in range(dim):
                    for b in range(B):
                        nbad += not abs(X[i, b]) < np.inf
                if nbad:
                    return s
            if sampled:
                for i in range(dim):
                    for b in range(B):
                        out[kidx, i, b] = X[i, b] - x0[i, b]
                kidx += 1
        return -1

    return kernel


_CACHE: dict = {}


def get_kernel(flow_name: str, integrator: str, dim: int):
    """Compiled kernel for a catalog flow and integrator name."""
    key = (flow_name, integrator, dim)
    if key not in _CACHE:
        _, phase, split, euler = FLOW_KERNELS[flow_name]
        if flow_name == "zero" and dim > 3:
            raise NotImplementedError("compiled kernels cover d <= 3")
        if integrator in ("split2d", "splitnd"):
            k = _build(dim, phase, split, True)
        elif integrator == "euler":
            k = _build(dim, phase, euler, False)
        else:
            raise KeyError(integrator)
        _CACHE[key] = k
    return _CACHE[key]


def pack_params(flow_name: str, params) -> np.ndarray:
    order = FLOW_KERNELS[flow_name][0]
    return np.array([float(params[k]) for k in order] + [0.0] * (4 - len(order)), dtype=np.float64)
