"""Counter-based random streams keyed on (master seed, particle index).

The generator is Philox4x32-10 (Salmon et al., Random123). A 128-bit counter
``(draw_lo, draw_hi, particle_lo, particle_hi)`` is encrypted under the 64-bit
key ``(seed_lo, seed_hi)``, so every particle owns a disjoint slice of counter
space and its path never depends on how particles are scheduled.

Each Philox block yields two uniforms of 53 bits, ``u = (m + 0.5) * 2**-53``,
which Box-Muller maps to a pair of standard normals ``sqrt(-2 ln u1) *
(cos 2 pi u2, sin 2 pi u2)``. All arithmetic is plain IEEE double without
contraction, so the variates are byte-identical on any x86-64 or ARM host.

Layout used by the integrators: a ``d``-dimensional step consumes
``ceil(d / 2)`` blocks, block ``j`` of step ``s`` having draw index
``s * ceil(d / 2) + j``. For odd ``d`` the last sine variate is discarded.
Initial positions use the draw domain with the top bit of ``draw_hi`` set.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from . import _fastmath as fm

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_TWO_M53 = 1.0 / 9007199254740992.0
_TWOPI = 2.0 * math.pi

INIT_DOMAIN = 0x80000000
SEED_DOMAIN = 0xFFFFFFFF


@njit(inline="always", error_model="numpy", cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32 with 10 rounds; all arguments are uint64 holding 32-bit words."""
    for _ in range(10):
        p0 = _M0 * (c0 & _MASK)
        p1 = _M1 * (c2 & _MASK)
        n0 = (p1 >> _S32) ^ c1 ^ k0
        n2 = (p0 >> _S32) ^ c3 ^ k1
        c0 = n0
        c1 = p1 & _MASK
        c2 = n2
        c3 = p0 & _MASK
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@njit(inline="always", error_model="numpy", cache=True)
def _uniform_pair(r0, r1, r2, r3):
    u1 = (np.float64((r0 | (r1 << _S32)) >> _S11) + 0.5) * _TWO_M53
    u2 = (np.float64((r2 | (r3 << _S32)) >> _S11) + 0.5) * _TWO_M53
    return u1, u2


@njit(inline="always", error_model="numpy", cache=True)
def normal_pair(k0, k1, draw, pid):
    r0, r1, r2, r3 = philox4x32(
        draw & _MASK, draw >> _S32, pid & _MASK, pid >> _S32, k0, k1
    )
    u1, u2 = _uniform_pair(r0, r1, r2, r3)
    rad = math.sqrt(-2.0 * fm.log(u1))
    s, c = fm.sincos(_TWOPI * u2)
    return rad * c, rad * s


@njit(error_model="numpy", nogil=True, cache=True)
def fill_normals(k0, k1, pids, draw0, nblocks, out):
    """Write ``2 * nblocks`` normals per particle into ``out[2*nblocks, B]``."""
    B = pids.shape[0]
    for j in range(nblocks):
        draw = draw0 + np.uint64(j)
        for b in range(B):
            z0, z1 = normal_pair(k0, k1, draw, pids[b])
            out[2 * j, b] = z0
            out[2 * j + 1, b] = z1


@njit(error_model="numpy", nogil=True, cache=True)
def fill_uniforms(k0, k1, pids, dim, out):
    """Initial-condition uniforms in (0, 1), ``out[dim, B]``."""
    B = pids.shape[0]
    dom = np.uint64(INIT_DOMAIN)
    nblocks = (dim + 1) // 2
    for j in range(nblocks):
        for b in range(B):
            pid = pids[b]
            r0, r1, r2, r3 = philox4x32(
                np.uint64(j), dom, pid & _MASK, pid >> _S32, k0, k1
            )
            u1, u2 = _uniform_pair(r0, r1, r2, r3)
            out[2 * j, b] = u1
            if 2 * j + 1 < dim:
                out[2 * j + 1, b] = u2


@njit(cache=True)
def _philox_words(c0, c1, c2, c3, k0, k1):
    return philox4x32(c0, c1, c2, c3, k0, k1)


def split_key(seed: int) -> tuple[np.uint64, np.uint64]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def philox_block(counter, key) -> tuple[int, int, int, int]:
    """Raw Philox4x32-10 output for a 4-word counter and a 2-word key."""
    c = [np.uint64(int(w) & 0xFFFFFFFF) for w in counter]
    k = [np.uint64(int(w) & 0xFFFFFFFF) for w in key]
    return tuple(int(w) for w in _philox_words(c[0], c[1], c[2], c[3], k[0], k[1]))


def derive_seed(seed: int, index: int) -> int:
    """Child seed for sub-experiment ``index`` (sweep value, dt level, ...)."""
    lo, hi = split_key(seed)
    index = int(index)
    r = philox_block(
        (index & 0xFFFFFFFF, index >> 32, SEED_DOMAIN, SEED_DOMAIN), (lo, hi)
    )
    return r[0] | (r[1] << 32)


class ParticleStream:
    """Gaussian variates of one particle, addressable by draw position.

    The stream is stateless: ``normals(start, count)`` always returns the same
    values for the same arguments, and ``increments`` reproduces exactly the
    noise the compiled ensemble kernels feed to step ``step``.
    """

    def __init__(self, master_seed: int, particle_index: int):
        if particle_index < 0:
            raise ValueError("particle_index must be non-negative")
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self.particle_index = int(particle_index)
        self._key = split_key(self.master_seed)
        self._pid = np.array([self.particle_index], dtype=np.uint64)

    def _blocks(self, first_block: int, nblocks: int) -> np.ndarray:
        out = np.empty((2 * nblocks, 1))
        fill_normals(self._key[0], self._key[1], self._pid, np.uint64(first_block), nblocks, out)
        return out[:, 0]

    def normals(self, count: int, start: int = 0) -> np.ndarray:
        """``count`` consecutive standard normals starting at variate ``start``."""
        first = start // 2
        last = (start + count + 1) // 2
        vals = self._blocks(first, max(last - first, 0))
        off = start - 2 * first
        return vals[off : off + count]

    def increments(self, step: int, dim: int, dt: float) -> np.ndarray:
        """Brownian increment ``sqrt(dt) * xi`` used at integer step ``step``."""
        nb = (dim + 1) // 2
        xi = self._blocks(step * nb, nb)[:dim]
        return math.sqrt(dt) * xi

    def uniforms(self, dim: int) -> np.ndarray:
        out = np.empty((dim, 1))
        fill_uniforms(self._key[0], self._key[1], self._pid, dim, out)
        return out[:, 0]


def derive_particle_rng(master_seed: int, particle_index: int) -> ParticleStream:
    return ParticleStream(master_seed, particle_index)
