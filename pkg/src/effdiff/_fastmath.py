"""Branch-free elementary functions that LLVM can vectorize inside numba loops.

numba lowers ``math.sin`` and friends to libm calls, which blocks loop
vectorization across particles. The routines here are the classic fdlibm
kernels (Cody-Waite reduction plus minimax polynomials), written with selects
instead of branches. Accuracy is within 1-2 ulp of libm for the argument ranges
met in tracer runs (|x| < 1e8 for the trig functions).
"""

from __future__ import annotations

import numpy as np
from numba import njit, types
from numba.extending import intrinsic

_JIT = dict(inline="always", error_model="numpy", cache=True)


@intrinsic
def f64_as_i64(typingctx, x):
    sig = types.int64(types.float64)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.int64))

    return sig, codegen


@intrinsic
def i64_as_f64(typingctx, x):
    sig = types.float64(types.int64)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.float64))

    return sig, codegen


_INVPIO2 = 6.36619772367581382433e-01
# pi/2 split so that n * _PIO2_1 and n * _PIO2_2 are exact for |n| < 2**20
_PIO2_1 = 1.57079632673412561417e00
_PIO2_2 = 6.07710050630396597660e-11
_PIO2_3 = 2.02226624871116645580e-21

_S1 = -1.66666666666666324348e-01
_S2 = 8.33333333332248946124e-03
_S3 = -1.98412698298579493134e-04
_S4 = 2.75573137070700676789e-06
_S5 = -2.50507602534068634195e-08
_S6 = 1.58969099521155010221e-10

_C1 = 4.16666666666666019037e-02
_C2 = -1.38888888888741095749e-03
_C3 = 2.48015872894767294178e-05
_C4 = -2.75573143513906633035e-07
_C5 = 2.08757232129817482790e-09
_C6 = -1.13596475577881948265e-11

_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INVLN2 = 1.44269504088896338700e00

_LG1 = 6.666666666666735130e-01
_LG2 = 3.999999999940941908e-01
_LG3 = 2.857142874366239149e-01
_LG4 = 2.222219843214978396e-01
_LG5 = 1.818357216161805012e-01
_LG6 = 1.531383769920937332e-01
_LG7 = 1.479819860511658591e-01

_P1 = 1.66666666666666019037e-01
_P2 = -2.77777777770155933842e-03
_P3 = 6.61375632143793436117e-05
_P4 = -1.65339022054652515390e-06
_P5 = 4.13813679705723846039e-08


@njit(**_JIT)
def _ksin(x):
    z = x * x
    v = z * x
    r = _S2 + z * (_S3 + z * (_S4 + z * (_S5 + z * _S6)))
    return x + v * (_S1 + z * r)


@njit(**_JIT)
def _kcos(x):
    z = x * x
    r = z * (_C1 + z * (_C2 + z * (_C3 + z * (_C4 + z * (_C5 + z * _C6)))))
    hz = 0.5 * z
    w = 1.0 - hz
    return w + (((1.0 - w) - hz) + z * r)


@njit(**_JIT)
def sincos(x):
    """Return ``(sin(x), cos(x))`` with a shared argument reduction."""
    fn = np.floor(x * _INVPIO2 + 0.5)
    # quadrant kept in floating point; an int select chain defeats the vectorizer
    q = fn - 4.0 * np.floor(fn * 0.25)
    r = ((x - fn * _PIO2_1) - fn * _PIO2_2) - fn * _PIO2_3
    s = _ksin(r)
    c = _kcos(r)
    so = s if q == 0.0 else (c if q == 1.0 else (-s if q == 2.0 else -c))
    co = c if q == 0.0 else (-s if q == 1.0 else (-c if q == 2.0 else s))
    return so, co


@njit(**_JIT)
def sin(x):
    return sincos(x)[0]


@njit(**_JIT)
def cos(x):
    return sincos(x)[1]


@njit(**_JIT)
def exp(x):
    """exp for |x| < 700; no overflow or subnormal handling."""
    kf = np.floor(x * _INVLN2 + 0.5)
    hi = x - kf * _LN2_HI
    lo = kf * _LN2_LO
    r = hi - lo
    t = r * r
    c = r - t * (_P1 + t * (_P2 + t * (_P3 + t * (_P4 + t * _P5))))
    y = 1.0 - ((lo - (r * c) / (2.0 - c)) - hi)
    return y * i64_as_f64((np.int64(kf) + 1023) << 52)


@njit(**_JIT)
def log(x):
    """Natural log for positive normal doubles."""
    hx = f64_as_i64(x)
    k = (hx >> 52) - 1023
    m = hx & 0x000FFFFFFFFFFFFF
    # fold the mantissa into [sqrt(2)/2, sqrt(2))
    i = (m + 0x95F6400000000) & 0x10000000000000
    xn = i64_as_f64(m | (i ^ 0x3FF0000000000000))
    k = k + (i >> 52)
    f = xn - 1.0
    dk = np.float64(k)
    s = f / (2.0 + f)
    z = s * s
    w = z * z
    t1 = w * (_LG2 + w * (_LG4 + w * _LG6))
    t2 = z * (_LG1 + w * (_LG3 + w * (_LG5 + w * _LG7)))
    R = t2 + t1
    hfsq = 0.5 * f * f
    return dk * _LN2_HI - ((hfsq - (s * (hfsq + R) + dk * _LN2_LO)) - f)
