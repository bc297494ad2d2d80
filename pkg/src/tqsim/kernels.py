"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``TQSIM_DISABLE_NUMBA=1`` to force the numpy implementations. Both paths
produce bit-identical results; ``tests/test_kernels.py`` checks this and
``benchmarks/bench_kernels.py`` compares their speed.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("TQSIM_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------

def round_half_away_np(v):
    """Round half away from zero: 0.5 -> 1, -0.5 -> -1, 2.5 -> 3.

    ``v - trunc(v)`` is exact, so values just below a half (0.49999999999999994)
    are not pushed over it the way ``floor(|v| + 0.5)`` would.
    """
    t = np.trunc(v)
    return t + np.where(np.abs(v - t) >= 0.5, np.sign(v), 0.0)


def quantize_np(x2d, scale, zero_point, qmax):
    """clip(round(x / s) + z, 0, qmax) with per-column ``scale``/``zero_point``."""
    v = x2d / scale
    q = round_half_away_np(v) + zero_point
    np.clip(q, 0.0, float(qmax), out=q)
    return q.astype(np.int64)


def int_matmul_np(a, b):
    """Integer ``a @ b.T`` with int64 accumulation, no floating point."""
    return np.matmul(a.astype(np.int64, copy=False), b.astype(np.int64, copy=False).T)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _quantize_nb(x2d, scale, zero_point, qmax):
        n, d = x2d.shape
        out = np.empty((n, d), dtype=np.int64)
        fq = float(qmax)
        for i in range(n):
            for j in range(d):
                v = x2d[i, j] / scale[j]
                r = np.trunc(v)
                if abs(v - r) >= 0.5:
                    r += 1.0 if v > 0.0 else -1.0
                q = r + zero_point[j]
                if q < 0.0:
                    q = 0.0
                elif q > fq:
                    q = fq
                out[i, j] = np.int64(q)
        return out

    @numba.njit(cache=True)
    def _int_matmul_nb(a, b):
        m, k = a.shape
        n = b.shape[0]
        out = np.zeros((m, n), dtype=np.int64)
        for i in range(m):
            for r in range(n):
                acc = np.int64(0)
                for j in range(k):
                    acc += a[i, j] * b[r, j]
                out[i, r] = acc
        return out


def quantize_2d(x2d, scale, zero_point, qmax, use_numba=None):
    """Quantize a 2-D float64 array with per-column parameters."""
    x2d = np.ascontiguousarray(x2d, dtype=np.float64)
    scale = np.ascontiguousarray(np.broadcast_to(scale, (x2d.shape[1],)), dtype=np.float64)
    zero_point = np.ascontiguousarray(np.broadcast_to(zero_point, (x2d.shape[1],)), dtype=np.float64)
    if USE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA):
        return _quantize_nb(x2d, scale, zero_point, int(qmax))
    return quantize_np(x2d, scale, zero_point, qmax)


def int_matmul(a, b, use_numba=None):
    """Integer product ``a @ b.T`` for 2-D integer arrays, int64 accumulation."""
    if USE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA):
        return _int_matmul_nb(np.ascontiguousarray(a, dtype=np.int64),
                              np.ascontiguousarray(b, dtype=np.int64))
    return int_matmul_np(a, b)


def backend():
    return "numba" if USE_NUMBA else "numpy"
