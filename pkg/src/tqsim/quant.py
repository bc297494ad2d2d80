"""Uniform affine quantization on an unsigned integer grid.

    x_int = clip(round(x / s) + z, 0, 2**b - 1)
    x_hat = s * (x_int - z)

Rounding is half-away-from-zero everywhere. Symmetric quantizers use the
grid midpoint ``z = 2**(b-1)``, i.e. the signed grid ``[-2**(b-1), 2**(b-1)-1]``.

Parameters come at three granularities along the last tensor dimension:
:class:`PerTensor`, :class:`PerEmbedding` and :class:`PerEmbeddingGroup`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

ALLOWED_BITS = (2, 3, 4, 6, 8, 16)
DEFAULT_EPS = 1e-8


class QuantError(ValueError):
    pass


def qmax_for(bits):
    return (1 << bits) - 1


@dataclass(frozen=True)
class QParams:
    """Per-tensor quantization grid: bit-width, scale, integer zero-point."""

    bit_width: int
    scale: float
    zero_point: int
    symmetric: bool = False

    def __post_init__(self):
        if self.bit_width not in ALLOWED_BITS:
            raise QuantError(f"bit_width must be one of {ALLOWED_BITS}, got {self.bit_width}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise QuantError(f"scale must be a positive finite number, got {self.scale}")
        if int(self.zero_point) != self.zero_point or not 0 <= self.zero_point <= self.qmax:
            raise QuantError(f"zero_point must be an integer in [0, {self.qmax}], got {self.zero_point}")
        if self.symmetric and self.zero_point != 1 << (self.bit_width - 1):
            raise QuantError("symmetric grids use zero_point = 2**(b-1)")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def qmax(self):
        return qmax_for(self.bit_width)

    @property
    def num_params(self):
        return 1

    def lastdim(self, d):
        return np.full(1, self.scale), np.full(1, float(self.zero_point))

    def with_scale(self, scale):
        return QParams(self.bit_width, float(scale), self.zero_point, self.symmetric)

    def to_dict(self):
        return {"bit_width": self.bit_width, "scale": self.scale,
                "zero_point": self.zero_point, "symmetric": self.symmetric}


# -- granularity -----------------------------------------------------------

@dataclass(frozen=True)
class PerTensor:
    def size(self):
        return 1

    def param_index(self, d):
        return np.zeros(d, dtype=np.int64)

    def to_dict(self):
        return {"kind": "tensor"}


@dataclass(frozen=True)
class PerEmbedding:
    d: int

    def size(self):
        return self.d

    def param_index(self, d):
        if d != self.d:
            raise QuantError(f"per-embedding params for d={self.d} applied to last dim {d}")
        return np.arange(d, dtype=np.int64)

    def to_dict(self):
        return {"kind": "embedding", "d": self.d}


@dataclass(frozen=True)
class PerEmbeddingGroup:
    """One parameter set per group of a :class:`tqsim.peg.GroupSpec`."""

    spec: object

    def size(self):
        return self.spec.k

    def param_index(self, d):
        if d != self.spec.d:
            raise QuantError(f"group spec for d={self.spec.d} applied to last dim {d}")
        return self.spec.group_of

    def to_dict(self):
        return {"kind": "peg", "spec": self.spec.to_dict()}


@dataclass(frozen=True, eq=False)
class VectorQParams:
    """Per-embedding or per-embedding-group parameters (vectors of length d or K)."""

    bit_width: int
    scale: np.ndarray
    zero_point: np.ndarray
    symmetric: bool
    granularity: object = field(default_factory=PerTensor)

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        zp = np.asarray(self.zero_point)
        if np.any(zp != np.round(zp)):
            raise QuantError("zero points must be integers")
        zp = zp.astype(np.int64).reshape(-1)
        if self.bit_width not in ALLOWED_BITS:
            raise QuantError(f"bit_width must be one of {ALLOWED_BITS}, got {self.bit_width}")
        n = self.granularity.size()
        if scale.shape != (n,) or zp.shape != (n,):
            raise QuantError(f"expected {n} scales/zero-points for {self.granularity}, "
                             f"got {scale.shape[0]} and {zp.shape[0]}")
        if not np.all(np.isfinite(scale) & (scale > 0)):
            raise QuantError("scales must be positive and finite")
        if np.any((zp < 0) | (zp > self.qmax)):
            raise QuantError(f"zero points must lie in [0, {self.qmax}]")
        if self.symmetric and np.any(zp != 1 << (self.bit_width - 1)):
            raise QuantError("symmetric grids use zero_point = 2**(b-1)")
        scale.flags.writeable = False
        zp.flags.writeable = False
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)

    @property
    def qmax(self):
        return qmax_for(self.bit_width)

    @property
    def num_params(self):
        return self.scale.shape[0]

    def lastdim(self, d):
        idx = self.granularity.param_index(d)
        return self.scale[idx], self.zero_point[idx].astype(np.float64)

    def with_scale(self, scale):
        return VectorQParams(self.bit_width, np.asarray(scale, dtype=np.float64),
                             self.zero_point, self.symmetric, self.granularity)

    def group(self, g):
        """Per-tensor :class:`QParams` of parameter slot ``g``."""
        return QParams(self.bit_width, float(self.scale[g]), int(self.zero_point[g]), self.symmetric)

    def __eq__(self, other):
        if not isinstance(other, VectorQParams):
            return NotImplemented
        return (self.bit_width == other.bit_width and self.symmetric == other.symmetric
                and self.granularity == other.granularity
                and np.array_equal(self.scale, other.scale)
                and np.array_equal(self.zero_point, other.zero_point))

    def to_dict(self):
        return {"bit_width": self.bit_width, "scale": self.scale.tolist(),
                "zero_point": self.zero_point.tolist(), "symmetric": self.symmetric,
                "granularity": self.granularity.to_dict()}


@dataclass(frozen=True, eq=False)
class QTensor:
    int_data: np.ndarray
    params: object

    @property
    def shape(self):
        return self.int_data.shape


# -- parameter derivation ----------------------------------------------------

def params_from_range(lo, hi, bits, symmetric=False, eps=DEFAULT_EPS):
    """QParams covering the observed range ``[lo, hi]``.

    The range is widened to contain zero. A constant non-zero range gets a
    power-of-two fraction of ``|c|`` as scale so the constant is exactly
    representable; an all-zero range falls back to ``scale = eps``.
    """
    lo, hi = float(lo), float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise QuantError(f"invalid range [{lo}, {hi}]")
    qmax = qmax_for(bits)
    half = 1 << (bits - 1)
    if lo == hi and lo != 0.0:
        c = lo
        if symmetric:
            return QParams(bits, abs(c) / (1 << max(bits - 2, 0)), half, True)
        return QParams(bits, abs(c) / half, 0 if c > 0 else qmax, False)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if symmetric:
        m = max(-lo, hi)
        s = m / (half - 1) if m > 0 else eps
        return QParams(bits, s, half, True)
    s = (hi - lo) / qmax if hi > lo else eps
    z = int(np.clip(kernels.round_half_away_np(-lo / s), 0, qmax))
    return QParams(bits, s, z, False)


def vector_params_from_range(lo, hi, bits, symmetric, granularity, eps=DEFAULT_EPS):
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    ps = [params_from_range(a, b, bits, symmetric, eps) for a, b in zip(lo, hi)]
    return VectorQParams(bits, np.array([p.scale for p in ps]),
                         np.array([p.zero_point for p in ps]), symmetric, granularity)


def grid_span(p):
    """Real interval ``[s*(0-z), s*(qmax-z)]`` representable by ``p`` (per slot)."""
    s, z = np.asarray(p.scale), np.asarray(p.zero_point)
    return s * (0 - z), s * (p.qmax - z)


# -- forward -----------------------------------------------------------------

def _check(x, p):
    if not isinstance(p, (QParams, VectorQParams)):
        raise QuantError(f"expected QParams or VectorQParams, got {type(p).__name__}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1)
    return x


def quantize(x, p):
    x = _check(x, p)
    if np.isnan(x).any():
        raise QuantError("cannot quantize NaN values")
    d = x.shape[-1]
    s, z = p.lastdim(d)
    q = kernels.quantize_2d(x.reshape(-1, d), s, z, p.qmax)
    return QTensor(q.reshape(x.shape), p)


def dequantize(q):
    p = q.params
    s, z = p.lastdim(q.shape[-1])
    return s * (q.int_data - z)


def fake_quantize(x, p):
    """Quantize then de-quantize, returning float64. NaNs pass through."""
    x_arr = np.asarray(x, dtype=np.float64)
    nan = np.isnan(x_arr)
    if nan.any():
        out = dequantize(quantize(np.where(nan, 0.0, x_arr), p))
        return np.where(nan, np.nan, out.reshape(x_arr.shape))
    out = dequantize(quantize(x_arr, p))
    return out.reshape(x_arr.shape)


# -- backward ----------------------------------------------------------------

def _grid_coords(x, p):
    x = _check(x, p)
    s, z = p.lastdim(x.shape[-1])
    return x, x / s, s, z


def ste_backward_input(grad_out, x, p):
    """Straight-through gradient: pass where ``x/s + z`` lies in ``[0, qmax]``."""
    x, v, _, z = _grid_coords(x, p)
    grad_out = np.asarray(grad_out, dtype=np.float64).reshape(x.shape)
    u = v + z
    return np.where((u >= 0) & (u <= p.qmax), grad_out, 0.0)


def _scale_partials(x, p):
    x, v, _, z = _grid_coords(x, p)
    u = v + z
    inside = kernels.round_half_away_np(v) - v
    return x, np.where(u < 0, -z, np.where(u > p.qmax, p.qmax - z, inside))


def lsq_backward_scale(grad_out, x, p, grad_scale=False):
    """Learned-step-size gradient of the fake-quantized output w.r.t. the scale.

    Per element: ``round(x/s) - x/s`` inside the grid, ``-z`` below it and
    ``qmax - z`` above it, weighted by ``grad_out`` and summed per parameter
    slot. With ``grad_scale`` the sum is multiplied by ``1/sqrt(N * Q)`` where
    ``Q`` is the largest positive grid level.
    """
    x, partial = _scale_partials(x, p)
    g = np.asarray(grad_out, dtype=np.float64).reshape(x.shape) * partial
    if isinstance(p, QParams):
        total = float(g.sum())
    else:
        idx = p.granularity.param_index(x.shape[-1])
        per_dim = g.reshape(-1, x.shape[-1]).sum(axis=0)
        total = np.bincount(idx, weights=per_dim, minlength=p.num_params)
    if grad_scale:
        q_pos = (1 << (p.bit_width - 1)) - 1 if p.symmetric else p.qmax
        total = total / np.sqrt(x.size * q_pos)
    return total


def fake_quantize_backward(grad_out, x, p, grad_scale=False):
    """(input gradient, scale gradient) for one fake-quantization site."""
    return ste_backward_input(grad_out, x, p), lsq_backward_scale(grad_out, x, p, grad_scale)
