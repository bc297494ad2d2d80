"""Integer-arithmetic matmul and residual-add kernels.

Three matmul paths with different rescaling cost:

* per-tensor activations: one integer inner product, one rescale by
  ``s_w * s_x`` of the whole accumulator;
* per-embedding activations: every term is rescaled by its own ``s_x[j]``
  (``d`` rescales);
* per-embedding-group activations: ``K`` partial integer products, each
  rescaled once (``K`` rescales).

Weights are per-tensor. Zero-points are folded with precomputed weight row
sums so the per-tensor inner product stays integer-only.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .quant import PerEmbeddingGroup, QParams, QTensor, VectorQParams, dequantize, quantize

INT32_MIN = -(2 ** 31)
INT32_MAX = 2 ** 31 - 1
CHECK = "check"
SATURATE = "saturate"


class AccumulatorOverflow(OverflowError):
    pass


class KernelError(ValueError):
    pass


@dataclass
class RescaleCounter:
    rescale_ops: int = 0

    def add(self, n):
        self.rescale_ops += int(n)


def max_safe_inner_dim(w_bits=8, x_bits=8):
    """Largest inner dimension for which no int32 overflow is possible.

    Worst case per term is ``2**(w_bits-1) * (2**x_bits - 1)`` (signed weight
    magnitude times the full unsigned activation span).
    """
    per_term = (1 << (w_bits - 1)) * ((1 << x_bits) - 1)
    return INT32_MAX // per_term


def _accumulate(acc, overflow):
    if overflow == CHECK:
        if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
            bad = np.unravel_index(np.argmax((acc < INT32_MIN) | (acc > INT32_MAX)), acc.shape)
            raise AccumulatorOverflow(f"int32 accumulator overflow at index {tuple(int(i) for i in bad)}")
        return acc
    if overflow == SATURATE:
        return np.clip(acc, INT32_MIN, INT32_MAX)
    raise KernelError(f"overflow policy must be {CHECK!r} or {SATURATE!r}")


def _centered_weight(W):
    if not isinstance(W.params, QParams):
        raise KernelError("weights must be quantized per-tensor")
    return W.int_data.astype(np.int64) - W.params.zero_point


def _int_product(xq, zx, Wc, overflow):
    """sum_j Wc[i, j] * (xq[j] - zx) with the zero-point folded via row sums."""
    lead = xq.shape[:-1]
    x2 = xq.reshape(-1, xq.shape[-1])
    raw = _accumulate(kernels.int_matmul(x2, Wc), overflow)
    if zx:
        fold = _accumulate(zx * Wc.sum(axis=1), overflow)
        raw = _accumulate(raw - fold, overflow)
    return raw.reshape(*lead, Wc.shape[0])


def qmatmul_per_tensor(W, x, counter=None, overflow=CHECK):
    """Integer accumulator and combined scale ``s_w * s_x`` for ``W @ x``.

    ``acc * combined_scale`` is the real product of the de-quantized operands.
    """
    if not isinstance(x.params, QParams):
        raise KernelError("qmatmul_per_tensor needs per-tensor activation params")
    Wc = _centered_weight(W)
    if Wc.shape[1] != x.shape[-1]:
        raise KernelError(f"inner dims differ: W {W.shape}, x {x.shape}")
    acc = _int_product(x.int_data, x.params.zero_point, Wc, overflow)
    if counter is not None:
        counter.add(1)
    return acc, W.params.scale * x.params.scale


def qmatmul_per_embedding(W, x, counter=None):
    """``W @ x`` where every activation dimension carries its own scale."""
    if not isinstance(x.params, VectorQParams):
        raise KernelError("qmatmul_per_embedding needs vector activation params")
    Wc = _centered_weight(W)
    d = x.shape[-1]
    if Wc.shape[1] != d:
        raise KernelError(f"inner dims differ: W {W.shape}, x {x.shape}")
    s, z = x.params.lastdim(d)
    xc = x.int_data.astype(np.int64) - z.astype(np.int64)
    rescaled = xc * s  # one rescale per embedding dimension
    if counter is not None:
        counter.add(d)
    return W.params.scale * (rescaled @ Wc.T.astype(np.float64))


def qmatmul_peg(W, x, counter=None, overflow=CHECK):
    """``W @ x`` with per-embedding-group activations: K integer partials, K rescales."""
    p = x.params
    if not (isinstance(p, VectorQParams) and isinstance(p.granularity, PerEmbeddingGroup)):
        raise KernelError("qmatmul_peg needs per-embedding-group activation params")
    spec = p.granularity.spec
    Wc = _centered_weight(W)
    if Wc.shape[1] != x.shape[-1] or spec.d != x.shape[-1]:
        raise KernelError(f"inner dims differ: W {W.shape}, x {x.shape}, groups d={spec.d}")
    out = None
    for g in range(spec.k):
        idx = spec.group_indices(g)
        acc = _int_product(x.int_data[..., idx], int(p.zero_point[g]), Wc[:, idx], overflow)
        part = acc * (W.params.scale * float(p.scale[g]))
        out = part if out is None else out + part
    if counter is not None:
        counter.add(spec.k)
    return out


def requantize(value, target, scale=None):
    """Map an accumulator (times ``scale``) or a real tensor onto ``target``'s grid."""
    real = np.asarray(value, dtype=np.float64)
    if scale is not None:
        real = real * scale
    return quantize(real, target)


def qadd_residual(a, b, target):
    """De-quantize both operands, add in real arithmetic, requantize to ``target``."""
    if a.shape != b.shape:
        raise KernelError(f"residual operands differ in shape: {a.shape} vs {b.shape}")
    return quantize(dequantize(a) + dequantize(b), target)


__all__ = ["RescaleCounter", "AccumulatorOverflow", "KernelError", "qmatmul_per_tensor",
           "qmatmul_per_embedding", "qmatmul_peg", "requantize", "qadd_residual",
           "max_safe_inner_dim", "QTensor"]
