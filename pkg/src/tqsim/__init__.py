"""Quantization simulation toolkit for transformer encoders."""

from .quant import (PerEmbedding, PerEmbeddingGroup, PerTensor, QParams, QTensor, VectorQParams,
                    dequantize, fake_quantize, lsq_backward_scale, params_from_range, quantize,
                    ste_backward_input)
from .estimators import RangeEstimator
from .peg import GroupSpec, build_range_permutation, peg_overhead

__version__ = "0.1.0"
