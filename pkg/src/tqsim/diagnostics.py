"""Outlier and range diagnostics for dumped activation tensors ``(S, T, d)``."""

from dataclasses import dataclass

import numpy as np


class DiagnosticsError(ValueError):
    pass


@dataclass
class OutlierReport:
    cells: np.ndarray       # (n, 3) int64 rows (seq, token, dim), sorted
    dim_hits: np.ndarray    # flagged cells per embedding dim
    dim_seqs: np.ndarray    # sequences in which each dim is flagged at least once
    sigma: float
    pooled: bool
    num_cells: int

    @property
    def flagged_dims(self):
        return np.flatnonzero(self.dim_hits)


def _rank3(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise DiagnosticsError(f"expected a rank-3 (seq, token, dim) tensor, got rank {t.ndim}")
    if t.size == 0:
        raise DiagnosticsError("empty tensor")
    return t


def find_outliers(t, sigma=6.0, pooled=False):
    """Cells with ``|x - mean| > sigma * std``.

    Mean and (population) std are taken per sequence over its ``(T, d)``
    slice, or over the whole tensor with ``pooled=True``.
    """
    t = _rank3(t)
    if sigma < 0:
        raise DiagnosticsError("sigma must be non-negative")
    axes = None if pooled else (1, 2)
    mean = t.mean(axis=axes, keepdims=True)
    std = t.std(axis=axes, keepdims=True)
    with np.errstate(invalid="ignore"):
        hit = np.abs(t - mean) > sigma * std
    cells = np.argwhere(hit).astype(np.int64)
    return OutlierReport(cells, hit.sum(axis=(0, 1)).astype(np.int64),
                         hit.any(axis=1).sum(axis=0).astype(np.int64), float(sigma), pooled, t.size)


def token_ranges(t):
    """Rows ``(seq, token, min, max)`` with min/max over the embedding dimension."""
    t = _rank3(t)
    s, n, _ = t.shape
    seq, tok = np.meshgrid(np.arange(s), np.arange(n), indexing="ij")
    return seq.ravel(), tok.ravel(), t.min(axis=2).ravel(), t.max(axis=2).ravel()


def sqnr_db(x, xq):
    """Signal-to-quantization-noise ratio in dB (inf when exact)."""
    x = np.asarray(x, dtype=np.float64)
    noise = float(np.sum((x - np.asarray(xq, dtype=np.float64)) ** 2))
    signal = float(np.sum(x * x))
    if noise == 0.0:
        return float("inf")
    if signal == 0.0:
        return float("-inf")
    return 10.0 * np.log10(signal / noise)
