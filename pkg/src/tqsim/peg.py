"""Per-embedding-group (PEG) activation quantization.

Builds the range-based permutation and group structure, and rewrites an FFN
block so that PEG quantization runs with per-tensor operations only: permute
the first LayerNorm's output, split the first linear's columns and the
second linear's rows by group, quantize every stream per-tensor, sum/concat,
and inverse-permute before the next LayerNorm.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .estimators import RangeEstimator
from .intops import RescaleCounter, qmatmul_peg, qmatmul_per_tensor
from .quant import (PerEmbeddingGroup, QParams, VectorQParams, dequantize, fake_quantize,
                    quantize)
from .tensor import per_embedding_min_max


class GroupSpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GroupSpec:
    """K evenly sized groups over the embedding dimensions, in permuted order.

    ``perm[p]`` is the original dimension placed at permuted position ``p``;
    group ``g`` owns permuted positions ``[g*d/K, (g+1)*d/K)``.
    """

    d: int
    k: int
    perm: np.ndarray = None
    ranges: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        d, k = int(self.d), int(self.k)
        if d < 1 or k < 1:
            raise GroupSpecError(f"d and K must be >= 1, got d={d}, K={k}")
        if d % k:
            raise GroupSpecError(f"K={k} does not divide d={d}")
        perm = np.arange(d) if self.perm is None else np.asarray(self.perm, dtype=np.int64)
        if perm.shape != (d,) or not np.array_equal(np.sort(perm), np.arange(d)):
            raise GroupSpecError("perm must be a permutation of range(d)")
        inv = np.empty(d, dtype=np.int64)
        inv[perm] = np.arange(d)
        perm = perm.copy()
        perm.flags.writeable = False
        inv.flags.writeable = False
        group_of = inv // (d // k)
        group_of.flags.writeable = False
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "inv_perm", inv)
        object.__setattr__(self, "group_of", group_of)

    @classmethod
    def identity(cls, d, k):
        return cls(d, k)

    @property
    def group_size(self):
        return self.d // self.k

    @property
    def boundaries(self):
        m = self.group_size
        return [(g * m, (g + 1) * m) for g in range(self.k)]

    @property
    def is_identity(self):
        return bool(np.array_equal(self.perm, np.arange(self.d)))

    def group_indices(self, g):
        m = self.group_size
        return self.perm[g * m:(g + 1) * m]

    def __eq__(self, other):
        if not isinstance(other, GroupSpec):
            return NotImplemented
        return self.d == other.d and self.k == other.k and np.array_equal(self.perm, other.perm)

    def __hash__(self):
        return hash((self.d, self.k, self.perm.tobytes()))

    def to_dict(self):
        out = {"d": self.d, "k": self.k, "perm": self.perm.tolist()}
        if self.ranges is not None:
            out["ranges"] = np.asarray(self.ranges).tolist()
        return out

    @classmethod
    def from_dict(cls, obj):
        ranges = obj.get("ranges")
        return cls(int(obj["d"]), int(obj["k"]), np.asarray(obj["perm"], dtype=np.int64),
                   None if ranges is None else np.asarray(ranges, dtype=np.float64))


def build_range_permutation(calib, k):
    """Sort embedding dimensions by calibration range ``max - min`` (ascending, stable).

    The largest-range dimensions end up in the last group. ``k=1`` keeps the
    identity order.
    """
    calib = np.asarray(calib, dtype=np.float64)
    lo, hi = per_embedding_min_max(calib)
    r = hi - lo
    if calib.shape[-1] % k:
        raise GroupSpecError(f"K={k} does not divide d={calib.shape[-1]}")
    # a single group needs no reordering
    perm = None if k == 1 else np.argsort(r, kind="stable")
    return GroupSpec(calib.shape[-1], k, perm, r)


def peg_overhead(d, k):
    """Extra parameters per attention layer: permutation indices plus scale and
    zero-point per group for the FFN input, output and residual sum."""
    if d < 1 or k < 1:
        raise GroupSpecError(f"d and K must be >= 1, got d={d}, K={k}")
    return d + 2 * 3 * k


def split_linear_by_input_groups(w, spec):
    """Column blocks of ``w`` (d_out, d); summing ``w_g @ x[group g]`` gives ``w @ x``."""
    w = np.asarray(w)
    if w.shape[1] != spec.d:
        raise GroupSpecError(f"weight has {w.shape[1]} input columns, groups cover d={spec.d}")
    return [w[:, spec.group_indices(g)] for g in range(spec.k)]


def split_linear_by_output_groups(w, spec, bias=None):
    """Row blocks of ``w`` (d, d_in) (and of ``bias``); concatenated outputs are
    ``w @ x`` in permuted order."""
    w = np.asarray(w)
    if w.shape[0] != spec.d:
        raise GroupSpecError(f"weight has {w.shape[0]} output rows, groups cover d={spec.d}")
    rows = [w[spec.group_indices(g), :] for g in range(spec.k)]
    if bias is None:
        return rows
    return rows, [np.asarray(bias)[spec.group_indices(g)] for g in range(spec.k)]


# -- FFN block ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FFNBlock:
    """LayerNorm -> Linear -> GELU -> Linear -> residual add -> LayerNorm.

    ``x0`` (the attention residual sum) enters the first LayerNorm; the block
    returns the output of the second LayerNorm. When ``perm`` is set, the
    parameters between the two LayerNorms live in permuted order and the
    residual sum is inverse-permuted before the second LayerNorm.
    """

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    perm: np.ndarray = None

    @property
    def d(self):
        return self.w1.shape[1]

    def __post_init__(self):
        d, dff = self.w1.shape[1], self.w1.shape[0]
        shapes = {"ln1_gamma": (d,), "ln1_beta": (d,), "b1": (dff,), "w2": (d, dff), "b2": (d,),
                  "ln2_gamma": (d,), "ln2_beta": (d,)}
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise GroupSpecError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @classmethod
    def random(cls, d, d_ff, rng, outlier_dims=(), magnitude=0.0):
        """Random block; rows of the second linear feeding ``outlier_dims`` are
        scaled by ``magnitude`` so those output dims get token-dependent outliers."""
        w2 = rng.standard_normal((d, d_ff)) / np.sqrt(d_ff)
        for i, j in enumerate(outlier_dims):
            w2[j] *= magnitude * (1 if i % 2 == 0 else -1)
        return cls(1.0 + 0.1 * rng.standard_normal(d), 0.1 * rng.standard_normal(d),
                   rng.standard_normal((d_ff, d)) / np.sqrt(d), 0.1 * rng.standard_normal(d_ff),
                   w2, 0.1 * rng.standard_normal(d),
                   1.0 + 0.1 * rng.standard_normal(d), 0.1 * rng.standard_normal(d))


def permute_layernorm_and_linears(block, spec):
    """Rewrite ``block`` into permuted form: LayerNorm-1 gain/bias and the
    second linear's rows/bias by ``perm``, the first linear's columns by ``perm``.

    Passing a permuted block undoes the permutation instead.
    """
    if block.d != spec.d:
        raise GroupSpecError(f"block width {block.d} does not match groups d={spec.d}")
    if block.perm is not None:
        if not np.array_equal(block.perm, spec.perm):
            raise GroupSpecError("block is permuted with a different permutation")
        inv = spec.inv_perm
        return replace(block, ln1_gamma=block.ln1_gamma[inv], ln1_beta=block.ln1_beta[inv],
                       w1=block.w1[:, inv], w2=block.w2[inv, :], b2=block.b2[inv], perm=None)
    p = spec.perm
    return replace(block, ln1_gamma=block.ln1_gamma[p], ln1_beta=block.ln1_beta[p],
                   w1=block.w1[:, p], w2=block.w2[p, :], b2=block.b2[p], perm=p.copy())


def _first_ln(block, x0):
    n = nn.normalize(x0)
    if block.perm is not None:
        n = n[..., block.perm]
    return n * block.ln1_gamma + block.ln1_beta


def _second_ln(block, s):
    if block.perm is not None:
        inv = np.empty_like(block.perm)
        inv[block.perm] = np.arange(block.perm.shape[0])
        s = np.ascontiguousarray(s[..., inv])
    return nn.layer_norm(s, block.ln2_gamma, block.ln2_beta)


def ffn_forward(block, x0, return_sites=False):
    """Full-precision forward of a (possibly permuted) block."""
    h = _first_ln(block, x0)
    f = nn.linear(nn.gelu(nn.linear(h, block.w1, block.b1)), block.w2, block.b2)
    s = h + f
    out = _second_ln(block, s)
    if return_sites:
        return out, {"ffn_input": h, "ffn_output": f, "residual_sum": s}
    return out


# -- quantized pipelines -------------------------------------------------------

@dataclass(frozen=True)
class FFNQuant:
    """Quantizers of one FFN block: grouped FFN input/output/sum, per-tensor rest."""

    w1: QParams
    w2: QParams
    ffn_input: VectorQParams
    hidden: QParams
    ffn_output: VectorQParams
    residual_sum: VectorQParams

    @property
    def spec(self):
        return self.ffn_input.granularity.spec


def calibrate_ffn_quant(block, spec, calib_x0, bits=8, w_bits=8):
    """Min-max ranges for every quantizer of an unpermuted block.

    Each grouped quantizer gets its own per-group ranges; all three share ``spec``.
    """
    if block.perm is not None:
        raise GroupSpecError("calibrate the unpermuted block")
    gran = PerEmbeddingGroup(spec)
    h = _first_ln(block, calib_x0)

    def est(x, g=None):
        return RangeEstimator("current_minmax", g).observe(x)

    q_w1 = est(block.w1).finalize(w_bits, symmetric=True)
    q_w2 = est(block.w2).finalize(w_bits, symmetric=True)
    q_in = est(h, gran).finalize(bits)
    h_hat = fake_quantize(h, q_in)
    u = nn.linear(h_hat, fake_quantize(block.w1, q_w1), block.b1)
    g = nn.gelu(u)
    q_hid = est(g).finalize(bits)
    f = nn.linear(fake_quantize(g, q_hid), fake_quantize(block.w2, q_w2), block.b2)
    q_out = est(f, gran).finalize(bits)
    s = h_hat + fake_quantize(f, q_out)
    q_sum = est(s, gran).finalize(bits)
    return FFNQuant(q_w1, q_w2, q_in, q_hid, q_out, q_sum)


def peg_ffn_forward_native(block, x0, qconf, counter=None):
    """Reference PEG pipeline on the unpermuted block with grouped quantizers."""
    if block.perm is not None:
        raise GroupSpecError("native pipeline expects the unpermuted block")
    counter = counter if counter is not None else RescaleCounter()
    h = _first_ln(block, x0)
    hq = quantize(h, qconf.ffn_input)
    u = qmatmul_peg(quantize(block.w1, qconf.w1), hq, counter) + block.b1
    gq = quantize(nn.gelu(u), qconf.hidden)
    acc, cs = qmatmul_per_tensor(quantize(block.w2, qconf.w2), gq, counter)
    f = acc * cs + block.b2
    s = dequantize(hq) + fake_quantize(f, qconf.ffn_output)
    return _second_ln(block, fake_quantize(s, qconf.residual_sum))


def peg_ffn_forward_per_tensor(block, spec, qconf, x0, counter=None):
    """PEG pipeline using only per-tensor quantizers on a permuted block.

    Each of the K embedding groups is its own stream: quantized per-tensor,
    multiplied by its column block of the first linear (partials summed),
    produced by its row block of the second linear, residual-added and
    quantized per-tensor, then concatenated and inverse-permuted.
    """
    if block.perm is None or not np.array_equal(block.perm, spec.perm):
        raise GroupSpecError("per-tensor PEG pipeline expects the block permuted by spec.perm")
    if qconf.spec != spec:
        raise GroupSpecError("quantizer groups do not match spec")
    counter = counter if counter is not None else RescaleCounter()
    k, m = spec.k, spec.group_size
    h = _first_ln(block, x0)
    w1q = quantize(block.w1, qconf.w1)
    w2q = quantize(block.w2, qconf.w2)

    h_streams = []
    u = None
    for g in range(k):
        sl = slice(g * m, (g + 1) * m)
        hq_g = quantize(h[..., sl], qconf.ffn_input.group(g))
        h_streams.append(hq_g)
        w1q_g = type(w1q)(w1q.int_data[:, sl], w1q.params)
        acc, cs = qmatmul_per_tensor(w1q_g, hq_g, counter)
        part = acc * cs
        u = part if u is None else u + part
    u = u + block.b1
    gq = quantize(nn.gelu(u), qconf.hidden)

    out_streams = []
    for g in range(k):
        sl = slice(g * m, (g + 1) * m)
        w2q_g = type(w2q)(w2q.int_data[sl, :], w2q.params)
        acc, cs = qmatmul_per_tensor(w2q_g, gq, counter)
        f_g = acc * cs + block.b2[sl]
        s_g = dequantize(h_streams[g]) + fake_quantize(f_g, qconf.ffn_output.group(g))
        out_streams.append(fake_quantize(s_g, qconf.residual_sum.group(g)))
    return _second_ln(block, np.concatenate(out_streams, axis=-1))


def ffn_quantization_mse(block, x0, qconf):
    """Mean squared error of the quantized residual sum against full precision."""
    if block.perm is not None:
        raise GroupSpecError("expects the unpermuted block")
    _, sites = ffn_forward(block, x0, return_sites=True)
    h = _first_ln(block, x0)
    h_hat = fake_quantize(h, qconf.ffn_input)
    f = nn.linear(nn.gelu(nn.linear(h_hat, fake_quantize(block.w1, qconf.w1), block.b1)),
                  fake_quantize(block.w2, qconf.w2), block.b2)
    s_hat = fake_quantize(h_hat + fake_quantize(f, qconf.ffn_output), qconf.residual_sum)
    return float(np.mean((s_hat - sites["residual_sum"]) ** 2))
