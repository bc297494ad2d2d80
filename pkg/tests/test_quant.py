import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import central_diff, quantize_array, round_half_away, surrogate_fq
from tqsim.kernels import round_half_away_np
from tqsim.quant import (ALLOWED_BITS, PerEmbedding, PerEmbeddingGroup, PerTensor, QParams, QuantError,
                         VectorQParams, dequantize, fake_quantize, grid_span, lsq_backward_scale,
                         params_from_range, quantize, ste_backward_input, vector_params_from_range)
from tqsim.peg import GroupSpec

bits_st = st.sampled_from(ALLOWED_BITS)


@st.composite
def qparams(draw, symmetric=None):
    b = draw(bits_st)
    sym = draw(st.booleans()) if symmetric is None else symmetric
    s = draw(st.floats(1e-4, 10.0))
    z = 1 << (b - 1) if sym else draw(st.integers(0, (1 << b) - 1))
    return QParams(b, s, z, sym)


values = hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3))


def test_rounding_ties_away_from_zero():
    v = np.array([0.5, -0.5, 1.5, -1.5, 2.5, -2.5, 0.49999999999999994])
    assert round_half_away_np(v).tolist() == [1, -1, 2, -2, 3, -3, 0]
    assert [round_half_away(x) for x in v] == [1, -1, 2, -2, 3, -3, 0]


def test_quantize_examples():
    assert quantize(0.0, QParams(8, 0.1, 0)).int_data.tolist() == [0]
    assert quantize(1.27, QParams(8, 0.01, 0)).int_data.tolist() == [127]
    x = np.random.default_rng(0).uniform(-3, 3, 256)
    p = QParams(8, 6 / 255, 128)
    assert np.array_equal(quantize(x, p).int_data, quantize_array(x, 6 / 255, 128, 8))


def test_dequantize_examples():
    from tqsim.quant import QTensor
    assert dequantize(QTensor(np.array([0]), QParams(8, 0.1, 0))).tolist() == [0.0]
    val = dequantize(QTensor(np.array([255]), QParams(8, 6 / 255, 128)))[0]
    assert val == pytest.approx(6 * 127 / 255)
    assert val == pytest.approx(2.988, abs=1e-3)


def test_qparams_validation():
    with pytest.raises(QuantError):
        QParams(8, 0.0, 0)
    with pytest.raises(QuantError):
        QParams(8, -1.0, 0)
    with pytest.raises(QuantError):
        QParams(5, 1.0, 0)
    with pytest.raises(QuantError):
        QParams(8, 1.0, 256)
    with pytest.raises(QuantError):
        QParams(8, 1.0, 3, symmetric=True)


def test_params_from_range_formulas():
    p = params_from_range(-1.0, 3.0, 8)
    assert p.scale == 4.0 / 255 and p.zero_point == round_half_away(1.0 / (4.0 / 255))
    p = params_from_range(-2.0, 1.0, 4, symmetric=True)
    assert p.scale == 2.0 / 7 and p.zero_point == 8
    # positive-only range is widened to include zero
    p = params_from_range(2.0, 5.0, 8)
    assert p.zero_point == 0 and p.scale == 5.0 / 255
    with pytest.raises(QuantError):
        params_from_range(1.0, 0.0, 8)


@pytest.mark.parametrize("c", [0.0, 1.0, -3.7, 1e-3, 12345.678])
@pytest.mark.parametrize("bits", ALLOWED_BITS)
@pytest.mark.parametrize("sym", [False, True])
def test_constant_tensor_is_lossless(c, bits, sym):
    x = np.full(7, c)
    p = params_from_range(c, c, bits, sym)
    assert np.array_equal(fake_quantize(x, p), x)


def test_per_embedding_vs_per_tensor_tradeoff():
    x = np.array([[[0.1, 0.2, 40.0, 41.0]]])
    lo, hi = x.reshape(-1, 4).min(0), x.reshape(-1, 4).max(0)
    pe = vector_params_from_range(lo, hi, 8, False, PerEmbedding(4))
    err = np.abs(fake_quantize(x, pe) - x)[0, 0]
    assert np.all(err <= pe.scale / 2 + 1e-15)
    pt = params_from_range(x.min(), x.max(), 8)
    assert pt.scale == pytest.approx(41.0 / 255)  # range widened to include 0
    err_t = np.abs(fake_quantize(x, pt) - x)[0, 0]
    assert np.all(err_t <= pt.scale / 2 + 1e-15)
    assert err_t[:2].max() > 10 * err[:2].max()


def test_granularity_mismatch():
    p = VectorQParams(8, np.ones(4), np.zeros(4, dtype=int), False, PerEmbedding(4))
    with pytest.raises(QuantError):
        fake_quantize(np.zeros((2, 5)), p)


def test_ste_examples():
    p = QParams(8, 0.1, 0)
    assert ste_backward_input(np.ones(3), np.array([0.5, 1.0, 20.0]), p).tolist() == [1, 1, 1]
    assert ste_backward_input(np.ones(2), np.array([1e3, -5.0]), p).tolist() == [0, 0]


def test_lsq_examples():
    p = QParams(8, 0.25, 0)
    assert lsq_backward_scale(np.ones(4), np.array([0.0, 0.25, 1.0, 2.5]), p) == 0.0
    assert lsq_backward_scale(np.ones(1), np.array([1e3]), p) == 255.0
    q = QParams(8, 0.25, 10)
    assert lsq_backward_scale(np.ones(1), np.array([-1e3]), q) == -10.0


def test_lsq_grad_scale_flag():
    x = np.random.default_rng(2).uniform(-2, 2, 50)
    p = QParams(4, 0.3, 7)
    g = lsq_backward_scale(np.ones(50), x, p)
    assert lsq_backward_scale(np.ones(50), x, p, grad_scale=True) == pytest.approx(g / np.sqrt(50 * 15))


def _sample_outside_band(rng, p, n, band=0.01):
    # excluded: near rounding ties, and within half a step of either clip edge
    # (the mask tests x/s + z while the grid clips round(x/s) + z)
    lo, hi = grid_span(p)
    span = hi - lo
    out = []
    while len(out) < n:
        x = rng.uniform(lo - 0.2 * span, hi + 0.2 * span)
        v = x / p.scale
        u = v + p.zero_point
        if abs(v - round_half_away(v)) > band and abs(u) > 0.5 + band and abs(u - p.qmax) > 0.5 + band:
            out.append(x)
    return np.array(out)


@pytest.mark.parametrize("bits,sym", [(8, False), (4, True), (2, False), (16, False)])
def test_ste_and_lsq_match_finite_differences(bits, sym):
    rng = np.random.default_rng(bits)
    p = params_from_range(-1.3, 2.1, bits, sym)
    xs = _sample_outside_band(rng, p, 200)
    s, z, qmax = p.scale, p.zero_point, p.qmax
    for x in xs:
        d0 = round_half_away(x / s) - x / s
        hx, hs = 1e-4 * s, 1e-5 * s
        fd_x = central_diff(lambda t: surrogate_fq(t, s, z, qmax, d0), x, hx)
        fd_s = central_diff(lambda t: surrogate_fq(x, t, z, qmax, d0), s, hs)
        g_x = ste_backward_input(np.ones(1), np.array([x]), p)[0]
        g_s = lsq_backward_scale(np.ones(1), np.array([x]), p)
        assert abs(g_x - fd_x) <= 1e-3 * max(1.0, abs(fd_x))
        assert abs(g_s - fd_s) <= 1e-3 * max(abs(fd_s), 1e-3)
        if not 0 <= x / s + z <= qmax:
            # clipped: the true fake-quantizer is locally affine in s and constant in x
            true_s = central_diff(lambda t: fake_quantize(np.array([x]), p.with_scale(t))[0], s, hs)
            assert true_s == pytest.approx(g_s, rel=1e-6)
            assert g_x == 0


def test_vector_lsq_sums_per_group():
    rng = np.random.default_rng(5)
    spec = GroupSpec(6, 3, rng.permutation(6))
    p = VectorQParams(8, np.array([0.1, 0.2, 0.3]), np.array([3, 100, 250]), False, PerEmbeddingGroup(spec))
    x = rng.normal(size=(4, 6)) * 10
    g = rng.normal(size=(4, 6))
    total = lsq_backward_scale(g, x, p)
    for k in range(3):
        cols = spec.group_indices(k)
        assert total[k] == pytest.approx(lsq_backward_scale(g[:, cols], x[:, cols], p.group(k)))


# -- properties -----------------------------------------------------------

@given(values, qparams())
def test_ints_in_grid(x, p):
    q = quantize(x, p).int_data
    assert q.min() >= 0 and q.max() <= p.qmax


@given(values, qparams())
def test_matches_oracle(x, p):
    assert np.array_equal(quantize(x, p).int_data, quantize_array(x, p.scale, p.zero_point, p.bit_width))


@given(qparams(), st.data())
def test_reconstruction_bound(p, data):
    lo, hi = grid_span(p)
    x = np.array(data.draw(st.lists(st.floats(float(lo), float(hi)), min_size=1, max_size=30)))
    assert np.all(np.abs(fake_quantize(x, p) - x) <= p.scale / 2 * (1 + 1e-12))


@given(values, qparams())
def test_idempotent(x, p):
    once = fake_quantize(x, p)
    assert np.array_equal(fake_quantize(once, p), once)


@given(values, values, qparams())
def test_monotone(a, b, p):
    n = min(len(a), len(b))
    lo, hi = np.minimum(a[:n], b[:n]), np.maximum(a[:n], b[:n])
    assert np.all(quantize(lo, p).int_data <= quantize(hi, p).int_data)


@given(qparams(), st.integers(1, 8), st.integers(1, 4))
def test_granularity_collapse(p, d, rows):
    rng = np.random.default_rng(d * 7 + rows)
    x = rng.normal(size=(rows, d)) * 5
    pe = VectorQParams(p.bit_width, np.full(d, p.scale), np.full(d, p.zero_point), p.symmetric, PerEmbedding(d))
    assert np.array_equal(fake_quantize(x, pe), fake_quantize(x, p))
    g1 = VectorQParams(p.bit_width, [p.scale], [p.zero_point], p.symmetric,
                       PerEmbeddingGroup(GroupSpec(d, 1)))
    assert np.array_equal(fake_quantize(x, g1), fake_quantize(x, p))
    s = rng.uniform(0.01, 1, d)
    z = rng.integers(0, p.qmax + 1, d) if not p.symmetric else np.full(d, p.zero_point)
    pe = VectorQParams(p.bit_width, s, z, p.symmetric, PerEmbedding(d))
    gd = VectorQParams(p.bit_width, s, z, p.symmetric, PerEmbeddingGroup(GroupSpec(d, d)))
    assert np.array_equal(fake_quantize(x, pe), fake_quantize(x, gd))


def test_nan_handling():
    p = QParams(8, 0.1, 10)
    out = fake_quantize(np.array([np.nan, 1.0]), p)
    assert np.isnan(out[0]) and out[1] == 1.0
    with pytest.raises(QuantError):
        quantize(np.array([np.nan]), p)
