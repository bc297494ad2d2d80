import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tqsim.intops import RescaleCounter
from tqsim.peg import (FFNBlock, GroupSpec, GroupSpecError, build_range_permutation, calibrate_ffn_quant,
                       ffn_forward, ffn_quantization_mse, peg_ffn_forward_native, peg_ffn_forward_per_tensor,
                       peg_overhead, permute_layernorm_and_linears, split_linear_by_input_groups,
                       split_linear_by_output_groups)


def calib_with_ranges(ranges, rng, shape=(2, 5)):
    """Tensor whose per-dim range (max - min) is exactly ``ranges``."""
    ranges = np.asarray(ranges, dtype=np.float64)
    x = rng.uniform(0.1, 0.9, shape + (len(ranges),)) * ranges
    flat = x.reshape(-1, len(ranges))
    flat[0] = 0.0
    flat[1] = ranges
    return x


def test_hand_permutation(rng):
    spec = build_range_permutation(calib_with_ranges([1, 100, 2, 90], rng), 2)
    assert set(spec.group_indices(0)) == {0, 2}
    assert set(spec.group_indices(1)) == {3, 1}
    assert spec.perm.tolist() == [0, 2, 3, 1]


def test_equal_ranges_give_identity(rng):
    spec = build_range_permutation(calib_with_ranges(np.full(12, 3.0), rng), 4)
    assert spec.is_identity
    assert build_range_permutation(calib_with_ranges(np.arange(12.0, 0, -1), rng), 1).is_identity


def test_k_must_divide_d(rng):
    with pytest.raises(GroupSpecError):
        build_range_permutation(rng.normal(size=(1, 2, 10)), 3)
    with pytest.raises(GroupSpecError):
        GroupSpec(10, 4)
    with pytest.raises(GroupSpecError):
        GroupSpec(4, 2, [0, 1, 1, 3])


def test_planted_outliers_in_top_group(rng):
    x = rng.normal(size=(4, 16, 768))
    dims = [17, 308, 600]
    x[..., dims] *= 40
    spec = build_range_permutation(x, 3)
    assert set(dims) <= set(spec.group_indices(2).tolist())
    assert all(spec.group_of[j] == 2 for j in dims)


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_outlier_guarantee(k, m_per_group, seed):
    rng = np.random.default_rng(seed)
    d = k * m_per_group
    n_out = int(rng.integers(0, m_per_group + 1))
    ranges = rng.uniform(0.5, 2.0, d)
    out = rng.choice(d, n_out, replace=False)
    ranges[out] = rng.uniform(10, 20, n_out)
    spec = build_range_permutation(calib_with_ranges(ranges, rng), k)
    assert all(spec.group_of[j] == k - 1 for j in out)


@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_groupspec_structure(k, m, seed):
    d = k * m
    perm = np.random.default_rng(seed).permutation(d)
    spec = GroupSpec(d, k, perm)
    assert np.array_equal(spec.inv_perm[spec.perm], np.arange(d))
    assert np.array_equal(spec.perm[spec.inv_perm], np.arange(d))
    bounds = spec.boundaries
    assert bounds[0][0] == 0 and bounds[-1][1] == d
    assert all(b - a == m for a, b in bounds)
    assert all(bounds[i][1] == bounds[i + 1][0] for i in range(k - 1))
    assert sorted(np.concatenate([spec.group_indices(g) for g in range(k)]).tolist()) == list(range(d))
    assert GroupSpec.from_dict(spec.to_dict()) == spec


def test_overhead():
    assert peg_overhead(768, 6) == 804
    assert peg_overhead(768, 3) == 786
    assert peg_overhead(768, 6) / 109e6 < 0.0004
    with pytest.raises(GroupSpecError):
        peg_overhead(768, 0)


def test_split_input_groups_hand():
    w = np.array([[1.0, 2, 3, 4], [5, 6, 7, 8]])
    x = np.array([1.0, -1, 2, 0.5])
    spec = GroupSpec(4, 2, [3, 0, 2, 1])
    blocks = split_linear_by_input_groups(w, spec)
    assert np.array_equal(blocks[0], [[4, 1], [8, 5]])
    parts = [b @ x[spec.group_indices(g)] for g, b in enumerate(blocks)]
    assert np.array_equal(parts[0] + parts[1], w @ x)
    assert np.array_equal(w @ x, [7.0, 17.0])
    assert np.array_equal(split_linear_by_input_groups(w, GroupSpec(4, 1))[0], w)


def test_split_output_groups_hand():
    w = np.arange(16.0).reshape(4, 4)
    x = np.array([1.0, 0, -1, 2])
    spec = GroupSpec(4, 2, [2, 0, 3, 1])
    rows, biases = split_linear_by_output_groups(w, spec, bias=np.arange(4.0))
    out = np.concatenate([r @ x + b for r, b in zip(rows, biases)])
    assert np.array_equal(out, (w @ x + np.arange(4.0))[spec.perm])
    assert np.array_equal(split_linear_by_output_groups(w, GroupSpec(4, 1))[0], w)
    with pytest.raises(GroupSpecError):
        split_linear_by_output_groups(np.zeros((3, 4)), spec)
    with pytest.raises(GroupSpecError):
        split_linear_by_input_groups(np.zeros((3, 5)), spec)


def test_split_random_large(rng):
    w = rng.normal(size=(8, 768))
    x = rng.normal(size=768)
    spec = GroupSpec(768, 6, rng.permutation(768))
    total = sum(b @ x[spec.group_indices(g)] for g, b in enumerate(split_linear_by_input_groups(w, spec)))
    assert np.allclose(total, w @ x, rtol=1e-6, atol=0)
    w2 = rng.normal(size=(768, 3072))
    x2 = rng.normal(size=3072)
    rows = split_linear_by_output_groups(w2, spec)
    assert np.array_equal(np.concatenate([r @ x2 for r in rows])[spec.inv_perm], w2 @ x2)


def test_permute_identity_and_roundtrip(rng):
    block = FFNBlock.random(12, 24, rng)
    same = permute_layernorm_and_linears(block, GroupSpec.identity(12, 3))
    for name in ("ln1_gamma", "ln1_beta", "w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(same, name), getattr(block, name))
    spec = GroupSpec(12, 3, rng.permutation(12))
    back = permute_layernorm_and_linears(permute_layernorm_and_linears(block, spec), spec)
    assert back.perm is None
    for name in ("ln1_gamma", "ln1_beta", "w1", "b1", "w2", "b2", "ln2_gamma", "ln2_beta"):
        assert np.array_equal(getattr(back, name), getattr(block, name))


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_permutation_equivariance(k, m, seed):
    rng = np.random.default_rng(seed)
    d = k * m
    block = FFNBlock.random(d, 2 * d, rng)
    spec = GroupSpec(d, k, rng.permutation(d))
    x0 = rng.normal(size=(2, 3, d))
    ref = ffn_forward(block, x0)
    out = ffn_forward(permute_layernorm_and_linears(block, spec), x0)
    assert np.allclose(out, ref, rtol=1e-6, atol=1e-9)


def test_permute_shape_mismatch(rng):
    with pytest.raises(GroupSpecError):
        permute_layernorm_and_linears(FFNBlock.random(8, 16, rng), GroupSpec(6, 2))


def _pipelines(block, spec, x0):
    q = calibrate_ffn_quant(block, spec, x0)
    c_nat, c_pt = RescaleCounter(), RescaleCounter()
    native = peg_ffn_forward_native(block, x0, q, c_nat)
    rewritten = peg_ffn_forward_per_tensor(permute_layernorm_and_linears(block, spec), spec, q, x0, c_pt)
    return native, rewritten, q, c_nat, c_pt


def test_rewrite_hand_block(rng):
    block = FFNBlock.random(8, 16, rng, outlier_dims=[5], magnitude=20.0)
    x0 = rng.normal(size=(3, 4, 8))
    spec = build_range_permutation(ffn_forward(block, x0, return_sites=True)[1]["ffn_output"], 2)
    native, rewritten, *_ = _pipelines(block, spec, x0)
    assert np.array_equal(native, rewritten)


def test_rewrite_k1_is_per_tensor(rng):
    from tqsim.intops import qmatmul_per_tensor
    from tqsim.quant import dequantize, fake_quantize, quantize
    from tqsim import nn

    block = FFNBlock.random(8, 16, rng)
    x0 = rng.normal(size=(2, 4, 8))
    spec = GroupSpec.identity(8, 1)
    native, rewritten, q, _, _ = _pipelines(block, spec, x0)
    assert np.array_equal(native, rewritten)
    # plain per-tensor reference built from the same per-tensor parameters
    h = nn.layer_norm(x0, block.ln1_gamma, block.ln1_beta)
    hq = quantize(h, q.ffn_input.group(0))
    acc, cs = qmatmul_per_tensor(quantize(block.w1, q.w1), hq)
    gq = quantize(nn.gelu(acc * cs + block.b1), q.hidden)
    acc, cs = qmatmul_per_tensor(quantize(block.w2, q.w2), gq)
    s = dequantize(hq) + fake_quantize(acc * cs + block.b2, q.ffn_output.group(0))
    ref = nn.layer_norm(fake_quantize(s, q.residual_sum.group(0)), block.ln2_gamma, block.ln2_beta)
    assert np.allclose(native, ref, rtol=0, atol=1e-12)


def test_rewrite_d768_planted_outliers(rng):
    block = FFNBlock.random(768, 256, rng, outlier_dims=[10, 400, 701], magnitude=60.0)
    x0 = rng.normal(size=(2, 8, 768))
    sites = ffn_forward(block, x0, return_sites=True)[1]
    spec = build_range_permutation(sites["ffn_output"], 3)
    assert {10, 400, 701} <= set(spec.group_indices(2).tolist())
    native, rewritten, q, c_nat, c_pt = _pipelines(block, spec, x0)
    assert np.array_equal(native, rewritten)
    # both pipelines do K rescales for the grouped matmul plus one for the per-tensor one
    assert c_nat.rescale_ops == 3 + 1
    assert c_pt.rescale_ops == 3 + 3
    unpermuted = calibrate_ffn_quant(block, GroupSpec.identity(768, 3), x0)
    assert ffn_quantization_mse(block, x0, q) < ffn_quantization_mse(block, x0, unpermuted)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_rewrite_equivalence_property(k, m, seed):
    rng = np.random.default_rng(seed)
    d = k * m
    block = FFNBlock.random(d, 3 * d, rng, outlier_dims=[int(rng.integers(d))], magnitude=15.0)
    x0 = rng.normal(size=(2, 3, d))
    spec = GroupSpec(d, k, rng.permutation(d))
    native, rewritten, *_ = _pipelines(block, spec, x0)
    assert np.array_equal(native, rewritten)


def test_rewrite_rejects_mismatch(rng):
    block = FFNBlock.random(8, 16, rng)
    x0 = rng.normal(size=(2, 3, 8))
    spec = GroupSpec(8, 2, rng.permutation(8))
    q = calibrate_ffn_quant(block, spec, x0)
    with pytest.raises(GroupSpecError):
        peg_ffn_forward_per_tensor(block, spec, q, x0)
    other = GroupSpec(8, 2, np.arange(8)[::-1])
    with pytest.raises(GroupSpecError):
        peg_ffn_forward_per_tensor(permute_layernorm_and_linears(block, other), other, q, x0)
