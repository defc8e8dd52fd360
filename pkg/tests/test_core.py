import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from nuta import core
from nuta.gradcheck import check_gradients
from nuta.nn import Conv3dParams
from nuta.tensor import ShapeError, Tensor


def module(c, heads, rng, groups=None, out=None, kernel=(3, 1, 1)):
    return core.NutaModuleParams.init(c, out or c, heads, rng, groups=groups, kernel=kernel)


def set_identity(p: Conv3dParams):
    """Make a (kT,1,1) or 1x1x1 conv the identity map (centre tap per channel)."""
    w = np.zeros(p.weight.shape)
    cout, cpg = w.shape[:2]
    opg = cout // p.groups
    kt = w.shape[2] // 2
    for o in range(cout):
        w[o, o - (o // opg) * opg if cpg > 1 else 0, kt, 0, 0] = 1.0
    p.weight.data[...] = w


def test_gamma_single_head():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 2, 2))
    y = core.gamma(Tensor(x), 1).data
    assert y.shape == (2, 1, 4, 12)
    for t in range(4):
        np.testing.assert_array_equal(y[:, 0, t], x[:, :, t].reshape(2, -1))


def test_gamma_one_channel_per_head():
    x = np.random.default_rng(1).standard_normal((2, 5, 6, 1, 1))
    y = core.gamma(Tensor(x), 5).data
    assert y.shape == (2, 5, 6, 1)
    np.testing.assert_array_equal(y[..., 0], x[:, :, :, 0, 0])


def test_gamma_matches_index_oracle():
    x = np.random.default_rng(2).standard_normal((2, 6, 3, 2, 3))
    np.testing.assert_array_equal(core.gamma(Tensor(x), 3).data, oracles.split_heads(x, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 4),
       st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_gamma_inverse_is_bitwise_identity(n, heads, cph, t, hw, seed):
    x = np.random.default_rng(seed).standard_normal((n, heads * cph, t, hw, hw + 1))
    back = core.gamma_inverse(core.gamma(Tensor(x), heads), heads * cph, hw, hw + 1).data
    assert back.tobytes() == x.tobytes()


def test_gamma_rejects_indivisible_channels():
    with pytest.raises(ShapeError):
        core.gamma(Tensor(np.zeros((1, 6, 2, 1, 1))), 4)


def test_projection_map_constant_input_is_uniform():
    rng = np.random.default_rng(3)
    m = module(8, 2, rng, groups=4)
    f = Tensor(np.full((2, 8, 6, 3, 3), 0.7))
    mp = core.projection_map(f, m).values.data
    np.testing.assert_allclose(mp, 1 / 6, atol=1e-12)


def test_projection_map_shape():
    rng = np.random.default_rng(4)
    m = module(64, 4, rng)
    f = Tensor(rng.standard_normal((1, 64, 8, 4, 4)) * 0.1)
    assert core.projection_map(f, m).values.shape == (1, 4, 4, 8)


def test_projection_map_vs_composed_oracle():
    rng = np.random.default_rng(5)
    m = module(4, 2, rng, groups=2)
    f = rng.standard_normal((2, 4, 6, 2, 3)) * 0.5
    got = core.projection_map(Tensor(f), m).values.data
    np.testing.assert_allclose(got, oracles.projection_map(f, m), atol=1e-8, rtol=0)


def test_projection_map_errors():
    rng = np.random.default_rng(6)
    m = module(4, 2, rng)
    with pytest.raises(ShapeError, match="even"):
        core.projection_map(Tensor(np.zeros((1, 4, 5, 1, 1))), m)
    with pytest.raises(ShapeError, match="channels"):
        core.projection_map(Tensor(np.zeros((1, 6, 4, 1, 1))), m)


def test_nuta_forward_halves_time():
    rng = np.random.default_rng(7)
    m = module(16, 4, rng, groups=16, out=8)
    out, mp = core.nuta_forward(Tensor(rng.standard_normal((2, 16, 8, 4, 4)) * 0.2), m)
    assert out.shape == (2, 8, 4, 4, 4)
    assert mp.values.shape == (2, 4, 4, 8)


def test_nuta_forward_uniform_map_gives_temporal_mean():
    rng = np.random.default_rng(8)
    m = module(4, 2, rng, groups=4)
    set_identity(m.delta)
    set_identity(m.compress)
    f = rng.standard_normal((2, 4, 6, 2, 2))
    # zero keys make every logit in a row equal
    m.theta.weight.data[...] = 0.0
    out, mp = core.nuta_forward(Tensor(f), m)
    np.testing.assert_allclose(mp.values.data, 1 / 6, atol=1e-12)
    mean = f.mean(axis=2, keepdims=True)
    np.testing.assert_allclose(out.data, np.repeat(mean, 3, axis=2), atol=1e-12)


def test_nuta_forward_one_hot_map_selects_frame():
    rng = np.random.default_rng(9)
    m = module(4, 2, rng, groups=2, out=3)
    f = rng.standard_normal((1, 4, 8, 2, 2)) * 0.3
    t_star = 5
    bias = np.zeros((1, 2, 4, 8))
    bias[..., t_star] = 1e4
    out, mp = core.nuta_forward(Tensor(f), m, logit_bias=bias)
    np.testing.assert_allclose(mp.values.data[..., t_star], 1.0, atol=1e-12)
    d = oracles.conv_of(f, m.delta)
    picked = np.repeat(d[:, :, t_star:t_star + 1], 4, axis=2)
    expected = oracles.naive_conv3d(picked, m.compress.weight.data)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_nuta_forward_vs_composed_oracle():
    rng = np.random.default_rng(10)
    m = module(6, 3, rng, groups=3, out=4)
    f = rng.standard_normal((2, 6, 4, 2, 2)) * 0.5
    out, mp = core.nuta_forward(Tensor(f), m)
    exp_out, exp_map = oracles.nuta_forward(f, m)
    np.testing.assert_allclose(mp.values.data, exp_map, atol=1e-8, rtol=0)
    np.testing.assert_allclose(out.data, exp_out, atol=1e-8, rtol=0)


def test_temporal_sync_constant_propagation():
    rng = np.random.default_rng(11)
    m = module(4, 2, rng, groups=4)
    set_identity(m.zeta)
    set_identity(m.sync_compress)
    c = 1.3
    f_res = Tensor(np.full((2, 4, 6, 2, 2), c))
    mp = core.projection_map(Tensor(np.full((2, 4, 6, 2, 2), -0.4)), m)
    out = core.temporal_sync(f_res, mp, m).data
    assert out.shape == (2, 4, 3, 2, 2)
    np.testing.assert_allclose(out, 2 * c, atol=1e-12)


def test_temporal_sync_aligns_with_nuta_output_and_matches_oracle():
    rng = np.random.default_rng(12)
    m = module(4, 2, rng, groups=2, out=2)
    f = rng.standard_normal((2, 4, 6, 2, 2)) * 0.5
    f_res = rng.standard_normal((2, 4, 6, 2, 2))
    out_nuta, mp = core.nuta_forward(Tensor(f), m)
    synced = core.temporal_sync(Tensor(f_res), mp, m)
    assert synced.shape[2] == out_nuta.shape[2] == 3
    expected = oracles.temporal_sync(f_res, oracles.projection_map(f, m), m)
    np.testing.assert_allclose(synced.data, expected, atol=1e-8, rtol=0)


def test_temporal_sync_head_mismatch():
    rng = np.random.default_rng(13)
    m2, m4 = module(4, 2, rng), module(4, 4, rng)
    mp = core.projection_map(Tensor(rng.standard_normal((1, 4, 4, 1, 1))), m4)
    with pytest.raises(ShapeError, match="heads"):
        core.temporal_sync(Tensor(np.zeros((1, 4, 4, 1, 1))), mp, m2)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([4, 6, 8]), st.sampled_from([1, 2, 4]), st.integers(0, 2**31 - 1))
def test_projection_rows_are_distributions(t, heads, seed):
    rng = np.random.default_rng(seed)
    m = module(4, heads, rng, groups=4)
    f = Tensor(rng.standard_normal((2, 4, t, 2, 2)) * rng.uniform(0.1, 5))
    mp = core.projection_map(f, m).values.data
    assert mp.min() >= 0 and mp.max() <= 1
    np.testing.assert_allclose(mp.sum(-1), 1.0, atol=1e-6)


def test_head_independence():
    rng = np.random.default_rng(14)
    heads = 4
    m = module(8, heads, rng, groups=heads)
    f = rng.standard_normal((1, 8, 6, 2, 2))
    base = core.projection_map(Tensor(f), m).values.data
    for i in range(heads):
        g = f.copy()
        g[:, 2 * i:2 * i + 2] = 0.0
        mp = core.projection_map(Tensor(g), m).values.data
        for j in range(heads):
            if j == i:
                assert not np.allclose(mp[:, j], base[:, j])
            else:
                np.testing.assert_array_equal(mp[:, j], base[:, j])


def test_contraction_is_permutation_invariant():
    rng = np.random.default_rng(15)
    m = module(4, 2, rng, groups=2, kernel=(1, 1, 1))
    f = rng.standard_normal((1, 4, 8, 2, 2))
    out, mp = core.nuta_forward(Tensor(f), m)
    perm = rng.permutation(8)
    v = core.gamma(Tensor(oracles.conv_of(f, m.delta)), 2).data
    agg = mp.values.data @ v
    agg_perm = mp.values.data[..., perm] @ v[:, :, perm]
    np.testing.assert_allclose(agg_perm, agg, atol=1e-12)


def test_pair_preserving_permutation_permutes_map_columns():
    rng = np.random.default_rng(16)
    m = module(4, 2, rng, groups=2, kernel=(1, 1, 1))
    f = rng.standard_normal((1, 4, 8, 2, 2))
    out, mp = core.nuta_forward(Tensor(f), m)
    # swapping frames inside pooling pairs leaves the pooled queries untouched
    perm = np.array([1, 0, 2, 3, 5, 4, 7, 6])
    out_p, mp_p = core.nuta_forward(Tensor(f[:, :, perm]), m)
    np.testing.assert_allclose(mp_p.values.data, mp.values.data[..., perm], atol=1e-12)
    np.testing.assert_allclose(out_p.data, out.data, atol=1e-12)


def test_softmax_shift_invariance_via_logit_offset():
    rng = np.random.default_rng(17)
    m = module(4, 2, rng)
    f = Tensor(rng.standard_normal((2, 4, 6, 2, 2)))
    a = core.projection_map(f, m).values.data
    b = core.projection_map(f, m, logit_bias=123.0).values.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_nuta_gradients():
    rng = np.random.default_rng(18)
    m = module(4, 2, rng, groups=2, out=3)
    f = Tensor(rng.standard_normal((2, 4, 4, 2, 2)) * 0.5, requires_grad=True)
    fr = Tensor(rng.standard_normal((2, 4, 4, 2, 2)), requires_grad=True)

    def both():
        out, mp = core.nuta_forward(f, m)
        return core.temporal_sync(fr, mp, m)

    inputs = [f, fr, m.phi.weight, m.theta.weight, m.zeta.weight, m.sync_compress.weight]
    assert max(check_gradients(both, inputs, rng).values()) < 1e-4
