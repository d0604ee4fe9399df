import numpy as np
import pytest

from mcsdnet import layers
from mcsdnet import numerics as nx
from mcsdnet.numerics import Rng, ShapeError, Tensor


def test_group_norm_matches_numpy(np_rng):
    x = np_rng.normal(size=(2, 8, 3, 3)) * 3 + 1
    gn = layers.GroupNorm(4, 8, dtype=np.float64)
    gn.gamma_scale.data = np_rng.normal(size=8)
    gn.beta_shift.data = np_rng.normal(size=8)
    g = x.reshape(2, 4, -1)
    ref = ((g - g.mean(-1, keepdims=True)) / np.sqrt(g.var(-1, keepdims=True) + 1e-5)).reshape(x.shape)
    ref = ref * gn.gamma_scale.data[None, :, None, None] + gn.beta_shift.data[None, :, None, None]
    np.testing.assert_allclose(layers.group_norm(Tensor(x), gn).data, ref, rtol=1e-10)


def test_group_norm_invariants(np_rng):
    gn = layers.GroupNorm(4, 8, dtype=np.float64)
    for _ in range(20):
        x = np_rng.normal(size=(2, 8, 5, 5)) * np_rng.uniform(1, 10) + np_rng.uniform(-50, 50)
        z = layers.group_norm(Tensor(x), gn).data.reshape(2, 4, -1)
        assert np.abs(z.mean(-1)).max() < 1e-6
        assert np.abs(z.var(-1) - 1).max() < 1e-4


def test_group_norm_rejects_bad_groups():
    with pytest.raises(ValueError):
        layers.GroupNorm(3, 8)
    gn = layers.GroupNorm(2, 4)
    with pytest.raises(ShapeError):
        gn(Tensor(np.ones((1, 6, 2, 2), np.float32)))


def test_sequence_norm_over_joint_extent(np_rng):
    extent = (3, 2, 4, 4)
    sn = layers.SequenceNorm(extent, dtype=np.float64)
    x = np_rng.normal(size=(2,) + extent) * 5 - 3
    z = layers.sequence_norm(Tensor(x), sn).data
    flat = x.reshape(2, -1)
    ref = (flat - flat.mean(1, keepdims=True)) / np.sqrt(flat.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(z.reshape(2, -1), ref, rtol=1e-10)
    # one sample's statistics do not leak into another
    x2 = x.copy()
    x2[1] *= 100
    np.testing.assert_allclose(layers.sequence_norm(Tensor(x2), sn).data[0], z[0])


def test_sequence_norm_affine_is_elementwise(np_rng):
    extent = (2, 2, 2, 2)
    sn = layers.SequenceNorm(extent, dtype=np.float64)
    sn.gamma_scale.data = np_rng.normal(size=extent)
    sn.beta_shift.data = np_rng.normal(size=extent)
    x = np_rng.normal(size=(1,) + extent)
    base = layers.SequenceNorm(extent, dtype=np.float64)
    z = layers.sequence_norm(Tensor(x), base).data
    np.testing.assert_allclose(layers.sequence_norm(Tensor(x), sn).data,
                               z * sn.gamma_scale.data + sn.beta_shift.data)


def test_sequence_norm_shape_check():
    sn = layers.SequenceNorm((2, 2, 2, 2))
    with pytest.raises(ShapeError):
        sn(Tensor(np.ones((1, 3, 2, 2, 2), np.float32)))


def attention_reference(x, mha):
    b, n, d = x.shape
    h = mha.num_heads
    hd = d // h

    def lin(layer, t):
        return t @ layer.weight.data + layer.bias.data

    q = lin(mha.query, x).reshape(b, n, h, hd)
    k = lin(mha.key, x).reshape(b, n, h, hd)
    v = lin(mha.value, x).reshape(b, n, h, hd)
    out = np.zeros((b, n, h, hd))
    for bi in range(b):
        for hi in range(h):
            s = q[bi, :, hi] @ k[bi, :, hi].T / np.sqrt(hd)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            out[bi, :, hi] = a @ v[bi, :, hi]
    return lin(mha.output, out.reshape(b, n, d))


def test_attention_matches_reference(np_rng):
    mha = layers.MultiHeadSelfAttention(8, 2, Rng(0), np.float64)
    x = np_rng.normal(size=(2, 5, 8))
    np.testing.assert_allclose(mha(Tensor(x)).data, attention_reference(x, mha), rtol=1e-10)


def test_attention_is_token_permutation_equivariant(np_rng):
    mha = layers.MultiHeadSelfAttention(6, 3, Rng(1), np.float64)
    x = np_rng.normal(size=(1, 7, 6))
    perm = np_rng.permutation(7)
    np.testing.assert_allclose(mha(Tensor(x[:, perm])).data, mha(Tensor(x)).data[:, perm], rtol=1e-10)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        layers.MultiHeadSelfAttention(6, 4, Rng(0))


def test_conv_norm_relu_nonnegative_and_shaped(np_rng):
    block = layers.ConvNormReLU(3, 8, Rng(0))
    y = block(Tensor(np_rng.normal(size=(2, 3, 6, 6)).astype(np.float32))).data
    assert y.shape == (2, 8, 6, 6) and (y >= 0).all()


def test_uniform_fan_in_bounds():
    w = layers.uniform_fan_in(Rng(0), (1000,), 16)
    assert np.abs(w.data).max() <= 0.25 and w.requires_grad


def test_module_traversal_order_and_astype():
    block = layers.ConvNormReLU(2, 4, Rng(0))
    names = [n for n, _ in block.named_parameters()]
    assert names == ["conv.weight", "conv.bias", "norm.gamma_scale", "norm.beta_shift"]
    assert block.num_parameters() == 4 * 2 * 9 + 4 + 4 + 4
    block.astype(np.float64)
    assert all(p.dtype == np.float64 for p in block.parameters())


def test_same_seed_same_initialisation():
    a = layers.MultiHeadSelfAttention(4, 2, Rng(3))
    b = layers.MultiHeadSelfAttention(4, 2, Rng(3))
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_layer_gradients_float64():
    rng = Rng(0)
    gn = layers.GroupNorm(2, 4, dtype=np.float64)
    x = Tensor(rng.normal((2, 4, 3, 3), np.float64) * 3)
    probe = rng.normal((2, 4, 3, 3), np.float64)
    err = nx.grad_check(lambda: (layers.group_norm(x, gn) * Tensor(probe)).sum(), [x] + gn.parameters())
    assert err < 1e-6
