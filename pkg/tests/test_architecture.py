import numpy as np
import pytest

from mcsdnet import numerics as nx
from mcsdnet.architecture import McsdNet, ModelConfig, predict_mask
from mcsdnet.numerics import Rng, Tensor
from mcsdnet.stmu import StmuKind

SMALL = dict(levels=3, channels=(4, 8, 8), heads=2, seq_len=3, image_size=(16, 16), atrous_rates=(1, 2), groups=2)


def batch(cfg, b=2, seed=0):
    return Tensor(Rng(seed).uniform(0, 1, (b, cfg.seq_len, cfg.input_channels) + cfg.image_size))


def test_default_config_matches_reference_design():
    cfg = ModelConfig()
    assert cfg.levels == 4 and cfg.channels == (16, 32, 64, 128)
    assert cfg.stmu_kind is StmuKind.DSTA and cfg.groups == 4
    assert cfg.bottleneck_size == (8, 8) and cfg.stmu_extent == (6, 128, 8, 8)


@pytest.mark.parametrize("bad", [
    dict(channels=(4, 8)),
    dict(channels=(4, 8, 7)),
    dict(image_size=(18, 16)),
    dict(atrous_rates=(2, 1)),
    dict(atrous_rates=(1, 8)),
    dict(threshold=1.0),
    dict(stmu_depth=0),
    dict(stmu_kind="swin"),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ModelConfig(**{**SMALL, **bad})


def test_config_dict_round_trip():
    cfg = ModelConfig(**SMALL, stmu_kind="convlstm")
    d = cfg.to_dict()
    assert d["stmu_kind"] == "convlstm" and d["channels"] == [4, 8, 8]
    assert ModelConfig.from_dict(d) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**d, "depth": 3})


@pytest.mark.parametrize("kind", list(StmuKind))
def test_forward_shape_and_range(kind):
    cfg = ModelConfig(**SMALL, stmu_kind=kind)
    y = McsdNet(cfg, seed=0)(batch(cfg)).data
    assert y.shape == (2, 3, 1, 16, 16)
    assert ((y > 0) & (y < 1)).all()


@pytest.mark.parametrize("variant", [dict(decoder=False), dict(multiscale=False),
                                     dict(temporal_attention=False), dict(spatial_attention=False)])
def test_variants_keep_output_contract(variant):
    cfg = ModelConfig(**SMALL, **variant)
    model = McsdNet(cfg, seed=0)
    y = model(batch(cfg)).data
    assert y.shape == (2, 3, 1, 16, 16)
    if variant.get("decoder") is False:
        assert model.decoder == []
        # nearest upsampling of a 4x4 map: each 4x4 block is constant
        blocks = y[0, 0, 0].reshape(4, 4, 4, 4)
        assert np.ptp(blocks, axis=(1, 3)).max() == 0
    if variant.get("multiscale") is False:
        assert model.fusion is None


def test_parameter_count_reflects_variants():
    full = McsdNet(ModelConfig(**SMALL), seed=0).num_parameters()
    no_ms = McsdNet(ModelConfig(**SMALL, multiscale=False), seed=0).num_parameters()
    ident = McsdNet(ModelConfig(**SMALL, stmu_kind="identity"), seed=0).num_parameters()
    assert full > no_ms and full > ident


def test_same_seed_same_model_and_output():
    cfg = ModelConfig(**SMALL)
    a, b = McsdNet(cfg, seed=5), McsdNet(cfg, seed=5)
    x = batch(cfg)
    np.testing.assert_array_equal(a(x).data, b(x).data)
    c = McsdNet(cfg, seed=6)
    assert not np.array_equal(a(x).data, c(x).data)


def test_batch_elements_are_independent():
    cfg = ModelConfig(**SMALL)
    model = McsdNet(cfg, seed=0)
    x = batch(cfg, b=2)
    single = model(Tensor(x.data[:1])).data
    np.testing.assert_allclose(model(x).data[:1], single, rtol=1e-5, atol=1e-6)


def test_rejects_wrong_rank_and_size():
    cfg = ModelConfig(**SMALL)
    model = McsdNet(cfg, seed=0)
    with pytest.raises(nx.ShapeError):
        model(Tensor(np.zeros((2, 1, 16, 16), np.float32)))
    with pytest.raises(nx.ShapeError):
        model(Tensor(np.zeros((1, 3, 1, 18, 18), np.float32)))


def test_identity_stmu_is_framewise():
    # without a mixing unit, frame t's output depends only on frame t
    cfg = ModelConfig(**SMALL, stmu_kind="identity")
    model = McsdNet(cfg, seed=0)
    x = batch(cfg, b=1)
    x2 = x.data.copy()
    x2[:, 0] = 0.0
    a, b = model(x).data, model(Tensor(x2)).data
    np.testing.assert_array_equal(a[:, 1:], b[:, 1:])


def test_predict_mask_threshold():
    p = np.array([0.1, 0.5, 0.49999, 0.9])
    np.testing.assert_array_equal(predict_mask(p), [0, 1, 0, 1])
    np.testing.assert_array_equal(predict_mask(Tensor(p), 0.95), [0, 0, 0, 0])
    assert predict_mask(p).dtype == np.uint8
    with pytest.raises(ValueError):
        predict_mask(p, 0.0)
