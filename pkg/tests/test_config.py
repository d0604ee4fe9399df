import pytest

from mcsdnet.architecture import ModelConfig
from mcsdnet.config import (
    ConfigError, RunConfig, dump_config, load_config, load_synthetic_config, preset_names,
)
from mcsdnet.data import SyntheticConfig
from mcsdnet.training import TrainConfig


def test_defaults_match_library_defaults():
    cfg = load_config()
    assert cfg.model_config() == ModelConfig()
    assert cfg.train_config() == TrainConfig()
    assert cfg.width == 6 and cfg.interval == 30 and cfg.batch_size == 8


def test_dump_round_trip(tmp_path):
    cfg = load_config(stmu="convlstm", channels=[8, 16, 32, 64], lr=0.01, data="/abs/m.csv")
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_unknown_key_is_fatal(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("epochs = 3\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(path)


@pytest.mark.parametrize("text", [
    "epochs = 2.5\n",
    "channels = [8, 16.0, 32, 64]\n",
    "stmu = 3\n",
    "multiscale = 1\n",
    "[model]\nlevels = 3\n",
    "epochs = \n",
    "version = 2\n",
    "stmu = \"swin\"\n",
    "batch_size = 0\n",
    "channels = [8, 16]\n",
])
def test_malformed_values(tmp_path, text):
    path = tmp_path / "c.toml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_int_accepted_for_float(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("lr = 1\n")
    assert load_config(path).lr == 1.0


def test_relative_data_paths_follow_config(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "c.toml"
    path.write_text('data = "d/manifest.csv"\nval_data = "/abs/v.csv"\n')
    cfg = load_config(path)
    assert cfg.data == str(tmp_path / "sub" / "d" / "manifest.csv")
    assert cfg.val_data == "/abs/v.csv"


def test_overrides_and_none_ignored():
    cfg = load_config("preset:quick", seed=7, epochs=None)
    assert cfg.seed == 7 and cfg.epochs == 20 and cfg.levels == 3


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/c.toml")


def test_every_preset_loads():
    names = preset_names()
    expected = {"default", "quick", "multiscale_on", "multiscale_off", "combo_full",
                "combo_encoder_stmu", "combo_encoder_decoder"}
    expected |= {f"stmu_{k}" for k in ("identity", "conv3d", "convlstm", "tformer", "dsta")}
    expected |= {f"attention_{k}" for k in ("none", "temporal", "spatial", "both")}
    expected |= {f"interval_{m}" for m in (15, 30, 60, 120)}
    assert expected <= set(names)
    for name in names:
        assert isinstance(load_config(f"preset:{name}"), RunConfig)


def test_preset_axes():
    assert load_config("preset:stmu_tformer").stmu == "tformer"
    assert load_config("preset:multiscale_off").multiscale is False
    t = load_config("preset:attention_temporal")
    assert t.temporal_attention and not t.spatial_attention
    assert load_config("preset:attention_none").stmu == "identity"
    assert load_config("preset:interval_120").interval == 120
    assert load_config("preset:combo_encoder_stmu").decoder is False
    with pytest.raises(ConfigError, match="unknown preset"):
        load_config("preset:nope")


def test_checkpoint_fields_rebuild():
    cfg = load_config("preset:quick", seed=3, batch_size=4)
    back = RunConfig.from_checkpoint_fields(cfg.model_config(), {**cfg.to_dict(), "extra": 1})
    assert back == cfg


def test_synthetic_config(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text("scenes = 2\nimage_size = [32, 32]\nflicker_rate = 0.5\n")
    cfg = load_synthetic_config(path, seed=9)
    assert cfg == SyntheticConfig(seed=9, scenes=2, image_size=(32, 32), flicker_rate=0.5)
    path.write_text("sceens = 2\n")
    with pytest.raises(ConfigError, match="sceens"):
        load_synthetic_config(path)
    path.write_text("coverage = [0.1, 0.5]\n")
    with pytest.raises(ConfigError):
        load_synthetic_config(path)
