import json

import pytest

from wsinr.config import (
    PRESETS,
    TrainConfig,
    ItoConfig,
    config_hash,
    diff,
    flatten,
    load_config,
    parse_overrides,
    resolve,
    to_json,
)
from wsinr.errors import ConfigError


def test_presets_resolve():
    for name in PRESETS:
        assert resolve(name).preset == name


def test_full_scale_preset_values():
    cfg = resolve("paper-scale")
    assert cfg.encoding.levels == 21 and cfg.encoding.features == 2
    assert cfg.encoding.table_size == 2**21 and cfg.encoding.base_resolution == 16
    assert cfg.encoding.scale == 1.5
    assert cfg.encoder_width() == 42
    assert (cfg.train.epochs, cfg.train.stage1_epochs, cfg.train.lr) == (200, 100, 1e-5)
    ito = cfg.ito
    assert (ito.max_epochs, ito.mse_threshold, ito.warmup_epochs, ito.divergence_ratio) == (20, 0.002, 5, 1.30)


def test_overrides_are_typed():
    cfg = resolve("smoke", parse_overrides(["train.lr=0.5", "seed=3", "ito.ema_warmup=false", "model.dilations=[1,3]"]))
    assert cfg.train.lr == 0.5 and cfg.seed == 3 and cfg.ito.ema_warmup is False
    assert cfg.model.dilations == (1, 3)


@pytest.mark.parametrize(
    "pairs",
    [["nope=1"], ["train=1"], ["seed=abc"], ["train.lr=true"], ["ito.ema_warmup=1"], ["seed"]],
)
def test_bad_overrides(pairs):
    with pytest.raises(ConfigError):
        resolve("smoke", parse_overrides(pairs))


def test_unknown_preset():
    with pytest.raises(ConfigError):
        resolve("huge")


def test_stage_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, stage1_epochs=10)
    with pytest.raises(ConfigError):
        TrainConfig(stage_order=("segmentation", "reconstruction"))
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        ItoConfig(max_epochs=5, warmup_epochs=5)
    with pytest.raises(ConfigError):
        ItoConfig(divergence_ratio=1.0)


def test_encoder_widths():
    assert resolve("desk-scale", {"experiment.encoder": "none"}).model_config().in_width == 2
    assert resolve("desk-scale", {"experiment.encoder": "nerf-pe"}).model_config().in_width == 40
    assert resolve("desk-scale").model_config().in_width == 24


def test_json_round_trip(tmp_path):
    cfg = resolve("smoke", {"seed": 11, "train.lr": 0.01})
    path = tmp_path / "c.json"
    path.write_text(to_json(cfg))
    back = load_config(path)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_hash_ignores_paths_only():
    a = resolve("smoke")
    assert config_hash(a) == config_hash(resolve("smoke", {"run_dir": "x", "manifest": "y"}))
    assert config_hash(a) != config_hash(resolve("smoke", {"seed": 1}))


def test_diff_and_flatten():
    a = resolve("smoke")
    b = resolve("smoke", {"experiment.encoder": "none"})
    assert diff(a, b) == {"experiment.encoder": ("hash", "none")}
    flat = flatten(a)
    assert json.loads(json.dumps(flat)) == flat
    assert "encoding.table_size" in flat
