import json

import pytest

from asapnet.config import apply_overrides, config_load
from asapnet.errors import ConfigurationError
from asapnet.hypernet import compute_factors


def write(tmp_path, obj):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(obj))
    return p


def test_defaults_without_file():
    cfg = config_load()
    assert cfg.generator.learned_downsampling == 16
    assert (cfg.train.lr_g, cfg.train.lr_d, cfg.train.beta1) == (1e-4, 4e-4, 0.0)


def test_learned_downsampling_propagates_to_factors(tmp_path):
    p = write(tmp_path, {"generator": {"learned_downsampling": 8, "lowres_cap": 64, "input_channels": 3}})
    cfg = config_load(p)
    f = compute_factors(64, 64, cfg.generator)
    assert (f.bilinear, f.total, f.encoding_depth, f.grid) == (1, 8, 3, (8, 8))
    assert cfg.generator.stage_widths == (64, 128, 256)


def test_overrides_after_load(tmp_path):
    p = write(tmp_path, {"train": {"steps": 100}})
    cfg = config_load(p, ["train.steps=10", "train.mode=spatially_uniform", "generator.hypernet_widths=[4,8,16,32]"])
    assert cfg.train.steps == 10 and cfg.train.mode == "spatially_uniform"
    assert cfg.generator.hypernet_widths == (4, 8, 16, 32)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="lr_gen"):
        config_load(write(tmp_path, {"train": {"lr_gen": 1.0}}))
    with pytest.raises(ConfigurationError, match="optimizer"):
        config_load(write(tmp_path, {"optimizer": {}}))
    with pytest.raises(ConfigurationError, match="bogus"):
        config_load(None, ["generator.bogus=1"])


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        config_load(None, ["generator.learned_downsampling=12"])
    with pytest.raises(ConfigurationError):
        config_load(None, ["train.precision=\"float16\""])
    with pytest.raises(ConfigurationError, match="JSON"):
        p = tmp_path / "bad.json"
        p.write_text("{")
        config_load(p)


def test_malformed_override():
    with pytest.raises(ConfigurationError, match="section.key=value"):
        apply_overrides({}, ["steps=3"])


def test_round_trip_through_dict(tmp_path):
    cfg = config_load(None, ["train.seed=9", "data.count=4"])
    again = config_load(write(tmp_path, cfg.to_dict()))
    assert again == cfg
