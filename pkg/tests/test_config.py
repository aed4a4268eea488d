from __future__ import annotations

import json
import logging

import pytest

from mobichain.config import MobichainConfig, build_config, load_config, override
from mobichain.encoding import MaskStrategy
from mobichain.errors import InvalidConfigError

TOML = """
[model]
heads = 8
dropout_p = 0.2

[train]
epochs = 60
batch_size = 16

[ingest]
timezone = "Africa/Cairo"

[ingest.mandatory]
night_hours = [21, 5]
education_categories = ["school"]

[mask]
fraction = 0.4
strategies = ["period"]
"""


def test_defaults():
    assert build_config().digest == MobichainConfig().digest
    assert load_config(None).digest == MobichainConfig().digest


def test_toml_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TOML)
    config = load_config(path)
    assert (config.model.heads, config.model.dropout_p, config.model.d_model) == (8, 0.2, 64)
    assert (config.train.epochs, config.train.warmup_epochs, config.train.phase2_end) == (60, 3, 23)
    assert config.train.batch_size == 16
    assert config.ingest.timezone == "Africa/Cairo"
    assert config.ingest.mandatory.night_hours == (21, 5)
    assert config.ingest.mandatory.education_categories == frozenset({"school"})
    assert config.mask.fraction == 0.4
    assert config.mask.strategies == (MaskStrategy.PERIOD,)
    assert config.digest != MobichainConfig().digest


def test_json_matches_toml(tmp_path):
    toml_path = tmp_path / "run.toml"
    toml_path.write_text(TOML)
    json_path = tmp_path / "run.json"
    json_path.write_text(json.dumps({
        "model": {"heads": 8, "dropout_p": 0.2},
        "train": {"epochs": 60, "batch_size": 16},
        "ingest": {"timezone": "Africa/Cairo", "mandatory": {"night_hours": [21, 5], "education_categories": ["school"]}},
        "mask": {"fraction": 0.4, "strategies": ["period"]},
    }))
    assert load_config(json_path).digest == load_config(toml_path).digest


def test_explicit_phase_boundaries():
    config = build_config({"train": {"epochs": 10, "warmup_epochs": 1, "phase2_end": 4}})
    assert (config.train.warmup_epochs, config.train.phase2_end) == (1, 4)


@pytest.mark.parametrize(
    "raw,where",
    [
        ({"model": {"heads": "four"}}, "model.heads"),
        ({"bogus": {}}, "bogus"),
        ({"ingest": {"timezone": "Mars/Olympus"}}, "ingest.timezone"),
        ({"mask": {"strategies": []}}, "mask.strategies"),
        ({"loss": {"class_weights": [1.0] * 3}}, "loss.class_weights"),
    ],
)
def test_validation_names_the_key(raw, where):
    with pytest.raises(InvalidConfigError, match=f"at {where}"):
        build_config(raw)


def test_section_invariants():
    with pytest.raises(InvalidConfigError):
        build_config({"model": {"heads": 3}})
    with pytest.raises(InvalidConfigError):
        build_config({"train": {"split": [0.5, 0.2, 0.2]}})
    with pytest.raises(InvalidConfigError):
        build_config({"degrade": {"coverage_mean": 0.0}})


def test_file_formats(tmp_path):
    with pytest.raises(InvalidConfigError, match="yaml"):
        load_config(tmp_path / "run.yaml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[model\n")
    with pytest.raises(InvalidConfigError):
        load_config(broken)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.toml")


def test_grid_outside_area_band_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="mobichain.config"):
        build_config({"ingest": {"grid": {"cell_size_m": 500.0}}})
    assert "outside" in caplog.text
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="mobichain.config"):
        build_config({})
    assert caplog.text == ""


def test_override():
    config = build_config()
    assert override(config, "train", seed=None) is config
    changed = override(config, "train", seed=5, threads=2)
    assert (changed.train.seed, changed.train.threads) == (5, 2)
    assert config.train.seed == 0
    with pytest.raises(InvalidConfigError, match="nonsense"):
        override(config, "train", nonsense=1)
    with pytest.raises(InvalidConfigError):
        override(config, "plotting", seed=1)
