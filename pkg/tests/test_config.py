"""Tests for layered experiment configuration."""

from pathlib import Path

import pytest

from latentprog.config import (
    ExperimentConfig,
    Hyperparams,
    StageConfig,
    config_to_dict,
    load_config,
)
from latentprog.exceptions import ConfigurationError


class TestDefaults:
    """Built-in defaults."""

    def test_defaults(self):
        config = load_config()
        assert config == ExperimentConfig()
        assert config.hyperparams.alpha == 100.0
        assert config.hyperparams.beta == 0.1
        assert config.hyperparams.gamma == 10.0
        assert config.data.supervision_fraction == 0.1
        assert config.prior.mode == "syntactic"

    def test_stage_lookup(self):
        config = ExperimentConfig()
        assert config.stage("joint_training") is config.joint_training
        with pytest.raises(ConfigurationError, match="Unknown stage"):
            config.stage("pretraining")

    def test_to_dict(self):
        assert config_to_dict(ExperimentConfig())["hyperparams"]["samples"] == 1


class TestLayers:
    """File then overrides, highest wins."""

    def test_file_values(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text(
            "seed = 3\n[hyperparams]\nbeta = 1.5\n[joint_training]\nepochs = 4\n"
        )
        config = load_config(path)
        assert config.seed == 3
        assert config.hyperparams.beta == 1.5
        assert config.joint_training.epochs == 4
        assert config.question_coding.epochs == 10

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("[hyperparams]\nbeta = 1.5\n")
        config = load_config(path, {"hyperparams.beta": 0.5, "seed": 9})
        assert config.hyperparams.beta == 0.5
        assert config.seed == 9

    def test_none_overrides_fall_through(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("seed = 3\n")
        assert load_config(path, {"seed": None}).seed == 3

    def test_int_accepted_for_float(self):
        config = load_config(overrides={"hyperparams.gamma": 5})
        assert config.hyperparams.gamma == 5.0
        assert isinstance(config.hyperparams.gamma, float)


class TestValidation:
    """Unknown keys and out-of-range values."""

    @pytest.mark.parametrize(
        "key,value",
        [
            ("hyperparams.alpha", 1.0),
            ("hyperparams.beta", -0.1),
            ("hyperparams.gamma", 0.5),
            ("hyperparams.baseline_decay", 1.5),
            ("hyperparams.samples", 6),
            ("data.supervision_fraction", 0.0),
            ("prior.mode", "neural"),
            ("module_training.program_source", "beam"),
            ("workers", 0),
        ],
    )
    def test_out_of_range(self, key, value):
        with pytest.raises(ConfigurationError):
            load_config(overrides={key: value})

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="Unknown key 'hyperparams.delta'"):
            load_config(overrides={"hyperparams.delta": 1.0})

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("[optimizer]\nlr = 0.1\n")
        with pytest.raises(ConfigurationError, match="Unknown section"):
            load_config(path)

    def test_wrong_type(self):
        with pytest.raises(ConfigurationError, match="integer"):
            load_config(overrides={"seed": "three"})
        with pytest.raises(ConfigurationError, match="boolean"):
            load_config(overrides={"check_finite": 1})

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("seed = = 3\n")
        with pytest.raises(ConfigurationError, match="Invalid TOML"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="Cannot read"):
            load_config(tmp_path / "absent.toml")

    def test_direct_construction_validates(self):
        with pytest.raises(ConfigurationError):
            Hyperparams(samples=0)
        with pytest.raises(ConfigurationError):
            StageConfig(patience=0)


SHIPPED = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.toml"))


class TestShippedConfigs:
    """Every file under configs/ loads cleanly."""

    def test_configs_exist(self):
        assert {p.name for p in SHIPPED} >= {"mini.toml", "full_supervision.toml"}

    @pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.name)
    def test_loads(self, path):
        config = load_config(path)
        assert config.data.train_size >= 1

    def test_mini_is_semi_supervised(self):
        config = load_config(SHIPPED[0].parent / "mini.toml")
        assert config.data.supervision_fraction == 0.1
        assert config.data.train_size == 6000

    def test_full_supervision_has_no_vqa_items(self):
        config = load_config(SHIPPED[0].parent / "full_supervision.toml")
        assert config.data.supervision_fraction == 1.0
