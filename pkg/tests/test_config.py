"""Tests for the run configuration layer."""

import importlib.util
from dataclasses import asdict

import pytest

import vtprune.utils.config as config_module
from vtprune.utils.config import (
    DEFAULT_CONFIG,
    RunConfig,
    field_names,
    get_setting,
    load_config,
    load_config_text,
    parse_config_text,
)
from vtprune.utils.exceptions import ArgumentError, ConfigError


class TestRunConfig:
    """Tests for defaults and validation."""

    def test_defaults(self):
        """Test the documented toy configuration."""
        cfg = RunConfig()
        assert (cfg.visual_tokens, cfg.language_tokens, cfg.dim) == (64, 8, 32)
        assert (cfg.informative_tokens, cfg.batch_size) == (8, 32)
        assert cfg.steps == 5000
        assert (cfg.vocab_size, cfg.signal_scale) == (16, 4.0)
        assert cfg.variant == "parameter-free"
        assert cfg.noise_mode == "linear-decay"
        assert cfg.prune_layer == 1
        assert DEFAULT_CONFIG["out"] == "runs/vtprune"
        assert field_names()[0] == "variant"

    @pytest.mark.parametrize(
        "overrides, key",
        [
            ({"variant": "random"}, "variant"),
            ({"noise_mode": "sometimes"}, "noise_mode"),
            ({"visual_tokens": 0}, "visual_tokens"),
            ({"informative_tokens": 64}, "informative_tokens"),
            ({"vocab_size": 4}, "vocab_size"),
            ({"vocab_size": 31}, "vocab_size"),
            ({"n_queries": 65}, "n_queries"),
            ({"prune_layer": 3}, "prune_layer"),
            ({"variant": "llm-learnable", "prune_layer": 2}, "prune_layer"),
            ({"steps": -1}, "steps"),
            ({"seed": 2**64}, "seed"),
            ({"seed": -1}, "seed"),
        ],
    )
    def test_invalid_values(self, overrides, key):
        """Test each rule names the offending key."""
        with pytest.raises(ConfigError) as info:
            RunConfig(**overrides)
        assert info.value.key == key
        assert isinstance(info.value, ArgumentError)

    def test_module_executes_cleanly(self):
        """Test a fresh import builds the default mapping."""
        location = importlib.util.spec_from_file_location(
            "fresh_config", config_module.__file__
        )
        fresh = importlib.util.module_from_spec(location)
        location.loader.exec_module(fresh)
        assert fresh.DEFAULT_CONFIG == asdict(fresh.RunConfig())
        assert fresh.DEFAULT_CONFIG == DEFAULT_CONFIG

    def test_largest_seed(self):
        """Test the full unsigned 64-bit range is accepted."""
        assert RunConfig(seed=2**64 - 1).seed == 2**64 - 1


class TestParsing:
    """Tests for parse_config_text and load_config_text."""

    def test_comments_and_hyphens(self):
        """Test comments, blank lines and hyphenated keys."""
        text = (
            "# toy run\n"
            "\n"
            "noise-mode = constant   # never decays\n"
            "visual_tokens = 16\n"
            "with-cls = no\n"
            "alpha_start = 2\n"
        )
        values = parse_config_text(text)
        assert values == {
            "noise_mode": "constant",
            "visual_tokens": 16,
            "with_cls": False,
            "alpha_start": 2.0,
        }

    def test_round_trip(self):
        """Test the text echo parses back to the same config."""
        cfg = RunConfig(seed=2**63 + 5, alpha_start=0.3, with_cls=False)
        assert load_config_text(cfg.to_text()) == cfg

    @pytest.mark.parametrize(
        "text, key",
        [
            ("colour = blue", "colour"),
            ("steps = many", "steps"),
            ("with_cls = maybe", "with_cls"),
            ("alpha_start = fast", "alpha_start"),
        ],
    )
    def test_bad_lines(self, text, key):
        """Test unknown keys and unreadable values."""
        with pytest.raises(ConfigError) as info:
            parse_config_text(text)
        assert info.value.key == key
        assert key in str(info.value)

    def test_line_without_equals(self):
        """Test a line that is not key = value."""
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("steps = 3\nsteps 4\n")


class TestLoadConfig:
    """Tests for load_config and get_setting."""

    def test_file_then_overrides(self, small_config_file):
        """Test overrides beat the file and None leaves the file value."""
        cfg = load_config(
            small_config_file, {"seed": 7, "steps": None, "variant": "none"}
        )
        assert cfg.seed == 7
        assert cfg.steps == 2
        assert cfg.variant == "none"
        assert cfg.visual_tokens == 8

    def test_defaults_without_file(self):
        """Test no file and no overrides gives the defaults."""
        assert load_config() == RunConfig()

    def test_missing_file(self, tmp_path):
        """Test an unreadable file is a config error."""
        with pytest.raises(ConfigError) as info:
            load_config(tmp_path / "absent.conf")
        assert info.value.key == "config"

    def test_with_overrides_coerces_text(self):
        """Test textual values are typed like file values."""
        cfg = RunConfig().with_overrides({"steps": "12", "jobs": 3})
        assert cfg.steps == 12
        assert cfg.jobs == 3

    def test_get_setting(self, small_cfg):
        """Test lookups by either spelling."""
        assert get_setting(small_cfg, "n-queries") == 4
        assert get_setting(small_cfg, "log_every") == 1
        with pytest.raises(ConfigError):
            get_setting(small_cfg, "learning-speed")
