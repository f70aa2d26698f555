"""Tests for the configuration module."""

import json
from pathlib import Path

import pytest

from implicitfilter.config import (
    FilterConfig,
    ModelConfig,
    RmConfig,
    RunConfig,
    workers_from_env,
)
from implicitfilter.constants import RM_PARTICLES, RM_SCALE_C, RM_STEPS
from implicitfilter.errors import ConfigError


class TestModelConfig:
    def test_defaults_are_the_double_well(self):
        cfg = ModelConfig()
        assert cfg.drift == "double_well"
        assert cfg.sigma == 0.1
        assert cfg.obs_noise == 0.025
        assert cfg.time_step == 0.01
        assert cfg.diffusion_is_variance_rate is True

    def test_unknown_drift(self):
        with pytest.raises(ConfigError, match="Unknown drift"):
            ModelConfig(drift="quartic")

    def test_unknown_observation(self):
        with pytest.raises(ConfigError, match="Unknown observation"):
            ModelConfig(observation="quadratic")

    def test_polynomial_needs_coefficients(self):
        with pytest.raises(ConfigError):
            ModelConfig(drift="custom_polynomial")

    @pytest.mark.parametrize(
        "field, value",
        [("sigma", 0.0), ("obs_noise", -1.0), ("time_step", 0.0), ("obs_stride", 0)],
    )
    def test_rejects_non_positive(self, field: str, value: float):
        with pytest.raises(ConfigError):
            ModelConfig(**{field: value})

    def test_obs_dimension_bounded_by_state(self):
        with pytest.raises(ConfigError):
            ModelConfig(dimension=2, obs_dimension=3)


class TestFilterConfig:
    def test_defaults(self):
        cfg = FilterConfig()
        assert cfg.proposal == "implicit_auto"
        assert cfg.resample_every == 1
        assert cfg.tolerance is None

    def test_unknown_proposal(self):
        with pytest.raises(ConfigError, match="Unknown proposal"):
            FilterConfig(proposal="bootstrap")

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_particles": 0},
            {"resample_every": -1},
            {"backward_lag": -1},
            {"tolerance": 0.0},
            {"max_iter": 0},
            {"n_workers": 0},
        ],
    )
    def test_invalid_values(self, kwargs: dict):
        with pytest.raises(ConfigError):
            FilterConfig(**kwargs)


class TestRmConfig:
    def test_defaults(self):
        cfg = RmConfig(sigma_init=0.1)
        assert cfg.scale_c == RM_SCALE_C
        assert cfg.n_particles == RM_PARTICLES
        assert cfg.n_steps == RM_STEPS

    def test_step_sizes_follow_one_over_n(self):
        cfg = RmConfig(sigma_init=1.0, alpha_1=2.0)
        assert cfg.step_size(1) == 2.0
        assert cfg.step_size(4) == 0.5

    def test_schedule_sums(self):
        cfg = RmConfig(sigma_init=1.0)
        steps = [cfg.step_size(n) for n in range(1, 10_001)]
        assert sum(steps) > 9.0
        assert sum(a * a for a in steps) < 1.6449341

    @pytest.mark.parametrize("length", [1, 2])
    def test_short_segments_rejected(self, length: int):
        with pytest.raises(ConfigError):
            RmConfig(sigma_init=1.0, segment_length=length)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ConfigError):
            RmConfig(sigma_init=0.0)


class TestWorkersFromEnv:
    def test_unset(self, monkeypatch):
        monkeypatch.delenv("IPF_THREADS", raising=False)
        assert workers_from_env(3) == 3

    def test_value(self, monkeypatch):
        monkeypatch.setenv("IPF_THREADS", "4")
        assert workers_from_env() == 4

    def test_clamped_to_one(self, monkeypatch):
        monkeypatch.setenv("IPF_THREADS", "0")
        assert workers_from_env() == 1

    def test_garbage_is_ignored(self, monkeypatch, caplog):
        monkeypatch.setenv("IPF_THREADS", "many")
        assert workers_from_env(2) == 2
        assert "Ignoring" in caplog.text


class TestRunConfig:
    def test_save_and_load(self, tmp_dir: Path):
        path = tmp_dir / "run.json"
        original = RunConfig(
            experiment="table3", seed=11, overrides={"particles": 30}, output_dir="out", fast=True
        )
        original.save(path)

        assert path.exists()
        loaded = RunConfig.load(path)
        assert loaded == original

    def test_missing_file(self, tmp_dir: Path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load(tmp_dir / "nope.json")

    def test_corrupted_file(self, tmp_dir: Path):
        path = tmp_dir / "run.json"
        path.write_text("{invalid json", encoding="utf-8")
        with pytest.raises(ConfigError, match="Invalid config"):
            RunConfig.load(path)

    def test_experiment_is_required(self, tmp_dir: Path):
        path = tmp_dir / "run.json"
        path.write_text(json.dumps({"seed": 1}), encoding="utf-8")
        with pytest.raises(ConfigError):
            RunConfig.load(path)
