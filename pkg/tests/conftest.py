"""Shared pytest fixtures for implicitfilter tests."""

import csv
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from implicitfilter.config import FilterConfig, ModelConfig
from implicitfilter.sde_model import (
    ObservationModel,
    SdeModel,
    build_model,
    build_observation,
    linear_observation,
    static_model,
)
from implicitfilter.utils.rng import ParticleStreams


@pytest.fixture
def tmp_dir(tmp_path: Path) -> Path:
    """Provide a clean temporary directory for each test."""
    return tmp_path


@pytest.fixture
def read_rows() -> Callable[[Path], list[dict[str, str]]]:
    """Read a CSV written by the package into a list of dicts."""

    def read(path: Path) -> list[dict[str, str]]:
        with path.open(newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))

    return read


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def streams() -> ParticleStreams:
    return ParticleStreams(7)


@pytest.fixture
def double_well() -> tuple[SdeModel, ObservationModel]:
    """Double-well SDE with sigma=0.1, s=0.025, dt=0.01 and h(x) = x."""
    cfg = ModelConfig()
    return build_model(cfg), build_observation(cfg)


@pytest.fixture
def random_walk() -> tuple[SdeModel, ObservationModel]:
    """Zero-drift walk with increment variance 0.01 observed directly with noise 0.04."""
    cfg = ModelConfig(drift="zero", sigma=1.0, time_step=0.01, obs_noise=0.04)
    return build_model(cfg), build_observation(cfg)


@pytest.fixture
def random_walk_2d() -> tuple[SdeModel, ObservationModel]:
    """Two-component walk where only the first component is observed."""
    cfg = ModelConfig(drift="zero", sigma=1.0, time_step=0.01, dimension=2, obs_dimension=1)
    return build_model(cfg), build_observation(cfg)


@pytest.fixture
def static_linear() -> tuple[SdeModel, ObservationModel]:
    """Prior N(0, 0.1) with h(x) = x and s = 0.1."""
    return static_model(0.1), linear_observation(1, 1, 0.1)


@pytest.fixture
def filter_config() -> FilterConfig:
    return FilterConfig(n_particles=20, proposal="implicit_auto", resample_every=1, seed=3)
