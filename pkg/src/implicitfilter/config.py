"""Configuration dataclasses with JSON loading and saving."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from implicitfilter.constants import (
    DOUBLE_WELL_OBS_NOISE,
    DOUBLE_WELL_SIGMA,
    DOUBLE_WELL_TIME_STEP,
    DRIFT_REGISTRY,
    MAX_SOLVER_ITER,
    OBSERVATION_REGISTRY,
    PROPOSALS,
    RM_ALPHA_1,
    RM_ITERATIONS,
    RM_PARTICLES,
    RM_SCALE_C,
    RM_STEPS,
    RM_UPDATE_RULES,
    THREADS_ENV_VAR,
)
from implicitfilter.errors import ConfigError

logger = logging.getLogger("implicitfilter")


def workers_from_env(default: int = 1) -> int:
    """Return the worker cap from IPF_THREADS, or ``default`` when unset or invalid."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", THREADS_ENV_VAR, raw)
        return default
    return max(1, value)


@dataclass
class ModelConfig:
    """SDE and observation settings, resolved through the registries in sde_model."""

    drift: str = "double_well"
    unit_well_drift: bool = False
    polynomial_coefficients: list[float] = field(default_factory=list)
    sigma: float = DOUBLE_WELL_SIGMA
    diffusion_is_variance_rate: bool = True
    dimension: int = 1
    time_step: float = DOUBLE_WELL_TIME_STEP
    observation: str = "linear"
    obs_dimension: int | None = None
    obs_noise: float = DOUBLE_WELL_OBS_NOISE
    obs_stride: int = 1

    def __post_init__(self) -> None:
        if self.drift not in DRIFT_REGISTRY:
            raise ConfigError(f"Unknown drift {self.drift!r}; expected one of {DRIFT_REGISTRY}")
        if self.observation not in OBSERVATION_REGISTRY:
            raise ConfigError(
                f"Unknown observation {self.observation!r}; expected one of {OBSERVATION_REGISTRY}"
            )
        if self.drift == "custom_polynomial" and not self.polynomial_coefficients:
            raise ConfigError("custom_polynomial drift needs polynomial_coefficients")
        if self.dimension < 1:
            raise ConfigError("dimension must be >= 1")
        if self.time_step <= 0:
            raise ConfigError("time_step must be > 0")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if self.obs_noise <= 0:
            raise ConfigError("obs_noise must be > 0")
        if self.obs_stride < 1:
            raise ConfigError("obs_stride must be >= 1")
        k = self.dimension if self.obs_dimension is None else self.obs_dimension
        if not 1 <= k <= self.dimension:
            raise ConfigError("obs_dimension must satisfy 1 <= k <= dimension")


@dataclass
class FilterConfig:
    """Settings of one filter run."""

    n_particles: int = 50
    proposal: str = "implicit_auto"
    resample_every: int = 1
    backward_lag: int = 0
    seed: int = 0
    tolerance: float | None = None
    max_iter: int = MAX_SOLVER_ITER
    use_random_direction: bool = False
    n_workers: int = 1
    debug_dump: str | None = None

    def __post_init__(self) -> None:
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.proposal not in PROPOSALS:
            raise ConfigError(f"Unknown proposal {self.proposal!r}; expected one of {PROPOSALS}")
        if self.resample_every < 0:
            raise ConfigError("resample_every must be >= 0 (0 = never)")
        if self.backward_lag < 0:
            raise ConfigError("backward_lag must be >= 0")
        if (self.tolerance is not None and self.tolerance <= 0) or self.max_iter < 1:
            raise ConfigError("tolerance must be > 0 and max_iter >= 1")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")


@dataclass
class RmConfig:
    """Robbins-Monro identification settings. Step sizes are alpha_1 / n."""

    sigma_init: float
    scale_c: float = RM_SCALE_C
    alpha_1: float = RM_ALPHA_1
    max_iterations: int = RM_ITERATIONS
    segment_length: int = 0
    n_particles: int = RM_PARTICLES
    n_steps: int = RM_STEPS
    seed: int = 0
    update: str = "additive"

    def __post_init__(self) -> None:
        if self.sigma_init <= 0:
            raise ConfigError("sigma_init must be > 0")
        if self.alpha_1 <= 0:
            raise ConfigError("alpha_1 must be > 0")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.segment_length != 0 and self.segment_length < 3:
            raise ConfigError("segment_length must be 0 (no segmentation) or >= 3")
        if self.n_steps < 3:
            raise ConfigError("n_steps must be >= 3")
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.update not in RM_UPDATE_RULES:
            raise ConfigError(f"update must be one of {RM_UPDATE_RULES}, got {self.update!r}")

    def step_size(self, n: int) -> float:
        """Return alpha_n for the 1-based iteration index ``n``."""
        return self.alpha_1 / n


@dataclass
class RunConfig:
    """A named experiment with its overrides, as read from a config file."""

    experiment: str = "table1"
    seed: int = 0
    overrides: dict[str, Any] = field(default_factory=dict)
    output_dir: str = "ipf_output"
    fast: bool = False

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------
    @classmethod
    def load(cls, path: Path) -> RunConfig:
        """Load a run configuration from a JSON file."""
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")

        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            return cls(
                experiment=raw["experiment"],
                seed=int(raw.get("seed", 0)),
                overrides=dict(raw.get("overrides", {})),
                output_dir=raw.get("output_dir", "ipf_output"),
                fast=bool(raw.get("fast", False)),
            )
        except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
            logger.error("Failed to parse config %s: %s", path, exc)
            raise ConfigError(f"Invalid config file {path}: {exc}") from exc

    def save(self, path: Path) -> None:
        """Persist this configuration as JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, ensure_ascii=False), encoding="utf-8")
        logger.info("Config saved to %s", path)
