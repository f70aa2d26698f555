"""Noise-parameter identification by Robbins-Monro iteration on the increment statistic T."""

from __future__ import annotations

import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from implicitfilter.config import FilterConfig, ModelConfig, RmConfig
from implicitfilter.constants import (
    RM_LOWER_BOUND,
    RM_OBS_NOISE,
    RM_PROJECTION_FLOOR,
    RM_SCALE_C,
    RM_STOP_CONSECUTIVE,
    RM_STOP_RELATIVE_CHANGE,
    RM_TIME_STEP,
    RM_UPPER_BOUND,
    STREAM_DATA,
)
from implicitfilter.errors import ConfigError, DegenerateIncrements, Divergence, InvalidInput
from implicitfilter.filter_engine import Ensemble, FilterEngine
from implicitfilter.sde_model import (
    ObservationModel,
    SdeModel,
    build_model,
    generate_synthetic,
    linear_observation,
)
from implicitfilter.utils.rng import replicate_seed

logger = logging.getLogger("implicitfilter")

ModelFactory = Callable[[float], SdeModel]


@dataclass
class RmTrace:
    """Iterates sigma_1, sigma_2, ... and the statistic T(sigma_n) behind each update."""

    sigmas: list[float]
    statistics: list[float] = field(default_factory=list)
    sigma_star: float | None = None
    converged: bool = False

    @property
    def final(self) -> float:
        return self.sigmas[-1]

    @property
    def n_iterations(self) -> int:
        return len(self.statistics)

    def ratios(self) -> np.ndarray:
        """Iterates divided by sigma* (or by sigma_1 when sigma* is unknown)."""
        reference = self.sigma_star if self.sigma_star is not None else self.sigmas[0]
        return np.asarray(self.sigmas) / reference

    def header(self) -> list[str]:
        return ["iteration", "sigma_over_sigma_star", "T"]

    def rows(self) -> list[list[Any]]:
        """Row n holds the estimate after n updates and the T value that produced it."""
        ratios = self.ratios()
        rows: list[list[Any]] = [[0, float(ratios[0]), None]]
        for n, t in enumerate(self.statistics, start=1):
            rows.append([n, float(ratios[n]), t])
        return rows


# ---------------------------------------------------------------------------
# The statistic
# ---------------------------------------------------------------------------
def _lag_one_sums(increments: np.ndarray) -> np.ndarray:
    """(sum D_i D_{i-1}, sum D_i^2, sum D_{i-1}^2) over i = 2..N."""
    d = np.asarray(increments, dtype=float).ravel()
    if d.size < 2:
        return np.zeros(3)
    current, previous = d[1:], d[:-1]
    return np.array(
        [float(current @ previous), float(current @ current), float(previous @ previous)]
    )


def _statistic_from_sums(sums: np.ndarray, scale_c: float) -> float:
    numerator, current, previous = sums
    if current == 0.0 or previous == 0.0:
        raise DegenerateIncrements("increment sums vanish; the autocorrelation is undefined")
    return float(scale_c * numerator / np.sqrt(current * previous))


def statistic_T(increments: np.ndarray, scale_c: float = RM_SCALE_C) -> float:
    """C times the lag-one normalized autocorrelation of the increments.

    Raises:
        ValueError: fewer than three increments.
        DegenerateIncrements: either denominator sum is zero.
    """
    d = np.asarray(increments, dtype=float).ravel()
    if d.size < 3:
        raise InvalidInput("statistic_T needs at least 3 increments")
    return _statistic_from_sums(_lag_one_sums(d), scale_c)


# ---------------------------------------------------------------------------
# The identification problem
# ---------------------------------------------------------------------------
def identification_model(sigma: float, time_step: float = RM_TIME_STEP) -> SdeModel:
    """dx = sqrt(sigma) dw: zero drift, increment variance sigma * time_step."""
    return build_model(
        ModelConfig(
            drift="zero",
            sigma=sigma,
            diffusion_is_variance_rate=True,
            time_step=time_step,
        )
    )


def identification_observation(noise: float = RM_OBS_NOISE) -> ObservationModel:
    return linear_observation(1, 1, noise)


def synthetic_record(
    sigma_star: float, n_steps: int, seed: int, obs: ObservationModel | None = None
) -> np.ndarray:
    """One observation record of the identification model run at sigma*."""
    obs = obs or identification_observation()
    _, observations = generate_synthetic(
        identification_model(sigma_star), obs, np.zeros(1), n_steps, seed
    )
    return observations


def _filter_config(cfg: RmConfig, n_workers: int, resample_every: int = 0) -> FilterConfig:
    return FilterConfig(
        n_particles=cfg.n_particles,
        proposal="implicit_auto",
        resample_every=resample_every,
        backward_lag=0,
        seed=cfg.seed,
        n_workers=n_workers,
    )


def filter_mean_increments(
    model: SdeModel,
    obs: ObservationModel,
    observations: np.ndarray,
    x0: np.ndarray,
    cfg: RmConfig,
    n_workers: int = 1,
) -> np.ndarray:
    """Increments of the posterior-mean path of an unresampled run, with m_0 = x0.

    Only the first state component is used.
    """
    output = FilterEngine(model, obs, _filter_config(cfg, n_workers)).run(x0, observations)
    path = np.concatenate([np.atleast_1d(np.asarray(x0, dtype=float))[:1], output.estimates[:, 0]])
    return np.diff(path)


def _pooled_sums(
    model: SdeModel,
    obs: ObservationModel,
    observations: np.ndarray,
    x0: np.ndarray,
    cfg: RmConfig,
    n_workers: int,
) -> np.ndarray:
    """Lag-one sums pooled over segments of length L (one segment when L = 0).

    Each segment is filtered without resampling for the statistic, then filtered
    again with resampling to hand its final ensemble to the next segment.
    """
    observations = np.asarray(observations, dtype=float).reshape(len(observations), -1)
    n = observations.shape[0]
    length = cfg.segment_length or n
    measuring = FilterEngine(model, obs, _filter_config(cfg, n_workers))
    seeding = FilterEngine(model, obs, _filter_config(cfg, n_workers, resample_every=1))

    ens = Ensemble.initial(x0, cfg.n_particles)
    sums = np.zeros(3)
    for start in range(0, n, length):
        segment = observations[start : start + length]
        output = measuring.run_from(ens, segment)
        path = np.concatenate([ens.mean()[:1], output.estimates[:, 0]])
        sums += _lag_one_sums(np.diff(path))
        if start + length < n:
            ens = seeding.run_from(ens, segment).final
    return sums


def evaluate_T(
    sigma: float,
    model_factory: ModelFactory,
    obs: ObservationModel,
    observations: np.ndarray,
    x0: np.ndarray,
    cfg: RmConfig,
    n_workers: int = 1,
) -> float:
    """T(sigma) from one (possibly segmented) filter run over ``observations``."""
    sums = _pooled_sums(model_factory(sigma), obs, observations, x0, cfg, n_workers)
    return _statistic_from_sums(sums, cfg.scale_c)


# ---------------------------------------------------------------------------
# Robbins-Monro
# ---------------------------------------------------------------------------
def _next_sigma(sigma: float, alpha: float, t: float, update: str) -> float:
    """One Robbins-Monro step before projection.

    T is negative when the assumed noise is too large. The additive rule is
    sigma_{n+1} = sigma_n - alpha_n * (-sigma_n T), a step in units of sigma_n;
    the log rule takes the same step on log sigma.
    """
    if update == "log":
        return sigma * float(np.exp(alpha * t))
    return sigma - alpha * (-sigma * t)


def _robbins_monro(
    evaluate: Callable[[float], float], cfg: RmConfig, sigma_star: float | None
) -> RmTrace:
    """Iterate :func:`_next_sigma`, projected onto sigma >= 1e-3 sigma_n and range-checked."""
    sigma = cfg.sigma_init
    lower, upper = RM_LOWER_BOUND * cfg.sigma_init, RM_UPPER_BOUND * cfg.sigma_init
    trace = RmTrace(sigmas=[sigma], sigma_star=sigma_star)
    small_changes = 0

    for n in range(1, cfg.max_iterations + 1):
        try:
            t = evaluate(sigma)
        except DegenerateIncrements as exc:
            logger.warning("Iteration %d: %s; using T=0", n, exc)
            t = 0.0

        proposed = _next_sigma(sigma, cfg.step_size(n), t, cfg.update)
        updated = max(proposed, RM_PROJECTION_FLOOR * sigma)
        if not lower <= updated <= upper:
            raise Divergence(
                f"iterate {updated:.4g} left [{lower:.4g}, {upper:.4g}] at iteration {n}"
            )

        trace.statistics.append(t)
        trace.sigmas.append(updated)
        logger.info("RM iteration %d: T=%.4f sigma=%.6g", n, t, updated)

        if abs(updated - sigma) / sigma < RM_STOP_RELATIVE_CHANGE:
            small_changes += 1
        else:
            small_changes = 0
        sigma = updated
        if small_changes >= RM_STOP_CONSECUTIVE:
            trace.converged = True
            break

    logger.info("Identification stopped after %d iterations: sigma=%.6g", trace.n_iterations, sigma)
    return trace


def identify(
    model_factory: ModelFactory,
    obs: ObservationModel,
    observations: np.ndarray,
    x0: np.ndarray,
    cfg: RmConfig,
    sigma_star: float | None = None,
    n_workers: int = 1,
) -> RmTrace:
    """Robbins-Monro search for the noise parameter over one fixed observation record.

    Every iteration reruns the filter (no resampling, no backward sampling) with
    the same random streams, so T depends on sigma alone.
    """
    whole = replace(cfg, segment_length=0)

    def evaluate(sigma: float) -> float:
        return evaluate_T(sigma, model_factory, obs, observations, x0, whole, n_workers)

    return _robbins_monro(evaluate, whole, sigma_star)


def segmented_identify(
    model_factory: ModelFactory,
    obs: ObservationModel,
    observations: np.ndarray,
    x0: np.ndarray,
    cfg: RmConfig,
    sigma_star: float | None = None,
    n_workers: int = 1,
) -> RmTrace:
    """:func:`identify` with T pooled over segments of ``cfg.segment_length`` steps."""
    if cfg.segment_length == 0:
        raise ConfigError("segmented_identify needs segment_length >= 3")

    def evaluate(sigma: float) -> float:
        return evaluate_T(sigma, model_factory, obs, observations, x0, cfg, n_workers)

    return _robbins_monro(evaluate, cfg, sigma_star)


def replicated_identify(
    cfg: RmConfig,
    sigma_star: float,
    n_trials: int,
    n_workers: int = 1,
) -> list[RmTrace]:
    """Independent identification trials, each with its own data record and filter seed.

    Trial i uses seeds derived from (cfg.seed, i).
    """
    obs = identification_observation()
    x0 = np.zeros(1)
    run = segmented_identify if cfg.segment_length else identify

    def trial(i: int) -> RmTrace:
        seed = replicate_seed(cfg.seed, i)
        data_seed = replicate_seed(seed, STREAM_DATA)
        observations = synthetic_record(sigma_star, cfg.n_steps, data_seed, obs)
        return run(
            identification_model, obs, observations, x0, replace(cfg, seed=seed), sigma_star
        )

    if n_workers <= 1:
        return [trial(i) for i in range(n_trials)]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(trial, range(n_trials)))
