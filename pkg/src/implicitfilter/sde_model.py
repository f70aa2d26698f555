"""SDE and observation models, Euler discretization, and synthetic data."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as poly

from implicitfilter.config import ModelConfig
from implicitfilter.constants import DOUBLE_WELL_BARRIER, DOUBLE_WELL_CENTER_SQ
from implicitfilter.errors import DimensionMismatch, InvalidInput

logger = logging.getLogger("implicitfilter")

LOG_2PI = float(np.log(2.0 * np.pi))

StateFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SdeModel:
    """dx = f(x, t) dt + g(x, t) dw with diagonal g, discretized with step ``time_step``.

    ``diffusion`` returns the diagonal of g, broadcastable to the state shape.
    With ``diffusion_is_variance_rate`` the diagonal is read as a variance rate
    (increment variance g*dt) instead of an amplitude (increment variance g**2*dt).
    States may carry leading batch axes: every function maps (..., m) to (..., m).
    """

    dimension: int
    drift: StateFn
    diffusion: StateFn
    time_step: float
    diffusion_is_variance_rate: bool = False
    drift_jacobian: StateFn | None = None
    additive_noise: bool = False
    affine_drift: bool = False
    name: str = "custom"

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise InvalidInput("dimension must be >= 1")
        if self.time_step <= 0:
            raise InvalidInput("time_step must be > 0")

    def mean_step(self, x: np.ndarray, t: float) -> np.ndarray:
        """Deterministic part of one Euler step."""
        x = np.asarray(x, dtype=float)
        return x + self.drift(x, t) * self.time_step

    def increment_variance(self, x: np.ndarray, t: float) -> np.ndarray:
        """Per-component variance of the Euler increment started at ``x``."""
        x = np.asarray(x, dtype=float)
        g = np.broadcast_to(np.asarray(self.diffusion(x, t), dtype=float), x.shape)
        if self.diffusion_is_variance_rate:
            return g * self.time_step
        return g**2 * self.time_step

    def noise_scale(self, x: np.ndarray, t: float) -> np.ndarray:
        """Multiplier of the standard-normal noise in one Euler step."""
        x = np.asarray(x, dtype=float)
        g = np.broadcast_to(np.asarray(self.diffusion(x, t), dtype=float), x.shape)
        if self.diffusion_is_variance_rate:
            return np.sqrt(g * self.time_step)
        return g * np.sqrt(self.time_step)

    def mean_step_jacobian(self, x: np.ndarray, t: float) -> np.ndarray:
        """Jacobian of :meth:`mean_step`, shape (..., m, m)."""
        x = np.asarray(x, dtype=float)
        eye = np.eye(self.dimension)
        if self.drift_jacobian is not None:
            return eye + self.drift_jacobian(x, t) * self.time_step
        # central differences, column by column
        step = 1e-6 * np.maximum(1.0, np.abs(x))
        columns = []
        for j in range(self.dimension):
            offset = np.zeros_like(x)
            offset[..., j] = step[..., j]
            diff = self.drift(x + offset, t) - self.drift(x - offset, t)
            columns.append(diff / (2.0 * step[..., j : j + 1]))
        return eye + np.stack(columns, axis=-1) * self.time_step


@dataclass(frozen=True)
class ObservationModel:
    """b = h(x) + G W with diagonal noise covariance ``noise_cov`` (the diagonal of G G^T)."""

    obs_dimension: int
    state_dimension: int
    h: Callable[[np.ndarray], np.ndarray]
    h_jacobian: Callable[[np.ndarray], np.ndarray]
    noise_cov: np.ndarray
    obs_stride: int = 1
    is_linear: bool = False
    is_diagonal: bool = True
    h_inverse: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "custom"

    def __post_init__(self) -> None:
        cov = np.atleast_1d(np.asarray(self.noise_cov, dtype=float))
        object.__setattr__(self, "noise_cov", cov)
        if self.obs_dimension > self.state_dimension:
            raise InvalidInput("obs_dimension must be <= state_dimension")
        if cov.shape != (self.obs_dimension,):
            raise DimensionMismatch(
                f"noise_cov has shape {cov.shape}, expected ({self.obs_dimension},)"
            )
        if np.any(cov <= 0):
            raise InvalidInput("noise_cov entries must be > 0")
        if self.obs_stride < 1:
            raise InvalidInput("obs_stride must be >= 1")

    @property
    def precision(self) -> np.ndarray:
        return 1.0 / self.noise_cov

    def linear_matrix(self) -> np.ndarray:
        """The (k, m) matrix of a linear observation function."""
        if not self.is_linear:
            raise InvalidInput(f"observation {self.name!r} is not linear")
        return np.asarray(self.h_jacobian(np.zeros(self.state_dimension)), dtype=float)


@dataclass(frozen=True)
class Trajectory:
    """A sampled path: ``states[n]`` is x at ``times[n]``."""

    states: np.ndarray
    times: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.states.shape[0] != self.times.shape[0]:
            raise DimensionMismatch("states and times must have the same length")
        if self.times.size > 1:
            spacing = np.diff(self.times)
            if np.any(spacing <= 0) or not np.allclose(spacing, spacing[0]):
                raise InvalidInput("times must be strictly increasing with uniform spacing")

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------
def euler_step(model: SdeModel, x: np.ndarray, t: float, noise: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step: x + f(x, t) dt + g(x, t) sqrt(dt) noise."""
    x = np.asarray(x, dtype=float)
    return model.mean_step(x, t) + model.noise_scale(x, t) * np.asarray(noise, dtype=float)


def transition_logdensity(
    model: SdeModel, x_prev: np.ndarray, x_next: np.ndarray, t: float
) -> np.ndarray:
    """Log density of ``x_next`` after one Euler step from ``x_prev`` (normalized)."""
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    if x_prev.shape[-1] != model.dimension or x_next.shape[-1] != model.dimension:
        raise DimensionMismatch(f"states must have last dimension {model.dimension}")
    var = model.increment_variance(x_prev, t)
    if np.any(var <= 0):
        raise InvalidInput("transition variance must be > 0; diffusion vanishes at x_prev")
    resid = x_next - model.mean_step(x_prev, t)
    return -0.5 * np.sum(resid**2 / var + np.log(var) + LOG_2PI, axis=-1)


def observation_logdensity(obs: ObservationModel, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Log density of observation ``b`` given state ``x``."""
    x = np.asarray(x, dtype=float)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if x.shape[-1] != obs.state_dimension:
        raise DimensionMismatch(
            f"state has last dimension {x.shape[-1]}, expected {obs.state_dimension}"
        )
    if b.shape != (obs.obs_dimension,):
        raise DimensionMismatch(f"observation has shape {b.shape}, expected ({obs.obs_dimension},)")
    resid = obs.h(x) - b
    return -0.5 * np.sum(resid**2 / obs.noise_cov + np.log(obs.noise_cov) + LOG_2PI, axis=-1)


def generate_synthetic(
    model: SdeModel,
    obs: ObservationModel,
    x0: np.ndarray,
    n_steps: int,
    rng_seed: int,
) -> tuple[Trajectory, np.ndarray]:
    """Run one reference path and observe it every ``obs.obs_stride`` steps.

    Returns the path (n_steps + 1 states starting at ``x0``) and an array of
    shape (n_steps // obs_stride, k); row j observes step (j + 1) * obs_stride.
    """
    if n_steps < 1:
        raise InvalidInput("n_steps must be >= 1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.dimension,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({model.dimension},)")

    model_seq, obs_seq = np.random.SeedSequence(rng_seed).spawn(2)
    model_rng = np.random.default_rng(model_seq)
    obs_rng = np.random.default_rng(obs_seq)

    dt = model.time_step
    states = np.empty((n_steps + 1, model.dimension))
    states[0] = x0
    noise = model_rng.standard_normal((n_steps, model.dimension))
    for n in range(n_steps):
        states[n + 1] = euler_step(model, states[n], n * dt, noise[n])

    observed_steps = np.arange(obs.obs_stride, n_steps + 1, obs.obs_stride)
    obs_noise = obs_rng.standard_normal((observed_steps.size, obs.obs_dimension))
    observations = obs.h(states[observed_steps]) + np.sqrt(obs.noise_cov) * obs_noise

    times = np.arange(n_steps + 1) * dt
    logger.debug(
        "Generated %d steps and %d observations (seed=%d)", n_steps, observed_steps.size, rng_seed
    )
    return Trajectory(states=states, times=times), observations


# ---------------------------------------------------------------------------
# Registries
# ---------------------------------------------------------------------------
def double_well_potential(x: np.ndarray) -> np.ndarray:
    """V(x) = 2.5 (x^2 - 0.5)^2."""
    x = np.asarray(x, dtype=float)
    return DOUBLE_WELL_BARRIER * (x**2 - DOUBLE_WELL_CENTER_SQ) ** 2


def _double_well_drift(center_sq: float) -> tuple[StateFn, StateFn]:
    scale = 4.0 * DOUBLE_WELL_BARRIER

    def drift(x: np.ndarray, t: float) -> np.ndarray:
        return -scale * x * (x**2 - center_sq)

    def jacobian(x: np.ndarray, t: float) -> np.ndarray:
        return _diag(-scale * (3.0 * x**2 - center_sq))

    return drift, jacobian


def _polynomial_drift(coefficients: list[float]) -> tuple[StateFn, StateFn]:
    coeffs = np.asarray(coefficients, dtype=float)
    deriv = poly.polyder(coeffs) if coeffs.size > 1 else np.zeros(1)

    def drift(x: np.ndarray, t: float) -> np.ndarray:
        return poly.polyval(x, coeffs)

    def jacobian(x: np.ndarray, t: float) -> np.ndarray:
        return _diag(poly.polyval(x, deriv) * np.ones_like(x))

    return drift, jacobian


def _diag(d: np.ndarray) -> np.ndarray:
    """Stack the last axis of ``d`` into diagonal matrices: (..., m) -> (..., m, m)."""
    return d[..., :, None] * np.eye(d.shape[-1])


def constant_diffusion(sigma: float) -> StateFn:
    def diffusion(x: np.ndarray, t: float) -> np.ndarray:
        return np.full(np.shape(x), sigma)

    return diffusion


def build_model(cfg: ModelConfig) -> SdeModel:
    """Resolve a :class:`ModelConfig` into an :class:`SdeModel`."""
    affine = False
    if cfg.drift == "double_well":
        center_sq = 1.0 if cfg.unit_well_drift else DOUBLE_WELL_CENTER_SQ
        drift, jacobian = _double_well_drift(center_sq)
    elif cfg.drift == "zero":
        drift, jacobian = _polynomial_drift([0.0])
        affine = True
    else:
        drift, jacobian = _polynomial_drift(cfg.polynomial_coefficients)
        affine = len(cfg.polynomial_coefficients) <= 2

    return SdeModel(
        dimension=cfg.dimension,
        drift=drift,
        diffusion=constant_diffusion(cfg.sigma),
        time_step=cfg.time_step,
        diffusion_is_variance_rate=cfg.diffusion_is_variance_rate,
        drift_jacobian=jacobian,
        additive_noise=True,
        affine_drift=affine,
        name=cfg.drift,
    )


def linear_observation(m: int, k: int, noise: float, stride: int = 1) -> ObservationModel:
    """h(x) = first k components of x."""
    select = np.eye(k, m)

    def h(x: np.ndarray) -> np.ndarray:
        return x[..., :k]

    def h_jacobian(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(select, np.shape(x)[:-1] + (k, m))

    return ObservationModel(
        obs_dimension=k,
        state_dimension=m,
        h=h,
        h_jacobian=h_jacobian,
        noise_cov=np.full(k, noise),
        obs_stride=stride,
        is_linear=True,
        h_inverse=lambda b: b,
        name="linear",
    )


def cubic_observation(m: int, k: int, noise: float, stride: int = 1) -> ObservationModel:
    """h(x) = cubes of the first k components of x."""

    def h(x: np.ndarray) -> np.ndarray:
        return x[..., :k] ** 3

    def h_jacobian(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        jac = np.zeros(x.shape[:-1] + (k, m))
        idx = np.arange(k)
        jac[..., idx, idx] = 3.0 * x[..., :k] ** 2
        return jac

    return ObservationModel(
        obs_dimension=k,
        state_dimension=m,
        h=h,
        h_jacobian=h_jacobian,
        noise_cov=np.full(k, noise),
        obs_stride=stride,
        is_linear=False,
        h_inverse=np.cbrt,
        name="cubic",
    )


def build_observation(cfg: ModelConfig) -> ObservationModel:
    """Resolve the observation part of a :class:`ModelConfig`."""
    k = cfg.dimension if cfg.obs_dimension is None else cfg.obs_dimension
    factory = linear_observation if cfg.observation == "linear" else cubic_observation
    return factory(cfg.dimension, k, cfg.obs_noise, cfg.obs_stride)


def static_model(sigma: float, dimension: int = 1) -> SdeModel:
    """Prior N(0, sigma) as a single zero-drift step of unit length.

    Used for the one-step problems F(x) = x^2/(2 sigma) + (h(x) - b)^2/(2 s).
    """
    return build_model(
        ModelConfig(
            drift="zero",
            sigma=sigma,
            diffusion_is_variance_rate=True,
            dimension=dimension,
            time_step=1.0,
        )
    )
