"""Sequential implicit and standard (SIR) particle filters."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import logsumexp

from implicitfilter.config import FilterConfig
from implicitfilter.constants import (
    STREAM_BACKWARD,
    STREAM_PROPOSAL,
    STREAM_RESAMPLE,
    WEIGHT_COLLAPSE_LEVEL,
)
from implicitfilter.errors import DimensionMismatch, InvalidInput
from implicitfilter.implicit_sampler import (
    ImplicitSolution,
    UShapedPlan,
    build_backward_objective,
    build_joint_objective,
    build_objective,
    default_tolerance,
    linear_gaussian_proposal,
    plan_u_shaped,
    routes_to_algorithm_b,
    solve_algorithm_b_batch,
    solve_implicit,
)
from implicitfilter.sde_model import (
    LOG_2PI,
    ObservationModel,
    SdeModel,
    Trajectory,
    euler_step,
    observation_logdensity,
)
from implicitfilter.utils.csv_io import append_rows, write_csv
from implicitfilter.utils.rng import ParticleStreams

logger = logging.getLogger("implicitfilter")


@dataclass(eq=False)
class Ensemble:
    """Weighted particles at step ``step``; row i of ``positions`` is particle i.

    ``history`` holds up to ``history_depth`` earlier position arrays, oldest
    first, kept aligned with the current particles through resampling.
    """

    positions: np.ndarray
    log_weights: np.ndarray
    step: int = 0
    history: tuple[np.ndarray, ...] = ()
    history_depth: int = 0

    def __post_init__(self) -> None:
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.log_weights.shape != (self.positions.shape[0],):
            raise DimensionMismatch(
                f"log_weights has shape {self.log_weights.shape}, "
                f"expected ({self.positions.shape[0]},)"
            )

    @classmethod
    def initial(cls, x0: np.ndarray, n_particles: int, history_depth: int = 0) -> Ensemble:
        """All particles at ``x0`` with equal weights."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        positions = np.tile(x0, (n_particles, 1))
        log_weights = np.full(n_particles, -np.log(n_particles))
        return cls(positions=positions, log_weights=log_weights, history_depth=history_depth)

    # ------------------------------------------------------------------
    # Statistics
    # ------------------------------------------------------------------
    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def normalized_weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def normalized(self) -> Ensemble:
        return self._replace(log_weights=self.log_weights - logsumexp(self.log_weights))

    def mean(self) -> np.ndarray:
        return self.normalized_weights() @ self.positions

    def variance(self) -> np.ndarray:
        w = self.normalized_weights()
        return w @ (self.positions - w @ self.positions) ** 2

    def ess(self) -> float:
        """Effective sample size 1 / sum(W_i^2)."""
        return float(1.0 / np.sum(self.normalized_weights() ** 2))

    def entropy(self) -> float:
        w = self.normalized_weights()
        w = w[w > 0]
        return float(-np.sum(w * np.log(w)))

    # ------------------------------------------------------------------
    # Transitions
    # ------------------------------------------------------------------
    def advance(
        self,
        positions: np.ndarray,
        log_increments: np.ndarray,
        n_steps: int = 1,
        intermediate: Sequence[np.ndarray] = (),
    ) -> Ensemble:
        """Move every particle ``n_steps`` forward and add the weight increments."""
        history = self.history
        if self.history_depth:
            history = (*history, self.positions, *intermediate)[-self.history_depth :]
        return Ensemble(
            positions=positions,
            log_weights=self.log_weights + log_increments,
            step=self.step + n_steps,
            history=history,
            history_depth=self.history_depth,
        )

    def reindexed(self, indices: np.ndarray) -> Ensemble:
        """Offspring ``indices`` with equal weights; history follows the lineage."""
        n = indices.size
        return self._replace(
            positions=self.positions[indices],
            log_weights=np.full(n, -np.log(n)),
            history=tuple(past[indices] for past in self.history),
        )

    def with_history_entry(self, lag: int, values: np.ndarray) -> Ensemble:
        history = list(self.history)
        history[-lag] = values
        return self._replace(history=tuple(history))

    def _replace(self, **changes: Any) -> Ensemble:
        fields = {
            "positions": self.positions,
            "log_weights": self.log_weights,
            "step": self.step,
            "history": self.history,
            "history_depth": self.history_depth,
        }
        fields.update(changes)
        return Ensemble(**fields)


@dataclass
class FilterOutput:
    """Per-observation statistics of a filter run, computed from normalized weights.

    With a backward lag, ``smoothed`` maps a step to the weighted mean of its
    refreshed states; a later refresh of the same step (larger lag, more data)
    overwrites an earlier one.
    """

    steps: list[int] = field(default_factory=list)
    means: list[np.ndarray] = field(default_factory=list)
    variances: list[np.ndarray] = field(default_factory=list)
    ess: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    truth: list[np.ndarray | None] = field(default_factory=list)
    backward_log_adjustments: list[np.ndarray] = field(default_factory=list)
    smoothed: dict[int, np.ndarray] = field(default_factory=dict)
    final: Ensemble | None = None

    def record(self, ens: Ensemble, truth: np.ndarray | None = None) -> None:
        self.steps.append(ens.step)
        self.means.append(ens.mean())
        self.variances.append(ens.variance())
        self.ess.append(ens.ess())
        self.entropy.append(ens.entropy())
        self.truth.append(truth)

    def record_smoothed(self, ens: Ensemble, lag: int) -> None:
        """Store the weighted mean of the history entry ``lag`` steps back."""
        self.smoothed[ens.step - lag] = ens.normalized_weights() @ ens.history[-lag]

    @property
    def estimates(self) -> np.ndarray:
        return np.array(self.means)

    @property
    def smoothed_estimates(self) -> np.ndarray:
        """Smoothed means aligned with ``steps``; NaN where a step was never refreshed."""
        m = self.means[0].size if self.means else 1
        out = np.full((len(self.steps), m), np.nan)
        for k, step in enumerate(self.steps):
            if step in self.smoothed:
                out[k] = self.smoothed[step]
        return out

    def header(self) -> list[str]:
        m = self.means[0].size if self.means else 1
        names = [f"x{j}" for j in range(m)] if m > 1 else ["x"]
        smoothed = [f"smoothed_{n}" for n in names] if self.smoothed else []
        return [
            "step",
            *(f"truth_{n}" for n in names),
            *(f"estimate_{n}" for n in names),
            *(f"variance_{n}" for n in names),
            *smoothed,
            "ess",
            "entropy",
        ]

    def rows(self) -> list[list[Any]]:
        rows = []
        for k, step in enumerate(self.steps):
            m = self.means[k].size
            truth = self.truth[k] if self.truth[k] is not None else [None] * m
            smoothed = []
            if self.smoothed:
                smoothed = list(self.smoothed[step]) if step in self.smoothed else [None] * m
            rows.append(
                [
                    step,
                    *truth,
                    *self.means[k],
                    *self.variances[k],
                    *smoothed,
                    self.ess[k],
                    self.entropy[k],
                ]
            )
        return rows

    def write_csv(self, path: Path) -> Path:
        return write_csv(path, self.header(), self.rows())


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------
def filter_step(
    ens: Ensemble,
    b_next: np.ndarray | None,
    model: SdeModel,
    obs: ObservationModel,
    cfg: FilterConfig,
    streams: ParticleStreams,
) -> Ensemble:
    """Advance one step with the configured proposal, normalize, and resample if due."""
    return _maybe_resample(propose_step(ens, b_next, model, obs, cfg, streams), cfg, streams)


def propose_step(
    ens: Ensemble,
    b_next: np.ndarray | None,
    model: SdeModel,
    obs: ObservationModel,
    cfg: FilterConfig,
    streams: ParticleStreams,
) -> Ensemble:
    """One weighted step without resampling.

    Each particle draws xi ~ N(0, I), solves F(X) - phi = |xi|^2/2 and gains the
    log-weight increment -(phi + log_normalizer) + log J.
    """
    if cfg.proposal == "standard_sir":
        return _sir_propose(ens, b_next, model, obs, streams)

    b = None if b_next is None else np.atleast_1d(np.asarray(b_next, dtype=float))
    step = ens.step + 1
    xi = streams.normals(step, ens.n_particles, ens.dim, STREAM_PROPOSAL)
    if b is not None and _closed_form_applies(model, obs, cfg):
        positions, increments = _linear_gaussian_batch(ens, b, model, obs, xi, cfg)
    else:
        objectives = [
            build_objective(model, obs, x, b, ens.step * model.time_step) for x in ens.positions
        ]
        positions, increments = _solve_particles(ens, objectives, xi, cfg, step)
    return ens.advance(positions, increments).normalized()


def standard_sir_step(
    ens: Ensemble,
    b_next: np.ndarray | None,
    model: SdeModel,
    obs: ObservationModel,
    streams: ParticleStreams,
    cfg: FilterConfig | None = None,
) -> Ensemble:
    """Propagate with the dynamics, weight by the observation likelihood, normalize."""
    weighted = _sir_propose(ens, b_next, model, obs, streams)
    return weighted if cfg is None else _maybe_resample(weighted, cfg, streams)


def resample(ens: Ensemble, rng: np.random.Generator) -> Ensemble:
    """Multinomial resampling.

    Offspring k takes the index i with C_{i-1} < theta_k <= C_i, where C is the
    cumulative weight divided by its total and theta_k is uniform on [0, 1).
    """
    cumulative = np.cumsum(ens.normalized_weights())
    cumulative /= cumulative[-1]
    theta = rng.random(ens.n_particles)
    indices = np.minimum(np.searchsorted(cumulative, theta, side="left"), ens.n_particles - 1)
    return ens.reindexed(indices)


def backward_resample(
    ens: Ensemble,
    model: SdeModel,
    obs: ObservationModel,
    b_mid: np.ndarray | None,
    cfg: FilterConfig,
    streams: ParticleStreams,
    lag: int = 1,
) -> tuple[Ensemble, np.ndarray]:
    """Redraw the state ``lag`` steps back given its two neighbours and its observation.

    Returns the ensemble with the refreshed history entry and the per-particle
    log adjustments -(phi + log_normalizer) + log J. Particle weights are left
    unchanged.
    """
    if len(ens.history) < lag + 1:
        raise InvalidInput(f"backward_resample at lag {lag} needs {lag + 1} past states")
    before = ens.history[-lag - 1]
    middle_step = ens.step - lag
    after = ens.positions if lag == 1 else ens.history[-lag + 1]
    b = None if b_mid is None else np.atleast_1d(np.asarray(b_mid, dtype=float))

    objectives = [
        build_backward_objective(model, obs, before[i], after[i], b, middle_step * model.time_step)
        for i in range(ens.n_particles)
    ]
    xi = streams.normals(middle_step, ens.n_particles, ens.dim, STREAM_BACKWARD)
    tol = cfg.tolerance if cfg.tolerance is not None else default_tolerance(ens.dim)
    proposal = "implicit_auto" if cfg.proposal == "standard_sir" else cfg.proposal

    def solve(i: int) -> ImplicitSolution:
        return solve_implicit(
            objectives[i], xi[i], proposal, tol, cfg.max_iter, cfg.use_random_direction
        )

    solutions = _map_particles(solve, ens.n_particles, cfg.n_workers)
    refreshed = np.stack([s.position for s in solutions])
    adjustments = np.array(
        [s.log_weight - obj.log_normalizer for s, obj in zip(solutions, objectives)]
    )
    logger.debug("Backward refresh at step %d (lag %d)", middle_step, lag)
    return ens.with_history_entry(lag, refreshed), adjustments


def sparse_gap_step(
    ens: Ensemble,
    b_next: np.ndarray,
    gap: int,
    model: SdeModel,
    obs: ObservationModel,
    cfg: FilterConfig,
    streams: ParticleStreams,
) -> Ensemble:
    """Sample the ``gap`` states up to the next observation jointly, then resample if due.

    The reference variable has gap * m components. gap = 1 is :func:`filter_step`.
    """
    if gap < 1:
        raise InvalidInput("gap must be >= 1")
    if gap == 1:
        return filter_step(ens, b_next, model, obs, cfg, streams)
    return _maybe_resample(_propose_gap(ens, b_next, gap, model, obs, cfg, streams), cfg, streams)


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------
class FilterEngine:
    """Runs a filter over an observation record.

    Observation j is taken at step (j + 1) * obs_stride. Statistics are recorded
    from the weighted ensemble before resampling.
    """

    def __init__(self, model: SdeModel, obs: ObservationModel, config: FilterConfig) -> None:
        if obs.state_dimension != model.dimension:
            raise DimensionMismatch("observation and model state dimensions differ")
        self._model = model
        self._obs = obs
        self._config = config
        self._streams = ParticleStreams(config.seed)

    # ------------------------------------------------------------------
    # Public API
    # ------------------------------------------------------------------
    @property
    def config(self) -> FilterConfig:
        return self._config

    @property
    def streams(self) -> ParticleStreams:
        return self._streams

    def run(
        self,
        x0: np.ndarray,
        observations: np.ndarray,
        truth: Trajectory | None = None,
        dump_path: Path | None = None,
    ) -> FilterOutput:
        """Filter ``observations`` (shape (J, k)) starting from the point mass at ``x0``."""
        depth = self._config.backward_lag + 1 if self._config.backward_lag else 0
        ens = Ensemble.initial(x0, self._config.n_particles, history_depth=depth)
        return self.run_from(ens, observations, truth, dump_path)

    def run_from(
        self,
        ens: Ensemble,
        observations: np.ndarray,
        truth: Trajectory | None = None,
        dump_path: Path | None = None,
    ) -> FilterOutput:
        """Continue filtering from ``ens``; random streams stay keyed by the global step."""
        cfg, obs = self._config, self._obs
        observations = np.asarray(observations, dtype=float).reshape(-1, obs.obs_dimension)
        stride = obs.obs_stride
        output = FilterOutput()

        for j, b in enumerate(observations):
            weighted = self._advance_to_observation(ens, b, stride)
            true_state = None if truth is None else truth.states[weighted.step]
            output.record(weighted, true_state)
            logger.debug("Step %d: ESS=%.2f", weighted.step, output.ess[-1])

            if cfg.backward_lag and stride == 1:
                weighted = self._refresh_backward(weighted, observations, j, output)
            ens = _maybe_resample(weighted, cfg, self._streams)

        output.final = ens
        if dump_path is not None:
            output.write_csv(dump_path)
        return output

    # ------------------------------------------------------------------
    # Private
    # ------------------------------------------------------------------
    def _advance_to_observation(self, ens: Ensemble, b: np.ndarray, stride: int) -> Ensemble:
        model, obs, cfg, streams = self._model, self._obs, self._config, self._streams
        if stride == 1:
            return propose_step(ens, b, model, obs, cfg, streams)
        if cfg.proposal != "standard_sir":
            return _propose_gap(ens, b, stride, model, obs, cfg, streams)
        for _ in range(stride - 1):
            ens = _sir_propose(ens, None, model, obs, streams)
        return _sir_propose(ens, b, model, obs, streams)

    def _refresh_backward(
        self, ens: Ensemble, observations: np.ndarray, j: int, output: FilterOutput
    ) -> Ensemble:
        for lag in range(1, self._config.backward_lag + 1):
            if len(ens.history) < lag + 1 or j - lag < 0:
                break
            ens, adjustments = backward_resample(
                ens, self._model, self._obs, observations[j - lag], self._config, self._streams, lag
            )
            output.backward_log_adjustments.append(adjustments)
            output.record_smoothed(ens, lag)
        return ens


# ---------------------------------------------------------------------------
# Private helpers
# ---------------------------------------------------------------------------
def _map_particles(
    fn: Callable[[int], ImplicitSolution], n: int, n_workers: int
) -> list[ImplicitSolution]:
    if n_workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, range(n)))


def _maybe_resample(ens: Ensemble, cfg: FilterConfig, streams: ParticleStreams) -> Ensemble:
    if cfg.resample_every and ens.step % cfg.resample_every == 0:
        return resample(ens, streams.generator(ens.step, STREAM_RESAMPLE))
    return ens


def _closed_form_applies(model: SdeModel, obs: ObservationModel, cfg: FilterConfig) -> bool:
    return (
        obs.is_linear
        and model.additive_noise
        and cfg.proposal in ("implicit_a", "implicit_auto")
        and not cfg.use_random_direction
    )


def _check_collapse(ens: Ensemble) -> None:
    if ens.n_particles > 1:
        top = float(np.max(ens.normalized_weights()))
        if top > WEIGHT_COLLAPSE_LEVEL:
            logger.warning("Weight collapse at step %d: max normalized weight %.12f", ens.step, top)


def _sir_propose(
    ens: Ensemble,
    b_next: np.ndarray | None,
    model: SdeModel,
    obs: ObservationModel,
    streams: ParticleStreams,
) -> Ensemble:
    noise = streams.normals(ens.step + 1, ens.n_particles, ens.dim, STREAM_PROPOSAL)
    positions = euler_step(model, ens.positions, ens.step * model.time_step, noise)
    if b_next is None:
        increments = np.zeros(ens.n_particles)
    else:
        increments = observation_logdensity(obs, positions, b_next)
    weighted = ens.advance(positions, increments).normalized()
    _check_collapse(weighted)
    return weighted


def _linear_gaussian_batch(
    ens: Ensemble,
    b: np.ndarray,
    model: SdeModel,
    obs: ObservationModel,
    xi: np.ndarray,
    cfg: FilterConfig,
) -> tuple[np.ndarray, np.ndarray]:
    t = ens.step * model.time_step
    variance = model.increment_variance(ens.positions[0], t)
    batch = linear_gaussian_proposal(
        model.mean_step(ens.positions, t), variance, obs.linear_matrix(), obs.noise_cov, b, xi
    )
    log_normalizer = 0.5 * float(np.sum(np.log(variance) + LOG_2PI)) + 0.5 * float(
        np.sum(np.log(obs.noise_cov) + LOG_2PI)
    )
    increments = -(batch.phi + log_normalizer) + batch.log_jacobian
    log_jacobian = np.full(xi.shape[0], batch.log_jacobian)
    _dump_solutions(cfg, ens.step + 1, xi, batch.positions, batch.phi, log_jacobian)
    return batch.positions, increments


def _solve_particles(
    ens: Ensemble,
    objectives: list,
    xi: np.ndarray,
    cfg: FilterConfig,
    step: int,
) -> tuple[np.ndarray, np.ndarray]:
    tol = cfg.tolerance if cfg.tolerance is not None else default_tolerance(ens.dim)
    keys = [x.tobytes() for x in ens.positions]
    plans: dict[bytes, UShapedPlan] = {}
    if routes_to_algorithm_b(objectives[0], cfg.proposal, cfg.use_random_direction):
        # particles sharing x_prev share F, its minimum and its substitute
        for key, obj in zip(keys, objectives):
            if key not in plans:
                plans[key] = plan_u_shaped(obj)
        if ens.dim == 1:
            return _solve_scalar_groups(ens, objectives, xi, cfg, step, keys, plans, tol)

    def solve(i: int) -> ImplicitSolution:
        return solve_implicit(
            objectives[i],
            xi[i],
            cfg.proposal,
            tol,
            cfg.max_iter,
            cfg.use_random_direction,
            plans.get(keys[i]),
        )

    solutions = _map_particles(solve, ens.n_particles, cfg.n_workers)
    positions = np.stack([s.position for s in solutions])
    phi = np.array([s.phi for s in solutions])
    log_jacobian = np.array([s.log_jacobian for s in solutions])
    normalizers = np.array([obj.log_normalizer for obj in objectives])
    _dump_solutions(cfg, step, xi, positions, phi, log_jacobian)
    return positions, -(phi + normalizers) + log_jacobian


def _solve_scalar_groups(
    ens: Ensemble,
    objectives: list,
    xi: np.ndarray,
    cfg: FilterConfig,
    step: int,
    keys: list[bytes],
    plans: dict[bytes, UShapedPlan],
    tol: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Algorithm B for 1-D particles, one vectorized solve per distinct x_prev."""
    positions = np.empty_like(xi)
    phi = np.empty(ens.n_particles)
    log_jacobian = np.empty(ens.n_particles)
    for key, plan in plans.items():
        members = np.array([i for i, k in enumerate(keys) if k == key])
        batch = solve_algorithm_b_batch(plan.substitutes[0], xi[members, 0], tol, cfg.max_iter)
        positions[members, 0] = batch.positions
        phi[members] = batch.phi
        log_jacobian[members] = batch.log_jacobian
    normalizers = np.array([obj.log_normalizer for obj in objectives])
    _dump_solutions(cfg, step, xi, positions, phi, log_jacobian)
    return positions, -(phi + normalizers) + log_jacobian


def _propose_gap(
    ens: Ensemble,
    b_next: np.ndarray,
    gap: int,
    model: SdeModel,
    obs: ObservationModel,
    cfg: FilterConfig,
    streams: ParticleStreams,
) -> Ensemble:
    m = ens.dim
    b = np.atleast_1d(np.asarray(b_next, dtype=float))
    step = ens.step + gap
    xi = streams.normals(step, ens.n_particles, gap * m, STREAM_PROPOSAL)
    objectives = [
        build_joint_objective(model, obs, x, b, gap, ens.step * model.time_step)
        for x in ens.positions
    ]
    tol = cfg.tolerance if cfg.tolerance is not None else default_tolerance(gap * m)
    # the stacked objective is coupled across blocks, so only the Gaussian-term solvers apply
    proposal = "implicit_a" if objectives[0].linear else "implicit_auto"

    def solve(i: int) -> ImplicitSolution:
        return solve_implicit(
            objectives[i], xi[i], proposal, tol, cfg.max_iter, cfg.use_random_direction
        )

    solutions = _map_particles(solve, ens.n_particles, cfg.n_workers)
    stacked = np.stack([s.position for s in solutions])
    phi = np.array([s.phi for s in solutions])
    log_jacobian = np.array([s.log_jacobian for s in solutions])
    normalizers = np.array([obj.log_normalizer for obj in objectives])
    _dump_solutions(cfg, step, xi, stacked, phi, log_jacobian)

    intermediate = [stacked[:, j * m : (j + 1) * m] for j in range(gap - 1)]
    increments = -(phi + normalizers) + log_jacobian
    advanced = ens.advance(stacked[:, -m:], increments, n_steps=gap, intermediate=intermediate)
    return advanced.normalized()


def _dump_solutions(
    cfg: FilterConfig,
    step: int,
    xi: np.ndarray,
    positions: np.ndarray,
    phi: np.ndarray,
    log_jacobian: np.ndarray,
) -> None:
    if cfg.debug_dump is None:
        return
    n_ref, n_pos = xi.shape[1], positions.shape[1]
    header = [
        "step",
        "particle",
        *(f"xi_{j}" for j in range(n_ref)),
        *(f"X_{j}" for j in range(n_pos)),
        "phi",
        "J",
    ]
    rows = (
        [step, i, *xi[i], *positions[i], phi[i], float(np.exp(log_jacobian[i]))]
        for i in range(xi.shape[0])
    )
    append_rows(Path(cfg.debug_dump), header, rows)
