"""Computations behind the experiment tables and figure data."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

import numpy as np

from implicitfilter.config import FilterConfig, ModelConfig, RmConfig
from implicitfilter.constants import (
    DOUBLE_WELL_OBS_NOISE,
    DOUBLE_WELL_SIGMA,
    DOUBLE_WELL_STEPS,
    DOUBLE_WELL_TIME_STEP,
    FIGURE3_B,
    HISTOGRAM_BINS,
    HISTOGRAM_SAMPLES,
    RM_INITIAL_RATIO,
    RM_ITERATIONS,
    RM_PARTICLES,
    RM_SIGMA_STAR,
    RM_STEPS,
    STATIC_OBS_NOISE,
    STATIC_SIGMA,
    STREAM_BASELINE,
    STREAM_DATA,
    STREAM_PROPOSAL,
    TABLE1_PARTICLES,
    TABLE1_REPEATS,
    TABLE2_B,
    TABLE3_B_VALUES,
    TABLE3_PARTICLES,
    TABLE3_REPEATS,
    TABLE4_B,
    TABLE5_B_VALUES,
    TABLE5_PARTICLES,
    TABLE5_REPEATS,
)
from implicitfilter.errors import ConfigError
from implicitfilter.filter_engine import Ensemble, FilterEngine, propose_step, standard_sir_step
from implicitfilter.implicit_sampler import (
    build_u_substitute,
    plan_u_shaped,
    solve_algorithm_b_batch,
    static_objective,
)
from implicitfilter.oracle_diagnostics import (
    auto_quadrature,
    equal_probability_partition,
    histogram_from_samples,
    histogram_table,
)
from implicitfilter.param_ident import (
    identification_model,
    identification_observation,
    identify,
    replicated_identify,
    segmented_identify,
    synthetic_record,
)
from implicitfilter.sde_model import (
    ObservationModel,
    SdeModel,
    build_model,
    build_observation,
    cubic_observation,
    double_well_potential,
    generate_synthetic,
    linear_observation,
    static_model,
)
from implicitfilter.utils.csv_io import write_csv
from implicitfilter.utils.rng import ParticleStreams, replicate_seed

logger = logging.getLogger("implicitfilter")

T = TypeVar("T")


@dataclass
class Table:
    """One CSV artifact: ``<name>.csv`` with a header row."""

    name: str
    header: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        return write_csv(out_dir / f"{self.name}.csv", self.header, self.rows)


def _map_repeats(fn: Callable[[int], T], n: int, n_workers: int) -> list[T]:
    """``[fn(0), ..., fn(n - 1)]``, in order, over a thread pool when ``n_workers > 1``."""
    if n_workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, range(n)))


def _require_repeats(repeats: int) -> None:
    if repeats < 2:
        raise ConfigError("repeats must be >= 2 to estimate a variance")


def _standard_error(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1) / np.sqrt(values.size))


# ---------------------------------------------------------------------------
# Double-well reconstruction
# ---------------------------------------------------------------------------
def double_well_problem(
    sigma: float = DOUBLE_WELL_SIGMA,
    s: float = DOUBLE_WELL_OBS_NOISE,
    delta: float = DOUBLE_WELL_TIME_STEP,
) -> tuple[SdeModel, ObservationModel]:
    cfg = ModelConfig(drift="double_well", sigma=sigma, time_step=delta, obs_noise=s)
    return build_model(cfg), build_observation(cfg)


def table1(
    seed: int = 0,
    particles: int | Sequence[int] | None = None,
    repeats: int = TABLE1_REPEATS,
    sigma: float = DOUBLE_WELL_SIGMA,
    s: float = DOUBLE_WELL_OBS_NOISE,
    delta: float = DOUBLE_WELL_TIME_STEP,
    n_steps: int = DOUBLE_WELL_STEPS,
    n_workers: int = 1,
) -> list[Table]:
    """Discrepancy at the final step between the reconstruction and the data.

    Each repeat generates one path from x = 0 and filters it with every M in
    100, 50, 20, 10, 5 and 1, plus any extra sizes in ``particles``, resampling
    after every step. Rows run from the largest M down.
    """
    _require_repeats(repeats)
    extra = [] if particles is None else np.atleast_1d(particles).tolist()
    if any(m < 1 for m in extra):
        raise ConfigError(f"particle counts must be >= 1, got {extra}")
    counts = tuple(sorted({*TABLE1_PARTICLES, *extra}, reverse=True))
    model, obs = double_well_problem(sigma, s, delta)
    x0 = np.zeros(1)

    def run_repeat(r: int) -> np.ndarray:
        rep_seed = replicate_seed(seed, r)
        truth, observations = generate_synthetic(
            model, obs, x0, n_steps, replicate_seed(rep_seed, STREAM_DATA)
        )
        deltas = np.empty((len(counts), 2))
        for j, m in enumerate(counts):
            cfg = FilterConfig(n_particles=m, proposal="implicit_auto", seed=rep_seed)
            estimate = FilterEngine(model, obs, cfg).run(x0, observations).estimates[-1, 0]
            deltas[j] = (estimate - observations[-1, 0], estimate - truth.states[-1, 0])
        return deltas

    logger.info("Table 1: %d repeats for M in %s", repeats, list(counts))
    deltas = np.stack(_map_repeats(run_repeat, repeats, n_workers))
    rows = []
    for j, m in enumerate(counts):
        observed, truth_delta = deltas[:, j, 0], deltas[:, j, 1]
        var = float(np.var(observed, ddof=1))
        rows.append(
            [
                m,
                float(np.mean(observed)),
                var,
                _standard_error(observed),
                var * float(np.sqrt(2.0 / (repeats - 1))),
                float(np.mean(truth_delta)),
                float(np.var(truth_delta, ddof=1)),
            ]
        )
    header = [
        "M",
        "mean_delta",
        "var_delta",
        "se_mean",
        "se_var",
        "mean_delta_truth",
        "var_delta_truth",
    ]
    return [Table("table1", header, rows)]


# ---------------------------------------------------------------------------
# Static problems
# ---------------------------------------------------------------------------
def _histogram(
    observation: str,
    name: str,
    b: float,
    sigma: float,
    s: float,
    samples: int,
    bins: int,
    seed: int,
) -> list[Table]:
    """Prior samples against unweighted implicit samples in the posterior's equal-mass bins."""
    obj = static_objective(observation, b, sigma, s)
    partition = equal_probability_partition(auto_quadrature(obj), bins)
    streams = ParticleStreams(seed)

    prior = np.sqrt(sigma) * streams.normals(0, samples, 1, STREAM_DATA)[:, 0]
    xi = streams.normals(0, samples, 1, STREAM_PROPOSAL)[:, 0]
    implicit = solve_algorithm_b_batch(plan_u_shaped(obj).substitutes[0], xi)

    standard_hist = histogram_from_samples(prior, partition)
    implicit_hist = histogram_from_samples(implicit.positions, partition)
    logger.info(
        "%s: chi-square standard=%.1f implicit=%.1f",
        name,
        standard_hist.chi_square(),
        implicit_hist.chi_square(),
    )
    header = ["k", "Y_k", "standard", "implicit", "se_standard", "se_implicit"]
    return [Table(name, header, histogram_table(standard_hist, implicit_hist))]


def table2(
    seed: int = 0,
    b: float = TABLE2_B,
    sigma: float = STATIC_SIGMA,
    s: float = STATIC_OBS_NOISE,
    samples: int = HISTOGRAM_SAMPLES,
    bins: int = HISTOGRAM_BINS,
    n_workers: int = 1,
) -> list[Table]:
    """Histogram for h(x) = x."""
    return _histogram("linear", "table2", b, sigma, s, samples, bins, seed)


def table4(
    seed: int = 0,
    b: float = TABLE4_B,
    sigma: float = STATIC_SIGMA,
    s: float = STATIC_OBS_NOISE,
    samples: int = HISTOGRAM_SAMPLES,
    bins: int = HISTOGRAM_BINS,
    n_workers: int = 1,
) -> list[Table]:
    """Histogram for h(x) = x^3, sampled through the U-shaped substitute."""
    return _histogram("cubic", "table4", b, sigma, s, samples, bins, seed)


def _static_means(
    observation: str,
    name: str,
    b_values: Sequence[float],
    sigma: float,
    s: float,
    particles: int,
    repeats: int,
    seed: int,
    proposal: str,
    n_workers: int,
) -> list[Table]:
    """Weighted one-step means of the standard and implicit filters, averaged over repeats."""
    _require_repeats(repeats)
    model = static_model(sigma)
    factory = linear_observation if observation == "linear" else cubic_observation
    obs = factory(1, 1, s)
    start = Ensemble.initial(np.zeros(1), particles)

    rows = []
    for b in b_values:
        if observation == "linear":
            exact = b * sigma / (sigma + s)
        else:
            exact = auto_quadrature(static_objective(observation, b, sigma, s)).mean()
        b_obs = np.array([b])

        def run_repeat(r: int, b_obs: np.ndarray = b_obs) -> tuple[float, float]:
            rep_seed = replicate_seed(seed, r)
            cfg = FilterConfig(
                n_particles=particles, proposal=proposal, resample_every=0, seed=rep_seed
            )
            implicit = propose_step(
                start, b_obs, model, obs, cfg, ParticleStreams(rep_seed)
            ).mean()[0]
            # baseline normals are independent of the implicit column
            baseline = ParticleStreams(replicate_seed(rep_seed, STREAM_BASELINE))
            standard = standard_sir_step(start, b_obs, model, obs, baseline).mean()[0]
            return float(standard), float(implicit)

        estimates = np.array(_map_repeats(run_repeat, repeats, n_workers))
        standard, implicit = estimates[:, 0], estimates[:, 1]
        rows.append(
            [
                b,
                float(exact),
                float(np.mean(standard)),
                float(np.mean(implicit)),
                _standard_error(standard),
                _standard_error(implicit),
            ]
        )
        logger.debug("%s b=%.2f: exact=%.4f implicit=%.4f", name, b, exact, rows[-1][3])
    header = ["b", "exact", "standard", "implicit", "se_standard", "se_implicit"]
    return [Table(name, header, rows)]


def table3(
    seed: int = 0,
    particles: int = TABLE3_PARTICLES,
    repeats: int = TABLE3_REPEATS,
    sigma: float = STATIC_SIGMA,
    s: float = STATIC_OBS_NOISE,
    n_workers: int = 1,
) -> list[Table]:
    """Posterior means for h(x) = x; the exact column is b sigma / (sigma + s)."""
    return _static_means(
        "linear",
        "table3",
        TABLE3_B_VALUES,
        sigma,
        s,
        particles,
        repeats,
        seed,
        "implicit_auto",
        n_workers,
    )


def table5(
    seed: int = 0,
    particles: int = TABLE5_PARTICLES,
    repeats: int = TABLE5_REPEATS,
    sigma: float = STATIC_SIGMA,
    s: float = STATIC_OBS_NOISE,
    n_workers: int = 1,
) -> list[Table]:
    """Posterior means for h(x) = x^3; the exact column comes from quadrature."""
    return _static_means(
        "cubic",
        "table5",
        TABLE5_B_VALUES,
        sigma,
        s,
        particles,
        repeats,
        seed,
        "implicit_b",
        n_workers,
    )


# ---------------------------------------------------------------------------
# Parameter identification
# ---------------------------------------------------------------------------
def table6(
    seed: int = 0,
    sigma_star: float = RM_SIGMA_STAR,
    initial_ratio: float = RM_INITIAL_RATIO,
    particles: int = RM_PARTICLES,
    n_steps: int = RM_STEPS,
    segment_length: int = 0,
    iterations: int = RM_ITERATIONS,
    repeats: int = 1,
    update: str = "additive",
    n_workers: int = 1,
) -> list[Table]:
    """Robbins-Monro trace from sigma_1 = initial_ratio * sigma*.

    With ``repeats > 1`` a second table lists the final estimate of each
    independent trial.
    """
    cfg = RmConfig(
        sigma_init=initial_ratio * sigma_star,
        n_particles=particles,
        n_steps=n_steps,
        segment_length=segment_length,
        max_iterations=iterations,
        seed=seed,
        update=update,
    )
    obs = identification_observation()
    observations = synthetic_record(sigma_star, n_steps, replicate_seed(seed, STREAM_DATA), obs)
    run = segmented_identify if segment_length else identify
    trace = run(identification_model, obs, observations, np.zeros(1), cfg, sigma_star, n_workers)
    tables = [Table("table6", trace.header(), trace.rows())]

    if repeats > 1:
        traces = replicated_identify(cfg, sigma_star, repeats, n_workers)
        rows = [
            [i, t.final / sigma_star, t.n_iterations, t.converged] for i, t in enumerate(traces)
        ]
        header = ["trial", "final_sigma_over_sigma_star", "iterations", "converged"]
        tables.append(Table("table6_trials", header, rows))
    return tables


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------
def potential_grid(lo: float = -1.5, hi: float = 1.5, n_points: int = 301) -> Table:
    x = np.linspace(lo, hi, n_points)
    rows = [[float(a), float(v)] for a, v in zip(x, double_well_potential(x))]
    return Table("figure1_potential", ["x", "V"], rows)


def reconstruction_run(
    seed: int = 0,
    particles: int = 50,
    sigma: float = DOUBLE_WELL_SIGMA,
    s: float = DOUBLE_WELL_OBS_NOISE,
    delta: float = DOUBLE_WELL_TIME_STEP,
    n_steps: int = DOUBLE_WELL_STEPS,
) -> Table:
    """One seeded double-well path, its observations and the filter's reconstruction."""
    model, obs = double_well_problem(sigma, s, delta)
    x0 = np.zeros(1)
    truth, observations = generate_synthetic(
        model, obs, x0, n_steps, replicate_seed(seed, STREAM_DATA)
    )
    cfg = FilterConfig(n_particles=particles, proposal="implicit_auto", seed=seed)
    output = FilterEngine(model, obs, cfg).run(x0, observations, truth)
    rows = [[0.0, float(truth.states[0, 0]), float(x0[0]), None]]
    for j, step in enumerate(output.steps):
        rows.append(
            [
                float(truth.times[step]),
                float(truth.states[step, 0]),
                float(output.means[j][0]),
                float(observations[j, 0]),
            ]
        )
    return Table("figure2_reconstruction", ["t", "truth", "estimate", "observation"], rows)


def substitute_grid(
    b: float = FIGURE3_B,
    sigma: float = STATIC_SIGMA,
    s: float = STATIC_OBS_NOISE,
    lo: float = -1.5,
    hi: float = 2.0,
    n_points: int = 701,
) -> Table:
    """F and its U-shaped substitute F0 for h(x) = x^3."""
    obj = static_objective("cubic", b, sigma, s)
    substitute = build_u_substitute(obj)
    x = np.linspace(lo, hi, n_points)
    f = obj.eval(x[:, None])
    f0 = substitute.f0_eval(x)
    rows = [[float(a), float(u), float(v)] for a, u, v in zip(x, f, f0)]
    return Table("figure3_substitute", ["x", "F", "F0"], rows)


def figure_data(
    seed: int = 0,
    particles: int = 50,
    b: float = FIGURE3_B,
    sigma: float = DOUBLE_WELL_SIGMA,
    s: float = DOUBLE_WELL_OBS_NOISE,
    delta: float = DOUBLE_WELL_TIME_STEP,
    n_workers: int = 1,
) -> list[Table]:
    """Potential grid, one seeded reconstruction, and the F / F0 grid."""
    return [
        potential_grid(),
        reconstruction_run(seed, particles, sigma, s, delta),
        substitute_grid(b),
    ]


EXPERIMENTS: dict[str, Callable[..., list[Table]]] = {
    "table1": table1,
    "table2": table2,
    "table3": table3,
    "table4": table4,
    "table5": table5,
    "table6": table6,
    "figure_data": figure_data,
}
