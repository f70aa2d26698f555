"""Quadrature posteriors, equal-probability partitions, and Radon-Nikodym histograms."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import logsumexp

from implicitfilter.constants import (
    HISTOGRAM_BINS,
    QUADRATURE_PILOT_HALF_WIDTH,
    QUADRATURE_PILOT_POINTS,
    QUADRATURE_POINTS,
    QUADRATURE_SUPPORT_LEVEL,
    TAIL_DENSITY_LEVEL,
)
from implicitfilter.errors import InvalidInput, TailMass
from implicitfilter.implicit_sampler import SampleObjective, find_minimum

logger = logging.getLogger("implicitfilter")

ScalarObjective = SampleObjective | Callable[[np.ndarray], np.ndarray]
Sampler = Callable[[int], tuple[np.ndarray, np.ndarray | None]]


@dataclass(frozen=True, eq=False)
class QuadraturePosterior:
    """exp(-F) normalized on a uniform grid, with its CDF table."""

    grid: np.ndarray
    log_density: np.ndarray
    cdf_table: np.ndarray

    @property
    def lo(self) -> float:
        return float(self.grid[0])

    @property
    def hi(self) -> float:
        return float(self.grid[-1])

    @property
    def n_points(self) -> int:
        return self.grid.size

    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def mean(self) -> float:
        return float(trapezoid(self.grid * self.density(), self.grid))

    def variance(self) -> float:
        centered = self.grid - self.mean()
        return float(trapezoid(centered**2 * self.density(), self.grid))

    def std(self) -> float:
        return float(np.sqrt(self.variance()))

    def cdf(self, x: np.ndarray | float) -> np.ndarray:
        return np.interp(x, self.grid, self.cdf_table)

    def quantile(self, p: np.ndarray | float) -> np.ndarray:
        """Inverse CDF by interpolation over the strictly increasing part of the table."""
        keep = np.concatenate([[True], np.diff(self.cdf_table) > 0])
        return np.interp(p, self.cdf_table[keep], self.grid[keep])


def _log_target(objective: ScalarObjective, grid: np.ndarray) -> np.ndarray:
    if isinstance(objective, SampleObjective):
        return -np.asarray(objective.eval(grid[:, None]), dtype=float)
    return -np.asarray(objective(grid), dtype=float)


def build_quadrature(
    objective: ScalarObjective,
    lo: float,
    hi: float,
    n_points: int = QUADRATURE_POINTS,
) -> QuadraturePosterior:
    """Normalize exp(-F) on [lo, hi] with the trapezoid rule in log space.

    Raises:
        TailMass: the density at either end exceeds TAIL_DENSITY_LEVEL of its peak.
    """
    if not hi > lo or n_points < 3:
        raise InvalidInput("need hi > lo and at least 3 grid points")
    grid = np.linspace(lo, hi, n_points)
    log_unnorm = _log_target(objective, grid)
    if not np.all(np.isfinite(log_unnorm)):
        raise InvalidInput("F is not finite on the quadrature grid")

    peak = float(np.max(log_unnorm))
    edge = max(log_unnorm[0], log_unnorm[-1]) - peak
    if edge > np.log(TAIL_DENSITY_LEVEL):
        raise TailMass(
            f"density at the grid edge is {np.exp(edge):.3e} of its peak on [{lo:.4g}, {hi:.4g}]"
        )

    # trapezoid weights: dx inside, dx/2 at both ends
    log_weights = np.full(n_points, np.log(grid[1] - grid[0]))
    log_weights[[0, -1]] -= np.log(2.0)
    log_norm = float(logsumexp(log_unnorm + log_weights))
    log_density = log_unnorm - log_norm

    cdf_table = cumulative_trapezoid(np.exp(log_density), grid, initial=0.0)
    cdf_table /= cdf_table[-1]
    return QuadraturePosterior(grid=grid, log_density=log_density, cdf_table=cdf_table)


def auto_quadrature(
    objective: ScalarObjective,
    center: float | None = None,
    n_points: int = QUADRATURE_POINTS,
    support_level: float = QUADRATURE_SUPPORT_LEVEL,
) -> QuadraturePosterior:
    """Quadrature over the support found by a coarse pilot pass.

    The support runs from the first to the last pilot node whose density is
    above ``support_level`` of the peak, padded by one pilot node. Skewed
    posteriors with a heavy prior-side tail (cubic observation, b >= 1.5) need
    this; a fixed number of standard deviations cuts their tail.
    """
    if not 0.0 < support_level < TAIL_DENSITY_LEVEL:
        raise InvalidInput("support_level must lie in (0, TAIL_DENSITY_LEVEL)")
    if center is None:
        center = 0.0
        if isinstance(objective, SampleObjective):
            center = float(find_minimum(objective)[0][0])
    pilot = build_quadrature(
        objective,
        center - QUADRATURE_PILOT_HALF_WIDTH,
        center + QUADRATURE_PILOT_HALF_WIDTH,
        QUADRATURE_PILOT_POINTS,
    )
    relative = pilot.log_density - np.max(pilot.log_density)
    inside = np.flatnonzero(relative > np.log(support_level))
    first = max(int(inside[0]) - 1, 0)
    last = min(int(inside[-1]) + 1, pilot.n_points - 1)
    lo, hi = float(pilot.grid[first]), float(pilot.grid[last])
    logger.debug(
        "Quadrature pilot: mean=%.6f sd=%.6f support=[%.6f, %.6f]",
        pilot.mean(),
        pilot.std(),
        lo,
        hi,
    )
    return build_quadrature(objective, lo, hi, n_points)


def equal_probability_partition(q: QuadraturePosterior, k: int = HISTOGRAM_BINS) -> np.ndarray:
    """Points Y_1 < ... < Y_{K-1} with CDF(Y_j) = j/K."""
    if k < 2:
        raise InvalidInput("the partition needs K >= 2 bins")
    return np.asarray(q.quantile(np.arange(1, k) / k), dtype=float)


# ---------------------------------------------------------------------------
# Radon-Nikodym histograms
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class RnHistogram:
    """Sample mass in the bins (-inf, Y_1], (Y_1, Y_2], ..., (Y_{K-1}, inf)."""

    partition: np.ndarray
    masses: np.ndarray
    n_samples: int

    @property
    def n_bins(self) -> int:
        return self.masses.size

    @property
    def frequencies(self) -> np.ndarray:
        total = float(np.sum(self.masses))
        if total <= 0:
            return np.zeros(self.n_bins)
        return self.masses / total

    def standard_errors(self) -> np.ndarray:
        """Binomial standard errors of the frequencies."""
        f = self.frequencies
        return np.sqrt(f * (1.0 - f) / max(self.n_samples, 1))

    def chi_square(self) -> float:
        """Pearson statistic against the flat histogram 1/K."""
        expected = 1.0 / self.n_bins
        return float(self.n_samples * np.sum((self.frequencies - expected) ** 2) / expected)

    def merge(self, other: RnHistogram) -> RnHistogram:
        if not np.array_equal(self.partition, other.partition):
            raise InvalidInput("cannot merge histograms over different partitions")
        return RnHistogram(
            partition=self.partition,
            masses=self.masses + other.masses,
            n_samples=self.n_samples + other.n_samples,
        )


def histogram_from_samples(
    positions: np.ndarray,
    partition: np.ndarray,
    weights: np.ndarray | None = None,
) -> RnHistogram:
    positions = np.asarray(positions, dtype=float).ravel()
    bins = np.searchsorted(partition, positions, side="left")
    masses = np.bincount(bins, weights=weights, minlength=partition.size + 1).astype(float)
    return RnHistogram(partition=np.asarray(partition), masses=masses, n_samples=positions.size)


def rn_histogram(
    sampler: Sampler,
    q: QuadraturePosterior,
    k: int = HISTOGRAM_BINS,
    n_samples: int = 10_000,
) -> RnHistogram:
    """Bin ``n_samples`` draws of ``sampler`` into the K posterior equal-probability bins.

    ``sampler(L)`` returns (positions, weights); ``weights=None`` bins the
    positions unweighted.
    """
    positions, weights = sampler(n_samples)
    return histogram_from_samples(positions, equal_probability_partition(q, k), weights)


def histogram_table(standard: RnHistogram, implicit: RnHistogram) -> list[list[object]]:
    """Rows (k, Y_k, freq_standard, freq_implicit, se_standard, se_implicit); Y_K is inf."""
    if not np.array_equal(standard.partition, implicit.partition):
        raise InvalidInput("histograms use different partitions")
    edges = [*standard.partition, float("inf")]
    rows = []
    for j in range(standard.n_bins):
        rows.append(
            [
                j + 1,
                float(edges[j]),
                float(standard.frequencies[j]),
                float(implicit.frequencies[j]),
                float(standard.standard_errors()[j]),
                float(implicit.standard_errors()[j]),
            ]
        )
    return rows


def weighted_ks_distance(
    positions: np.ndarray, weights: np.ndarray | None, q: QuadraturePosterior
) -> float:
    """Kolmogorov-Smirnov distance between the weighted empirical CDF and ``q``."""
    positions = np.asarray(positions, dtype=float).ravel()
    order = np.argsort(positions)
    x = positions[order]
    w = np.ones(x.size) if weights is None else np.asarray(weights, dtype=float).ravel()[order]
    after = np.cumsum(w) / np.sum(w)
    before = np.concatenate([[0.0], after[:-1]])
    target = q.cdf(x)
    return float(max(np.max(after - target), np.max(target - before)))


# ---------------------------------------------------------------------------
# Kalman reference
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class KalmanEstimate:
    mean: float
    variance: float
    innovation_variance: float


def kalman_step(
    mean: float,
    variance: float,
    b: float,
    process_variance: float,
    obs_variance: float,
    transition: float = 1.0,
    obs_gain: float = 1.0,
    offset: float = 0.0,
) -> KalmanEstimate:
    """Scalar predict-update for x' = a x + c + noise, b = h x' + noise."""
    prior_mean = transition * mean + offset
    prior_var = transition**2 * variance + process_variance
    innovation_var = obs_gain**2 * prior_var + obs_variance
    gain = prior_var * obs_gain / innovation_var
    return KalmanEstimate(
        mean=prior_mean + gain * (b - obs_gain * prior_mean),
        variance=(1.0 - gain * obs_gain) * prior_var,
        innovation_variance=innovation_var,
    )
