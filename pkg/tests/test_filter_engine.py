"""Tests for ensembles, single filter steps, and the filter engine."""

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.special import logsumexp

from implicitfilter.config import FilterConfig, ModelConfig
from implicitfilter.errors import DimensionMismatch
from implicitfilter.filter_engine import (
    Ensemble,
    FilterEngine,
    backward_resample,
    filter_step,
    propose_step,
    resample,
    sparse_gap_step,
    standard_sir_step,
)
from implicitfilter.implicit_sampler import static_objective
from implicitfilter.oracle_diagnostics import auto_quadrature, kalman_step, weighted_ks_distance
from implicitfilter.sde_model import (
    build_model,
    build_observation,
    cubic_observation,
    generate_synthetic,
    linear_observation,
    observation_logdensity,
    static_model,
)
from implicitfilter.utils.rng import ParticleStreams


@pytest.fixture
def walk_record(random_walk) -> tuple:
    model, obs = random_walk
    path, observations = generate_synthetic(model, obs, np.zeros(1), 20, rng_seed=5)
    return path, observations


class TestEnsemble:
    def test_initial_point_mass(self):
        ens = Ensemble.initial(np.array([0.3]), 8)
        assert ens.positions.shape == (8, 1)
        assert np.allclose(ens.mean(), 0.3)
        assert np.allclose(ens.variance(), 0.0)
        assert ens.ess() == pytest.approx(8.0)
        assert ens.entropy() == pytest.approx(np.log(8.0))

    def test_weight_shape_checked(self):
        with pytest.raises(DimensionMismatch):
            Ensemble(positions=np.zeros((3, 1)), log_weights=np.zeros(2))

    def test_weighted_statistics(self):
        ens = Ensemble(
            positions=np.array([[0.0], [1.0]]), log_weights=np.log(np.array([0.25, 0.75]))
        )
        assert ens.mean()[0] == pytest.approx(0.75)
        assert ens.variance()[0] == pytest.approx(0.1875)
        assert ens.ess() == pytest.approx(1.0 / (0.0625 + 0.5625))

    def test_normalized_keeps_the_distribution(self):
        ens = Ensemble(positions=np.arange(3.0)[:, None], log_weights=np.array([5.0, 6.0, 7.0]))
        normalized = ens.normalized()
        assert logsumexp(normalized.log_weights) == pytest.approx(0.0)
        assert np.allclose(normalized.normalized_weights(), ens.normalized_weights())

    def test_history_depth_is_bounded(self):
        ens = Ensemble.initial(np.zeros(1), 4, history_depth=2)
        for k in range(1, 4):
            ens = ens.advance(np.full((4, 1), float(k)), np.zeros(4))
        assert len(ens.history) == 2
        assert np.allclose(ens.history[0], 1.0)
        assert np.allclose(ens.history[1], 2.0)
        assert ens.step == 3


class TestResample:
    def test_all_offspring_from_the_only_weighted_particle(self, rng):
        ens = Ensemble(
            positions=np.arange(3.0)[:, None], log_weights=np.array([-np.inf, -np.inf, 0.0])
        )
        out = resample(ens, rng)
        assert np.allclose(out.positions, 2.0)
        assert np.allclose(out.normalized_weights(), 1.0 / 3.0)

    def test_offspring_frequencies_follow_the_weights(self, rng):
        n = 30_000
        labels = np.arange(n) % 3
        weights = np.array([0.1, 0.2, 0.7])[labels]
        ens = Ensemble(positions=labels[:, None].astype(float), log_weights=np.log(weights))
        out = resample(ens, rng)
        counts = np.bincount(out.positions[:, 0].astype(int), minlength=3) / n
        assert np.allclose(counts, [0.1, 0.2, 0.7], atol=0.01)

    def test_history_follows_the_lineage(self, rng):
        ens = Ensemble.initial(np.zeros(1), 3, history_depth=1)
        ens = ens.advance(np.arange(3.0)[:, None], np.log(np.array([1e-300, 1e-300, 1.0])))
        out = resample(ens, rng)
        assert np.allclose(out.positions, 2.0)
        assert np.allclose(out.history[0], 0.0)

    def test_preserves_the_weighted_mean(self, rng):
        n = 20_000
        positions = rng.normal(size=(n, 1))
        ens = Ensemble(positions=positions, log_weights=positions[:, 0])
        out = resample(ens, rng)
        se = np.sqrt(ens.variance()[0] / n)
        assert abs(out.mean()[0] - ens.mean()[0]) < 4.0 * se


class TestProposeStep:
    def test_shared_start_gives_equal_weights(self, random_walk, streams):
        model, obs = random_walk
        cfg = FilterConfig(n_particles=16, proposal="implicit_a")
        start = Ensemble.initial(np.zeros(1), 16)
        ens = propose_step(start, np.array([0.4]), model, obs, cfg, streams)
        assert ens.ess() == pytest.approx(16.0)
        assert ens.step == 1

    def test_closed_form_matches_algorithm_b(self, random_walk, streams):
        model, obs = random_walk
        start = Ensemble.initial(np.zeros(1), 10)
        b = np.array([-0.2])
        closed = propose_step(start, b, model, obs, FilterConfig(10, "implicit_a"), streams)
        branch = propose_step(start, b, model, obs, FilterConfig(10, "implicit_b"), streams)
        assert np.allclose(closed.positions, branch.positions, atol=1e-7)
        assert np.allclose(closed.log_weights, branch.log_weights, atol=1e-5)

    def test_posterior_location(self, random_walk, streams):
        # prior N(0, 0.01), b = 0.5, s = 0.04: posterior mean 0.1, variance 0.008
        model, obs = random_walk
        cfg = FilterConfig(n_particles=4000, proposal="implicit_a")
        start = Ensemble.initial(np.zeros(1), 4000)
        ens = propose_step(start, np.array([0.5]), model, obs, cfg, streams)
        assert ens.mean()[0] == pytest.approx(0.1, abs=0.01)
        assert ens.variance()[0] == pytest.approx(0.008, rel=0.1)

    def test_step_without_data(self, random_walk, streams):
        model, obs = random_walk
        ens = propose_step(
            Ensemble.initial(np.zeros(1), 8), None, model, obs, FilterConfig(8), streams
        )
        assert ens.ess() == pytest.approx(8.0)

    def test_filter_step_resamples(self, random_walk, streams):
        model, obs = random_walk
        start = Ensemble(
            positions=np.linspace(-1.0, 1.0, 12)[:, None], log_weights=np.zeros(12)
        )
        ens = filter_step(start, np.array([0.9]), model, obs, FilterConfig(12), streams)
        assert np.allclose(ens.normalized_weights(), 1.0 / 12)


class TestStandardSir:
    def test_propagates_with_the_dynamics(self, random_walk, streams):
        model, obs = random_walk
        b = np.array([0.05])
        ens = standard_sir_step(Ensemble.initial(np.zeros(1), 6), b, model, obs, streams)
        expected = 0.1 * streams.normals(1, 6, 1)
        assert np.allclose(ens.positions, expected)
        likelihood = observation_logdensity(obs, expected, b)
        assert np.allclose(ens.log_weights, likelihood - logsumexp(likelihood))

    def test_collapse_is_logged(self, random_walk, streams, caplog):
        model, _ = random_walk
        sharp = linear_observation(1, 1, 1e-8)
        start = Ensemble.initial(np.zeros(1), 20)
        with caplog.at_level(logging.WARNING, logger="implicitfilter"):
            standard_sir_step(start, np.array([0.5]), model, sharp, streams)
        assert "Weight collapse" in caplog.text

    def test_resamples_when_configured(self, random_walk, streams):
        model, obs = random_walk
        cfg = FilterConfig(n_particles=6, proposal="standard_sir")
        start = Ensemble.initial(np.zeros(1), 6)
        ens = standard_sir_step(start, np.array([0.3]), model, obs, streams, cfg)
        assert np.allclose(ens.normalized_weights(), 1.0 / 6)


class TestBackwardResample:
    def _two_steps(self, model, obs, streams, b):
        cfg = FilterConfig(n_particles=8, proposal="implicit_a", resample_every=0)
        ens = Ensemble.initial(np.zeros(1), 8, history_depth=2)
        for value in b:
            ens = propose_step(ens, np.array([value]), model, obs, cfg, streams)
        return ens, cfg

    def test_weights_are_unchanged(self, random_walk, streams):
        model, obs = random_walk
        ens, cfg = self._two_steps(model, obs, streams, [0.1, 0.2])
        refreshed, adjustments = backward_resample(ens, model, obs, np.array([0.1]), cfg, streams)
        assert np.array_equal(refreshed.log_weights, ens.log_weights)
        assert np.array_equal(refreshed.positions, ens.positions)
        assert adjustments.shape == (8,)
        assert not np.allclose(refreshed.history[-1], ens.history[-1])
        assert np.array_equal(refreshed.history[0], ens.history[0])

    def test_needs_enough_history(self, random_walk, streams):
        model, obs = random_walk
        cfg = FilterConfig(n_particles=4)
        start = Ensemble.initial(np.zeros(1), 4, history_depth=2)
        ens = propose_step(start, np.array([0.1]), model, obs, cfg, streams)
        with pytest.raises(ValueError):
            backward_resample(ens, model, obs, np.array([0.1]), cfg, streams, lag=2)

    def test_engine_records_adjustments(self, random_walk, walk_record):
        model, obs = random_walk
        _, observations = walk_record
        cfg = FilterConfig(n_particles=10, proposal="implicit_a", backward_lag=1, seed=2)
        out = FilterEngine(model, obs, cfg).run(np.zeros(1), observations)
        assert len(out.backward_log_adjustments) == len(observations) - 1

    def test_refresh_draws_from_the_conditional(self, random_walk, streams):
        # neighbours 0 and 0.2, b = 0.3: the middle state is N(0.1, 0.005) updated by b
        model, obs = random_walk
        n = 4000
        cfg = FilterConfig(n_particles=n, proposal="implicit_a", resample_every=0)
        zeros = np.zeros((n, 1))
        ens = Ensemble(
            positions=np.full((n, 1), 0.2),
            log_weights=np.zeros(n),
            step=2,
            history=(zeros, zeros),
            history_depth=2,
        )
        refreshed, adjustments = backward_resample(ens, model, obs, np.array([0.3]), cfg, streams)
        exact = kalman_step(0.1, 0.005, 0.3, 0.0, 0.04)
        middle = refreshed.history[-1][:, 0]
        assert np.mean(middle) == pytest.approx(exact.mean, abs=0.005)
        assert np.var(middle) == pytest.approx(exact.variance, rel=0.1)
        assert np.ptp(adjustments) < 1e-9

    def test_smoothed_means_follow_the_kalman_smoother(self, random_walk, walk_record):
        model, obs = random_walk
        _, observations = walk_record
        cfg = FilterConfig(n_particles=5000, proposal="implicit_a", backward_lag=1, seed=11)
        out = FilterEngine(model, obs, cfg).run(np.zeros(1), observations)
        means, variances = [], []
        mean, variance = 0.0, 0.0
        for b in observations[:, 0]:
            est = kalman_step(mean, variance, b, 0.01, 0.04)
            mean, variance = est.mean, est.variance
            means.append(mean)
            variances.append(variance)
        smoothed = out.smoothed_estimates[:, 0]
        assert np.isnan(smoothed[-1])
        for k in range(len(means) - 1):
            gain = variances[k] / (variances[k] + 0.01)
            expected = means[k] + gain * (means[k + 1] - means[k])
            assert smoothed[k] == pytest.approx(expected, abs=0.015)

    def test_smoothed_column_in_the_dump(self, random_walk, walk_record, tmp_dir, read_rows):
        model, obs = random_walk
        _, observations = walk_record
        cfg = FilterConfig(n_particles=10, proposal="implicit_a", backward_lag=1, seed=2)
        target = tmp_dir / "run.csv"
        FilterEngine(model, obs, cfg).run(np.zeros(1), observations[:4], dump_path=target)
        rows = read_rows(target)
        assert [row["smoothed_x"] == "" for row in rows] == [False, False, False, True]


class TestSparseGap:
    def test_gap_step_lands_on_the_observation(self, random_walk, streams):
        model, obs = random_walk
        cfg = FilterConfig(n_particles=8, proposal="implicit_a", resample_every=0)
        ens = Ensemble.initial(np.zeros(1), 8, history_depth=3)
        out = sparse_gap_step(ens, np.array([0.3]), 3, model, obs, cfg, streams)
        assert out.step == 3
        assert out.positions.shape == (8, 1)
        assert len(out.history) == 3

    def test_gap_one_is_a_filter_step(self, random_walk, streams):
        model, obs = random_walk
        cfg = FilterConfig(n_particles=8, proposal="implicit_a")
        ens = Ensemble.initial(np.zeros(1), 8)
        a = sparse_gap_step(ens, np.array([0.3]), 1, model, obs, cfg, streams)
        b = filter_step(ens, np.array([0.3]), model, obs, cfg, streams)
        assert np.array_equal(a.positions, b.positions)

    def test_gap_matches_the_kalman_posterior(self, random_walk, streams):
        # three walk steps from 0 observed once: x_3 ~ N(0, 0.03) updated by b = 0.3
        model, obs = random_walk
        n = 4000
        cfg = FilterConfig(n_particles=n, proposal="implicit_a", resample_every=0)
        ens = Ensemble.initial(np.zeros(1), n, history_depth=3)
        out = sparse_gap_step(ens, np.array([0.3]), 3, model, obs, cfg, streams)
        exact = kalman_step(0.0, 0.02, 0.3, 0.01, 0.04)
        assert out.mean()[0] == pytest.approx(exact.mean, abs=0.008)
        assert out.variance()[0] == pytest.approx(exact.variance, rel=0.1)
        first = out.normalized_weights() @ out.history[1][:, 0]
        assert first == pytest.approx(0.01 * 0.3 / 0.07, abs=0.006)

    def test_gap_must_be_positive(self, random_walk, streams):
        model, obs = random_walk
        start = Ensemble.initial(np.zeros(1), 2)
        with pytest.raises(ValueError):
            sparse_gap_step(start, np.zeros(1), 0, model, obs, FilterConfig(2), streams)

    def test_engine_with_observation_stride(self):
        cfg = ModelConfig(drift="zero", sigma=1.0, obs_noise=0.04, obs_stride=3)
        model, obs = build_model(cfg), build_observation(cfg)
        path, observations = generate_synthetic(model, obs, np.zeros(1), 12, rng_seed=8)
        out = FilterEngine(model, obs, FilterConfig(10, "implicit_a", seed=1)).run(
            np.zeros(1), observations, truth=path
        )
        assert out.steps == [3, 6, 9, 12]
        assert out.truth[-1][0] == path.states[12, 0]


class TestFilterEngine:
    def test_output_shapes(self, double_well, filter_config):
        model, obs = double_well
        path, observations = generate_synthetic(model, obs, np.zeros(1), 15, rng_seed=3)
        out = FilterEngine(model, obs, filter_config).run(np.zeros(1), observations, truth=path)
        assert out.estimates.shape == (15, 1)
        assert out.steps == list(range(1, 16))
        assert all(1.0 <= e <= filter_config.n_particles + 1e-9 for e in out.ess)
        assert out.final.step == 15

    def test_dump_csv(self, double_well, filter_config, tmp_dir: Path, read_rows):
        model, obs = double_well
        path, observations = generate_synthetic(model, obs, np.zeros(1), 5, rng_seed=3)
        target = tmp_dir / "run.csv"
        FilterEngine(model, obs, filter_config).run(
            np.zeros(1), observations, truth=path, dump_path=target
        )
        rows = read_rows(target)
        assert len(rows) == 5
        assert set(rows[0]) == {"step", "truth_x", "estimate_x", "variance_x", "ess", "entropy"}

    def test_solution_dump(self, random_walk, walk_record, tmp_dir: Path, read_rows):
        model, obs = random_walk
        _, observations = walk_record
        target = tmp_dir / "solutions.csv"
        cfg = FilterConfig(4, "implicit_a", debug_dump=str(target))
        FilterEngine(model, obs, cfg).run(np.zeros(1), observations[:3])
        rows = read_rows(target)
        assert len(rows) == 12
        assert {"xi_0", "X_0", "phi", "J"} <= set(rows[0])

    def test_same_seed_same_output(self, double_well, filter_config):
        model, obs = double_well
        _, observations = generate_synthetic(model, obs, np.zeros(1), 10, rng_seed=3)
        a = FilterEngine(model, obs, filter_config).run(np.zeros(1), observations)
        b = FilterEngine(model, obs, filter_config).run(np.zeros(1), observations)
        assert np.array_equal(a.estimates, b.estimates)

    def test_worker_count_does_not_change_results(self):
        cfg = ModelConfig(observation="cubic")
        model, obs = build_model(cfg), build_observation(cfg)
        _, observations = generate_synthetic(model, obs, np.zeros(1), 4, rng_seed=6)
        serial = FilterConfig(n_particles=8, proposal="implicit_auto", seed=4)
        threaded = replace(serial, n_workers=3)
        a = FilterEngine(model, obs, serial).run(np.zeros(1), observations)
        b = FilterEngine(model, obs, threaded).run(np.zeros(1), observations)
        assert np.array_equal(a.estimates, b.estimates)

    def test_run_from_continues_the_streams(self, random_walk, walk_record):
        model, obs = random_walk
        _, observations = walk_record
        engine = FilterEngine(model, obs, FilterConfig(12, "implicit_a", seed=9))
        full = engine.run(np.zeros(1), observations)
        head = engine.run(np.zeros(1), observations[:8])
        tail = engine.run_from(head.final, observations[8:])
        assert np.array_equal(tail.estimates, full.estimates[8:])
        assert tail.steps == full.steps[8:]

    def test_dimension_mismatch(self, random_walk):
        model, _ = random_walk
        with pytest.raises(DimensionMismatch):
            FilterEngine(model, linear_observation(2, 1, 0.1), FilterConfig())

    def test_tracks_the_kalman_filter(self, random_walk, walk_record):
        model, obs = random_walk
        _, observations = walk_record
        cfg = FilterConfig(n_particles=5000, proposal="implicit_a", seed=11)
        out = FilterEngine(model, obs, cfg).run(np.zeros(1), observations)
        mean, variance = 0.0, 0.0
        for k, b in enumerate(observations[:, 0]):
            est = kalman_step(mean, variance, b, 0.01, 0.04)
            mean, variance = est.mean, est.variance
            assert out.means[k][0] == pytest.approx(mean, abs=0.015)

    def test_standard_sir_engine(self, random_walk, walk_record):
        model, obs = random_walk
        _, observations = walk_record
        cfg = FilterConfig(n_particles=50, proposal="standard_sir", seed=1)
        out = FilterEngine(model, obs, cfg).run(np.zeros(1), observations)
        assert out.estimates.shape == (20, 1)

    def test_standard_sir_agrees_with_implicit_on_a_linear_model(self, random_walk, walk_record):
        model, obs = random_walk
        _, observations = walk_record
        sir = FilterConfig(n_particles=20_000, proposal="standard_sir", seed=5)
        implicit = FilterConfig(n_particles=5000, proposal="implicit_a", seed=5)
        a = FilterEngine(model, obs, sir).run(np.zeros(1), observations)
        b = FilterEngine(model, obs, implicit).run(np.zeros(1), observations)
        assert np.allclose(a.estimates, b.estimates, atol=0.02)


class TestPosteriorAgreement:
    """Weighted one-step ensembles against the quadrature posterior of the static problems."""

    @staticmethod
    def _ks(observation: str, b: float, n: int, seed: int = 0) -> float:
        factory = linear_observation if observation == "linear" else cubic_observation
        cfg = FilterConfig(n_particles=n, proposal="implicit_auto", resample_every=0)
        start = Ensemble.initial(np.zeros(1), n)
        ens = propose_step(
            start, np.array([b]), static_model(0.1), factory(1, 1, 0.1), cfg, ParticleStreams(seed)
        )
        exact = auto_quadrature(static_objective(observation, b))
        return weighted_ks_distance(ens.positions, ens.normalized_weights(), exact)

    @pytest.mark.parametrize("b", [1.0, 1.5, 2.5])
    def test_auto_on_non_convex_cubic(self, b: float):
        assert self._ks("cubic", b, 5000) < 0.05

    def test_auto_on_linear(self):
        assert self._ks("linear", 2.0, 5000) < 0.05

    @pytest.mark.slow
    @pytest.mark.parametrize(
        ("observation", "b"), [("linear", 2.0), ("cubic", 1.0), ("cubic", 2.5)]
    )
    def test_large_ensembles(self, observation: str, b: float):
        assert self._ks(observation, b, 100_000) < 0.01


class TestStreams:
    def test_particle_draw_is_independent_of_batch_size(self):
        streams = ParticleStreams(3)
        assert np.array_equal(streams.normals(4, 3, 1)[2], streams.normals(4, 10, 1)[2])
