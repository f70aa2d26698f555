"""Reduced-size runs of the experiment tables and figure data."""

from pathlib import Path

import numpy as np
import pytest

from implicitfilter import tables
from implicitfilter.errors import ConfigError
from implicitfilter.tables import (
    EXPERIMENTS,
    Table,
    potential_grid,
    reconstruction_run,
    substitute_grid,
    table1,
    table2,
    table3,
    table4,
    table5,
    table6,
)


def column(table: Table, name: str) -> np.ndarray:
    j = table.header.index(name)
    return np.array([row[j] for row in table.rows], dtype=float)


class TestTable:
    def test_write(self, tmp_dir: Path, read_rows):
        path = Table("demo", ["a", "b"], [[1, 0.5], [2, None]]).write(tmp_dir)
        assert path.name == "demo.csv"
        assert read_rows(path) == [{"a": "1", "b": "0.5"}, {"a": "2", "b": ""}]

    def test_registry(self):
        assert set(EXPERIMENTS) == {
            "table1",
            "table2",
            "table3",
            "table4",
            "table5",
            "table6",
            "figure_data",
        }


class TestTable1:
    def test_extra_particle_count(self):
        (table,) = table1(particles=7, repeats=2, n_steps=5)
        assert table.name == "table1"
        assert list(column(table, "M")) == [100, 50, 20, 10, 7, 5, 1]
        assert np.all(column(table, "var_delta") >= 0.0)

    def test_default_particle_counts(self):
        (table,) = table1(repeats=2, n_steps=5)
        assert list(column(table, "M")) == [100, 50, 20, 10, 5, 1]

    def test_particle_count_list_is_merged(self):
        (table,) = table1(particles=[50, 2], repeats=2, n_steps=5)
        assert list(column(table, "M")) == [100, 50, 20, 10, 5, 2, 1]

    def test_particle_counts_must_be_positive(self):
        with pytest.raises(ConfigError):
            table1(particles=[0], repeats=2)

    def test_needs_two_repeats(self):
        with pytest.raises(ConfigError):
            table1(particles=5, repeats=1)

    def test_seeded(self):
        a = table1(seed=3, repeats=2, n_steps=8)[0]
        b = table1(seed=3, repeats=2, n_steps=8, n_workers=2)[0]
        assert a.rows == b.rows

    @pytest.mark.slow
    def test_observed_discrepancy_variance(self):
        (table,) = table1(repeats=1000, n_workers=4)
        counts = list(column(table, "M"))
        mean, var = column(table, "mean_delta"), column(table, "var_delta")
        m100, m50, m1 = counts.index(100), counts.index(50), counts.index(1)
        assert var[m100] == pytest.approx(0.021, abs=0.004)
        assert abs(mean[m50]) < 0.01
        assert 0.012 <= var[m50] <= 0.035
        assert 0.02 <= var[m1] <= 0.06


class TestHistogramTables:
    def test_linear_histogram(self):
        (table,) = table2(samples=4000)
        assert table.header == ["k", "Y_k", "standard", "implicit", "se_standard", "se_implicit"]
        assert len(table.rows) == 10
        implicit = column(table, "implicit")
        standard = column(table, "standard")
        assert np.allclose(implicit, 0.1, atol=0.03)
        assert standard[0] == pytest.approx(0.988, abs=0.01)
        assert table.rows[-1][1] == float("inf")

    def test_cubic_histogram(self):
        (table,) = table4(samples=2000, bins=5)
        assert len(table.rows) == 5
        assert column(table, "implicit").sum() == pytest.approx(1.0)
        assert column(table, "standard").sum() == pytest.approx(1.0)


class TestMeanTables:
    def test_linear_means(self):
        (table,) = table3(particles=30, repeats=20)
        assert list(column(table, "b")) == [0.0, 0.5, 1.0, 1.5, 2.0]
        assert np.allclose(column(table, "exact"), column(table, "b") / 2)
        assert np.allclose(column(table, "implicit"), column(table, "exact"), atol=0.04)

    def test_workers_do_not_change_the_table(self):
        a = table3(particles=10, repeats=4)[0]
        b = table3(particles=10, repeats=4, n_workers=3)[0]
        assert a.rows == b.rows

    def test_baseline_has_its_own_streams(self, monkeypatch):
        seeds = {}

        def spy(name, fn):
            def wrapped(*args, **kwargs):
                streams = args[5] if name == "implicit" else args[4]
                seeds.setdefault(name, []).append(streams.seed)
                return fn(*args, **kwargs)

            return wrapped

        monkeypatch.setattr(tables, "propose_step", spy("implicit", tables.propose_step))
        monkeypatch.setattr(tables, "standard_sir_step", spy("standard", tables.standard_sir_step))
        table3(particles=10, repeats=3)
        assert len(seeds["implicit"]) == len(seeds["standard"]) == 15
        assert not set(seeds["implicit"]) & set(seeds["standard"])

    def test_cubic_means(self):
        (table,) = table5(particles=1000, repeats=3)
        exact = column(table, "exact")
        assert exact[0] == pytest.approx(0.0, abs=1e-6)
        assert exact[2] == pytest.approx(0.442, abs=0.01)
        assert np.allclose(column(table, "implicit"), exact, atol=0.05)

    @pytest.mark.slow
    def test_full_size_cubic_means(self):
        (table,) = table5(n_workers=4)
        assert np.allclose(column(table, "implicit"), column(table, "exact"), atol=0.02)
        # the prior barely reaches the posterior at b = 2.5
        standard, exact = column(table, "standard"), column(table, "exact")
        assert exact[-1] - standard[-1] > 0.3


class TestTable6:
    def test_trace(self):
        (table,) = table6(particles=10, n_steps=30, iterations=3)
        assert table.header == ["iteration", "sigma_over_sigma_star", "T"]
        assert 2 <= len(table.rows) <= 4
        assert table.rows[0] == [0, pytest.approx(10.0), None]

    def test_trials(self):
        tables = table6(particles=10, n_steps=30, iterations=2, repeats=2)
        assert [t.name for t in tables] == ["table6", "table6_trials"]
        assert len(tables[1].rows) == 2

    def test_segmented(self):
        (table,) = table6(particles=10, n_steps=30, iterations=2, segment_length=10)
        assert np.all(np.isfinite(column(table, "sigma_over_sigma_star")))


class TestFigureData:
    def test_potential(self):
        table = potential_grid()
        assert len(table.rows) == 301
        assert table.rows[150] == [pytest.approx(0.0, abs=1e-12), pytest.approx(0.625)]

    def test_reconstruction(self):
        table = reconstruction_run(particles=10, n_steps=20)
        assert table.header == ["t", "truth", "estimate", "observation"]
        assert len(table.rows) == 21
        assert table.rows[0] == [0.0, 0.0, 0.0, None]
        assert table.rows[-1][0] == pytest.approx(0.2)

    def test_substitute(self):
        table = substitute_grid()
        f, f0 = column(table, "F"), column(table, "F0")
        assert len(table.rows) == 701
        assert f0.min() == pytest.approx(f.min(), abs=1e-3)
        assert f0[-1] == pytest.approx(f[-1])
        assert np.any(np.abs(f0 - f) > 1e-6)
