"""Tests for nonlinear / nominal / learned comparisons."""

import csv
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from discolift.compare import (
    SUMMARY_COLUMNS,
    TRACE_COLUMNS,
    linear_closed_loop,
    run_comparison,
    write_comparison,
)
from discolift.datagen import DataGenConfig
from discolift.discrepancy import model_for_plant
from discolift.lti import StateSpace
from discolift.normbounded import NormBoundedTheta
from discolift.plants import Plant


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def pendulum():
    return Plant.from_name("pendulum")


@pytest.fixture
def model(pendulum):
    return model_for_plant(
        pendulum, 0.1, lifted_dim=3, hidden_widths=(4,), rng=np.random.default_rng(2)
    )


@pytest.fixture
def config():
    return DataGenConfig(count=1, horizon=10, dt=0.1, x0_bounds=[0.5, 0.5])


class TestRunComparison:
    def test_openloop_traces(self, model, pendulum, config):
        """Test open-loop traces share the initial state and have one row per sample."""
        report = run_comparison(model, pendulum, config, "openloop", scenarios=2, steps=8)
        assert len(report.scenarios) == 2
        trace = report.scenarios[0]
        assert trace.nonlinear.shape == (9, 2)
        np.testing.assert_allclose(trace.nominal[0], trace.nonlinear[0])
        assert trace.channels == ("x1", "x2")

    def test_seeded(self, model, pendulum, config):
        """Test the same seed reproduces the scenarios and another seed changes them."""
        first = run_comparison(model, pendulum, config, "closedloop", scenarios=2, steps=5, seed=4)
        again = run_comparison(model, pendulum, config, "closedloop", scenarios=2, steps=5, seed=4)
        other = run_comparison(model, pendulum, config, "closedloop", scenarios=2, steps=5, seed=5)
        np.testing.assert_array_equal(first.scenarios[1].learned, again.scenarios[1].learned)
        assert not np.array_equal(first.scenarios[0].nonlinear, other.scenarios[0].nonlinear)

    @pytest.mark.parametrize("kind", ["openloop", "closedloop"])
    def test_zero_perturbation_matches_nominal(self, model, pendulum, config, kind):
        """Test a perturbation with zero output leaves G identical to P."""
        model = replace(model, theta=NormBoundedTheta.zeros(model.theta.dims))
        report = run_comparison(model, pendulum, config, kind, scenarios=1, steps=6)
        trace = report.scenarios[0]
        np.testing.assert_allclose(trace.learned, trace.nominal, atol=1e-12)
        nominal, learned = report.mean_mse()
        assert learned == pytest.approx(nominal)

    def test_invalid_arguments(self, model, pendulum, config):
        """Test unknown kinds and empty runs are refused."""
        with pytest.raises(ValueError):
            run_comparison(model, pendulum, config, "sideways", scenarios=1, steps=5)
        with pytest.raises(ValueError):
            run_comparison(model, pendulum, config, "openloop", scenarios=0, steps=5)
        with pytest.raises(ValueError):
            run_comparison(model, pendulum, config, "openloop", scenarios=1, steps=0)

    def test_channel_means(self, model, pendulum, config):
        """Test per-channel means average over scenarios."""
        report = run_comparison(model, pendulum, config, "openloop", scenarios=3, steps=4)
        means = report.channel_means()
        assert [channel for channel, _, _ in means] == ["x1", "x2"]
        expected = np.mean([s.mse_learned()[1] for s in report.scenarios])
        assert means[1][2] == pytest.approx(expected)

    def test_controller_uses_model_sample_time(self, model, pendulum, config):
        """Test a config with another dt still designs the controller at the model's dt."""
        other = replace(config, dt=0.05)
        expected = run_comparison(model, pendulum, config, "closedloop", scenarios=1, steps=5)
        report = run_comparison(model, pendulum, other, "closedloop", scenarios=1, steps=5)
        assert report.scenarios[0].dt == pytest.approx(0.1)
        np.testing.assert_array_equal(report.scenarios[0].nominal, expected.scenarios[0].nominal)
        np.testing.assert_array_equal(report.scenarios[0].learned, expected.scenarios[0].learned)


class TestLinearClosedLoop:
    def test_scalar_loop(self):
        """Test a scalar loop z+ = 0.5 z + u with u = -0.25 y."""
        ss = StateSpace([[0.5]], [[1.0]], [[1.0]], [[0.0]], 0.1)
        noise = np.zeros((4, 1))
        outputs = linear_closed_loop(ss, [1.0], np.array([[0.25]]), noise, noise)
        np.testing.assert_allclose(outputs[:, 0], [1.0, 0.25, 0.0625, 0.015625])


class TestWriteComparison:
    def test_files(self, model, pendulum, config, temp_dir):
        """Test one trace file per scenario plus a summary."""
        report = run_comparison(model, pendulum, config, "openloop", scenarios=2, steps=3)
        paths = write_comparison(report, temp_dir)
        assert [p.name for p in paths] == ["scenario_000.csv", "scenario_001.csv", "summary.csv"]

        with open(temp_dir / "scenario_001.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == TRACE_COLUMNS
        assert len(rows) == 1 + 4 * 2
        assert float(rows[3][1]) == pytest.approx(0.1)
        assert float(rows[1][3]) == report.scenarios[1].nonlinear[0, 0]

        with open(temp_dir / "summary.csv", newline="") as f:
            summary = list(csv.reader(f))
        assert tuple(summary[0]) == SUMMARY_COLUMNS
        assert len(summary) == 1 + 2 * 2
