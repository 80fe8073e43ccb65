"""Side-by-side simulation of the nonlinear plant, the nominal model P and the learned G."""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .datagen import (
    DataGenConfig,
    closed_loop_noise,
    controller_for,
    simulate_closed_loop,
)
from .discrepancy import DiscrepancyModel, learned_system
from .lti import StateSpace, simulate
from .plants import Plant, from_deviation, integrate, to_deviation

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

SCENARIO_KINDS = ("openloop", "closedloop")
TRACE_COLUMNS = ("k", "t", "channel", "nonlinear", "nominal", "learned")
SUMMARY_COLUMNS = ("scenario", "channel", "mse_nominal", "mse_learned")


@dataclass
class ScenarioTrace:
    """Deviation-coordinate state histories of the three systems for one scenario."""

    index: int
    kind: str
    dt: float
    channels: Tuple[str, ...]
    nonlinear: np.ndarray
    nominal: np.ndarray
    learned: np.ndarray

    @property
    def steps(self) -> int:
        return self.nonlinear.shape[0]

    def mse_nominal(self) -> np.ndarray:
        return np.mean((self.nominal - self.nonlinear) ** 2, axis=0)

    def mse_learned(self) -> np.ndarray:
        return np.mean((self.learned - self.nonlinear) ** 2, axis=0)


@dataclass
class ComparisonReport:
    kind: str
    scenarios: List[ScenarioTrace]

    def mean_mse(self) -> Tuple[float, float]:
        """Mean over scenarios and channels of the nominal and learned MSE."""
        nominal = float(np.mean([s.mse_nominal() for s in self.scenarios]))
        learned = float(np.mean([s.mse_learned() for s in self.scenarios]))
        return nominal, learned

    def channel_means(self) -> List[Tuple[str, float, float]]:
        """(channel, mean nominal MSE, mean learned MSE) per state channel."""
        nominal = np.mean([s.mse_nominal() for s in self.scenarios], axis=0)
        learned = np.mean([s.mse_learned() for s in self.scenarios], axis=0)
        channels = self.scenarios[0].channels
        return [(c, float(a), float(b)) for c, a, b in zip(channels, nominal, learned)]


def linear_closed_loop(
    ss: StateSpace,
    z0: np.ndarray,
    gain: np.ndarray,
    measurement_noise: np.ndarray,
    process_noise: np.ndarray,
) -> np.ndarray:
    """Close u = -K (y + v) + w around a strictly proper linear model; returns y(0..T)."""
    steps = measurement_noise.shape[0]
    outputs = np.zeros((steps, ss.n_outputs))
    z = np.asarray(z0, dtype=np.float64)
    for k in range(steps):
        outputs[k] = ss.C @ z
        if k == steps - 1:
            break
        u = -gain @ (outputs[k] + measurement_noise[k]) + process_noise[k]
        z = ss.A @ z + ss.B @ u
    return outputs


def _sample_initial_state(plant: Plant, config: DataGenConfig, rng: np.random.Generator):
    bounds = np.asarray(config.x0_bounds, dtype=np.float64)
    if bounds.size != plant.n:
        raise ValueError(f"x0_bounds has {bounds.size} entries, expected {plant.n}")
    return rng.uniform(-bounds, bounds)


def openloop_scenario(
    model: DiscrepancyModel,
    plant: Plant,
    config: DataGenConfig,
    steps: int,
    rng: np.random.Generator,
    index: int = 0,
) -> ScenarioTrace:
    """Drive all three systems with one random input sequence from one random x0."""
    dt = model.nominal.dt
    x0 = _sample_initial_state(plant, config, rng)
    bounds = np.asarray(config.input_bounds, dtype=np.float64)
    u_dev = rng.uniform(-bounds, bounds, size=(steps + 1, plant.m))

    trim = model.trim
    x_abs, u_abs = from_deviation(trim, x0[None, :], u_dev, dt)
    states = integrate(plant, x_abs[0], u_abs, dt, rtol=config.rtol, atol=config.atol)
    nonlinear, _ = to_deviation(trim, states, u_abs, dt)
    nominal, _ = simulate(model.nominal, x0, u_dev)
    _, learned = simulate(learned_system(model), model.initial_state(x0), u_dev)
    return ScenarioTrace(index, "openloop", dt, plant.state_names, nonlinear, nominal, learned)


def closedloop_scenario(
    model: DiscrepancyModel,
    plant: Plant,
    config: DataGenConfig,
    gain: np.ndarray,
    steps: int,
    rng: np.random.Generator,
    index: int = 0,
) -> ScenarioTrace:
    """Close the LQR loop around each system with the same x0 and noise streams.

    Every system feeds its own state (or output) back to the controller.
    """
    dt = model.nominal.dt
    x0 = _sample_initial_state(plant, config, rng)
    measurement, process = closed_loop_noise(plant, config, rng, steps + 1)

    nonlinear, _ = simulate_closed_loop(
        plant, model.trim, gain, x0, measurement, process, dt, config.rtol, config.atol
    )
    nominal = linear_closed_loop(model.nominal, x0, gain, measurement, process)
    learned = linear_closed_loop(
        learned_system(model), model.initial_state(x0), gain, measurement, process
    )
    return ScenarioTrace(index, "closedloop", dt, plant.state_names, nonlinear, nominal, learned)


def run_comparison(
    model: DiscrepancyModel,
    plant: Plant,
    config: DataGenConfig,
    kind: str,
    scenarios: int,
    steps: int,
    seed: int = 0,
) -> ComparisonReport:
    """Run seeded scenarios; scenario i draws from the stream (seed, i).

    The controller and every simulation use the model's sample time.

    Raises:
        ValueError: For an unknown kind or a non-positive count or horizon
    """
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"Unknown scenario kind '{kind}' (expected one of {SCENARIO_KINDS})")
    if scenarios < 1:
        raise ValueError(f"scenarios must be positive, got {scenarios}")
    if steps < 1:
        raise ValueError(f"steps must be positive, got {steps}")

    dt = model.nominal.dt
    if not np.isclose(config.dt, dt, rtol=1e-12, atol=0.0):
        log.warning(f"Comparison config dt={config.dt:g} differs from the model's; using dt={dt:g}")
        config = replace(config, dt=dt)

    gain = controller_for(plant, config) if kind == "closedloop" else None
    traces = []
    for index in range(scenarios):
        rng = np.random.default_rng([seed, index])
        if gain is None:
            trace = openloop_scenario(model, plant, config, steps, rng, index)
        else:
            trace = closedloop_scenario(model, plant, config, gain, steps, rng, index)
        log.debug(
            f"scenario {index}: mse nominal={trace.mse_nominal().mean():.3e} "
            f"learned={trace.mse_learned().mean():.3e}"
        )
        traces.append(trace)
    return ComparisonReport(kind=kind, scenarios=traces)


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_comparison(report: ComparisonReport, out_dir: Path) -> List[Path]:
    """Write scenario_NNN.csv per scenario and summary.csv; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    for trace in report.scenarios:
        path = out_dir / f"scenario_{trace.index:03d}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for k in range(trace.steps):
                for c, channel in enumerate(trace.channels):
                    writer.writerow(
                        [
                            k,
                            _fmt(k * trace.dt),
                            channel,
                            _fmt(trace.nonlinear[k, c]),
                            _fmt(trace.nominal[k, c]),
                            _fmt(trace.learned[k, c]),
                        ]
                    )
        written.append(path)

    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for trace in report.scenarios:
            for channel, nominal, learned in zip(
                trace.channels, trace.mse_nominal(), trace.mse_learned()
            ):
                writer.writerow([trace.index, channel, _fmt(nominal), _fmt(learned)])
    written.append(summary)
    return written
