"""Trajectory datasets: open-loop excitation and LQR closed-loop generation."""

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .lti import InstabilityError, StateSpace, dlqr, spectral_radius
from .numkernel import ShapeMismatchError
from .plants import (
    Plant,
    Trim,
    eval_dynamics,
    from_deviation,
    integrate,
    integrate_interval,
    nominal_model,
    plant_trim,
    to_deviation,
)

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

LIMITED_DURATION = 5.0


@dataclass
class DataGenConfig:
    """How trajectories are sampled.

    Bounds are half-widths of symmetric boxes in deviation coordinates.
    Measurement noise enters the controller only; process noise is added to
    its commands.
    """

    count: int = 5000
    horizon: int = 100
    dt: float = 0.1
    x0_bounds: List[float] = field(default_factory=lambda: [np.pi / 3, np.pi / 3])
    input_bounds: List[float] = field(default_factory=lambda: [0.5])
    closed_loop: bool = False
    measurement_std: List[float] = field(default_factory=list)
    process_bounds: List[float] = field(default_factory=list)
    lqr_q: List[float] = field(default_factory=list)
    lqr_r: List[float] = field(default_factory=list)
    envelope_bounds: Optional[List[float]] = None
    seed: int = 0
    rtol: float = 1e-3
    atol: float = 1e-6

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        for name in ("x0_bounds", "input_bounds", "measurement_std", "process_bounds"):
            values = getattr(self, name)
            if any(not np.isfinite(v) or v < 0 for v in values):
                raise ValueError(f"{name} must be finite and nonnegative, got {values}")

    @classmethod
    def for_plant(cls, kind: str) -> "DataGenConfig":
        """Data-generation defaults for each benchmark."""
        if kind == "pendulum":
            return cls(count=5000, horizon=100, dt=0.1, x0_bounds=[np.pi / 3, np.pi / 3])
        if kind == "vdp":
            return cls(count=5000, horizon=100, dt=0.1, x0_bounds=[2.0, 2.0])
        if kind == "uas":
            return cls(
                count=10000,
                horizon=100,
                dt=0.02,
                x0_bounds=[np.pi / 3, 5.0, 5.0, np.pi / 3, 5.0, 5.0],
                input_bounds=[5.0, 10.0, 2.0],
                closed_loop=True,
                measurement_std=[0.15, 2.0, 2.0, 0.15, 2.0, 2.0],
                process_bounds=[5.0, 10.0, 2.0],
                lqr_q=[10.0, 1.0, 1.0, 10.0, 0.1, 1.0],
                lqr_r=[0.1, 0.1, 1.0],
            )
        raise ValueError(f"Unknown plant '{kind}'")


@dataclass
class Dataset:
    """Equal-length trajectories in deviation coordinates.

    states has shape (K, T+1, n) and inputs (K, T+1, m). residuals, once
    attached, has the shape of states.
    """

    plant: str
    dt: float
    states: np.ndarray
    inputs: np.ndarray
    trim_state: np.ndarray
    trim_input: np.ndarray
    envelope_violations: Optional[np.ndarray] = None
    residuals: Optional[np.ndarray] = None
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.states.ndim != 3 or self.inputs.ndim != 3:
            raise ShapeMismatchError("Dataset: states and inputs must be (K, T+1, dim) arrays")
        if self.states.shape[:2] != self.inputs.shape[:2]:
            raise ShapeMismatchError(
                f"Dataset: states {self.states.shape} and inputs {self.inputs.shape} do not align"
            )
        if self.envelope_violations is None:
            self.envelope_violations = np.zeros(self.count, dtype=bool)
        self.envelope_violations = np.asarray(self.envelope_violations, dtype=bool)
        if self.residuals is not None and self.residuals.shape != self.states.shape:
            raise ShapeMismatchError(
                f"Dataset: residuals {self.residuals.shape} do not match states {self.states.shape}"
            )

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    @property
    def n_states(self) -> int:
        return self.states.shape[2]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[2]

    @property
    def trim(self) -> Trim:
        # the UAS trim ramps x_c at its forward speed
        airspeed = float(self.trim_state[1]) if self.plant == "uas" else 0.0
        return Trim(state=self.trim_state, input=self.trim_input, airspeed=airspeed)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return replace(
            self,
            states=self.states[indices],
            inputs=self.inputs[indices],
            envelope_violations=self.envelope_violations[indices],
            residuals=None if self.residuals is None else self.residuals[indices],
        )

    def split(self, validation_fraction: float, seed: int) -> Tuple["Dataset", "Dataset"]:
        """Split by trajectory with a seeded permutation into (train, validation)."""
        if not 0.0 < validation_fraction < 1.0:
            raise ValueError(f"validation fraction must be in (0, 1), got {validation_fraction}")
        if self.count < 2:
            raise ValueError("need at least two trajectories to split")
        order = np.random.default_rng(seed).permutation(self.count)
        n_val = min(self.count - 1, max(1, int(round(validation_fraction * self.count))))
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))

    def truncate(self, horizon: int) -> "Dataset":
        """Keep samples 0..horizon of every trajectory."""
        if not 1 <= horizon <= self.horizon:
            raise ValueError(f"horizon must be in [1, {self.horizon}], got {horizon}")
        stop = horizon + 1
        return replace(
            self,
            states=self.states[:, :stop],
            inputs=self.inputs[:, :stop],
            residuals=None if self.residuals is None else self.residuals[:, :stop],
        )

    def windows(self, length: int) -> "Dataset":
        """Cut every trajectory into non-overlapping windows of `length` transitions.

        Residuals are dropped: each window restarts the factorization from its
        own first sample.
        """
        if not 1 <= length <= self.horizon:
            raise ValueError(f"window must be in [1, {self.horizon}], got {length}")
        starts = range(0, self.horizon - length + 1, length)
        states = np.concatenate([self.states[:, s : s + length + 1] for s in starts])
        inputs = np.concatenate([self.inputs[:, s : s + length + 1] for s in starts])
        flags = np.concatenate([self.envelope_violations for _ in starts])
        return replace(
            self, states=states, inputs=inputs, envelope_violations=flags, residuals=None
        )

    def with_residuals(self, residuals: np.ndarray) -> "Dataset":
        return replace(self, residuals=np.asarray(residuals, dtype=np.float64))


def lqr_controller(linearization: StateSpace, Q, R) -> np.ndarray:
    """State-feedback gain for u = u* - K (x_meas - x*), checked for closed-loop stability."""
    K = dlqr(linearization.A, linearization.B, Q, R)
    rho = spectral_radius(linearization.A - linearization.B @ K)
    if rho >= 1.0:
        raise InstabilityError(f"lqr_controller: rho(A - BK) = {rho:.6f} is not below 1")
    return K


def controller_for(plant: Plant, config: DataGenConfig) -> np.ndarray:
    """LQR gain for the plant's trim linearization using the configured diagonal weights."""
    Q = np.diag(config.lqr_q) if config.lqr_q else np.eye(plant.n)
    R = np.diag(config.lqr_r) if config.lqr_r else np.eye(plant.m)
    return lqr_controller(nominal_model(plant, config.dt), Q, R)


def _noise_vector(values: Sequence[float], size: int) -> np.ndarray:
    if not values:
        return np.zeros(size)
    if len(values) != size:
        raise ShapeMismatchError(f"expected {size} noise entries, got {len(values)}")
    return np.asarray(values, dtype=np.float64)


def _simulate_open_loop(
    plant: Plant, trim: Trim, x0_dev: np.ndarray, config: DataGenConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    bounds = _noise_vector(config.input_bounds, plant.m)
    u_dev = rng.uniform(-bounds, bounds, size=(config.horizon + 1, plant.m))
    x_abs, u_abs = from_deviation(trim, x0_dev[None, :], u_dev, config.dt)
    states = integrate(plant, x_abs[0], u_abs, config.dt, rtol=config.rtol, atol=config.atol)
    return to_deviation(trim, states, u_abs, config.dt)


def simulate_closed_loop(
    plant: Plant,
    trim: Trim,
    gain: np.ndarray,
    x0_dev: np.ndarray,
    measurement_noise: np.ndarray,
    process_noise: np.ndarray,
    dt: float,
    rtol: float = 1e-3,
    atol: float = 1e-6,
) -> Tuple[np.ndarray, np.ndarray]:
    """Nonlinear closed loop under u = u* - K (x_dev + v) + w.

    Noise arrays have one row per sample (T+1 rows); the recorded states are
    the true ones.

    Returns:
        (x_dev, u_dev) sequences of length T+1
    """
    steps = measurement_noise.shape[0]
    x_dev = np.zeros((steps, plant.n))
    u_dev = np.zeros((steps, plant.m))
    x_dev[0] = x0_dev
    x = x0_dev + trim.state_at(0.0)

    for k in range(steps):
        u_dev[k] = -gain @ (x_dev[k] + measurement_noise[k]) + process_noise[k]
        if k == steps - 1:
            break
        x = integrate_interval(
            lambda s, a: eval_dynamics(plant, s, a), x, u_dev[k] + trim.input, dt, rtol, atol
        )
        x_dev[k + 1] = x - trim.state_at((k + 1) * dt)
    return x_dev, u_dev


def closed_loop_noise(
    plant: Plant, config: DataGenConfig, rng: np.random.Generator, steps: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian measurement noise and uniform process noise, one row per sample."""
    std = _noise_vector(config.measurement_std, plant.n)
    bounds = _noise_vector(config.process_bounds, plant.m)
    measurement = rng.normal(0.0, 1.0, size=(steps, plant.n)) * std
    process = rng.uniform(-1.0, 1.0, size=(steps, plant.m)) * bounds
    return measurement, process


def _envelope_violated(x_dev: np.ndarray, bounds: Sequence[float]) -> bool:
    return bool(np.any(np.abs(x_dev) > np.asarray(bounds)))


def _generate(
    plant: Plant,
    config: DataGenConfig,
    initial_states: Sequence[Optional[np.ndarray]],
    seed: int,
) -> Dataset:
    trim = plant_trim(plant)
    gain = controller_for(plant, config) if config.closed_loop else None
    envelope = config.envelope_bounds or config.x0_bounds
    steps = config.horizon + 1

    states = np.zeros((len(initial_states), steps, plant.n))
    inputs = np.zeros((len(initial_states), steps, plant.m))
    flags = np.zeros(len(initial_states), dtype=bool)
    for index, x0_dev in enumerate(initial_states):
        rng = np.random.default_rng([seed, index])
        if x0_dev is None:
            bounds = _noise_vector(config.x0_bounds, plant.n)
            x0_dev = rng.uniform(-bounds, bounds)
        if gain is None:
            x_dev, u_dev = _simulate_open_loop(plant, trim, x0_dev, config, rng)
        else:
            measurement, process = closed_loop_noise(plant, config, rng, steps)
            x_dev, u_dev = simulate_closed_loop(
                plant, trim, gain, x0_dev, measurement, process, config.dt, config.rtol, config.atol
            )
        states[index], inputs[index] = x_dev, u_dev
        flags[index] = _envelope_violated(x_dev, envelope)

    if flags.any():
        log.warning(f"{int(flags.sum())} of {len(flags)} trajectories left the sampling envelope")
    return Dataset(
        plant=plant.kind,
        dt=config.dt,
        states=states,
        inputs=inputs,
        trim_state=trim.state,
        trim_input=trim.input,
        envelope_violations=flags,
        seed=seed,
    )


def generate_dataset(plant: Plant, config: DataGenConfig) -> Dataset:
    """Sample config.count trajectories; trajectory i draws from the stream (seed, i)."""
    log.info(
        f"Generating {config.count} {plant.kind} trajectories "
        f"({'closed' if config.closed_loop else 'open'} loop, T={config.horizon}, dt={config.dt})"
    )
    return _generate(plant, config, [None] * config.count, config.seed)


def corner_initial_states(bounds: Sequence[float]) -> np.ndarray:
    """Every combination of +/- bound per state, 2**n rows."""
    bounds = np.asarray(bounds, dtype=np.float64)
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=bounds.size)))
    return signs * bounds


def limited_uas_dataset(
    plant: Plant, config: DataGenConfig, duration: float = LIMITED_DURATION
) -> Dataset:
    """Small dataset of one trajectory per corner of the initial-state box."""
    horizon = int(round(duration / config.dt))
    corners = corner_initial_states(config.x0_bounds)
    limited = replace(config, count=len(corners), horizon=horizon)
    log.info(f"Generating {len(corners)} corner trajectories of {duration:g} s")
    return _generate(plant, limited, list(corners), config.seed)
