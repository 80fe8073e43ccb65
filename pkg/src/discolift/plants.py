"""Nonlinear benchmark plants, their trims, linearizations and an adaptive RK23 integrator."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .lti import StateSpace, zoh_discretize
from .numkernel import NumericalError, ShapeMismatchError

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

GRAVITY = 9.81
UAS_MASS = 5.71
UAS_INERTIA = 1.57
UAS_AIRSPEED = 15.0
PENDULUM_DAMPING = 0.01

RTOL = 1e-3
ATOL = 1e-6

PLANT_KINDS = ("pendulum", "vdp", "uas")

# x_c is the position channel that ramps with the trim airspeed
UAS_POSITION_INDEX = 4

Rhs = Callable[[np.ndarray, np.ndarray], np.ndarray]


class IntegrationError(NumericalError):
    """Raised when the ODE solver fails or the vector field goes non-finite."""

    pass


@dataclass(frozen=True)
class Plant:
    """One of the nonlinear benchmark systems."""

    kind: str
    n: int
    m: int
    state_names: Tuple[str, ...]
    input_names: Tuple[str, ...]
    mass: float = UAS_MASS
    inertia: float = UAS_INERTIA
    gravity: float = GRAVITY

    @classmethod
    def from_name(cls, kind: str) -> "Plant":
        try:
            return _PLANTS[kind]
        except KeyError:
            raise ValueError(f"Unknown plant '{kind}' (expected one of {PLANT_KINDS})") from None


_PLANTS: Dict[str, Plant] = {
    "pendulum": Plant("pendulum", 2, 1, ("x1", "x2"), ("u",)),
    "vdp": Plant("vdp", 2, 1, ("x1", "x2"), ("u",)),
    "uas": Plant(
        "uas", 6, 3, ("q", "v_x", "v_z", "theta", "x_c", "h"), ("F_x", "F_z", "tau")
    ),
}


@dataclass(frozen=True)
class Trim:
    """Operating point (x*, u*). For the UAS, x_c follows airspeed * t."""

    state: np.ndarray
    input: np.ndarray
    airspeed: float = 0.0

    def state_at(self, t) -> np.ndarray:
        """Trim state at time(s) t; shape (n,) for a scalar t, (len(t), n) otherwise."""
        t_arr = np.asarray(t, dtype=np.float64)
        states = np.broadcast_to(self.state, t_arr.shape + self.state.shape).copy()
        if self.airspeed and self.state.shape[0] > UAS_POSITION_INDEX:
            states[..., UAS_POSITION_INDEX] += self.airspeed * t_arr
        return states


def _check_dims(plant: Plant, x: np.ndarray, u: np.ndarray) -> None:
    if x.shape != (plant.n,) or u.shape != (plant.m,):
        raise ShapeMismatchError(
            f"{plant.kind}: expected x of length {plant.n} and u of length {plant.m}, "
            f"got {x.shape} and {u.shape}"
        )


def eval_dynamics(plant: Plant, x, u) -> np.ndarray:
    """Continuous-time state derivative."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    _check_dims(plant, x, u)

    if plant.kind == "pendulum":
        return np.array([x[1], PENDULUM_DAMPING * x[1] - np.sin(x[0]) + u[0]])

    if plant.kind == "vdp":
        return np.array([x[1], (1.0 - x[0] ** 2) * x[1] - x[0] + u[0]])

    q, vx, vz, theta = x[0], x[1], x[2], x[3]
    fx, fz, tau = u
    m, g = plant.mass, plant.gravity
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    return np.array(
        [
            tau / plant.inertia,
            -q * vz + fx / m - g * sin_t,
            q * vx + fz / m + g * cos_t,
            q,
            vx * cos_t + vz * sin_t,
            vx * sin_t - vz * cos_t,
        ]
    )


def linearize(plant: Plant, x_eq, u_eq) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (Ac, Bc) of the dynamics at (x_eq, u_eq)."""
    x = np.asarray(x_eq, dtype=np.float64).reshape(-1)
    u = np.asarray(u_eq, dtype=np.float64).reshape(-1)
    _check_dims(plant, x, u)

    if plant.kind == "pendulum":
        Ac = np.array([[0.0, 1.0], [-np.cos(x[0]), PENDULUM_DAMPING]])
        return Ac, np.array([[0.0], [1.0]])

    if plant.kind == "vdp":
        Ac = np.array([[0.0, 1.0], [-2.0 * x[0] * x[1] - 1.0, 1.0 - x[0] ** 2]])
        return Ac, np.array([[0.0], [1.0]])

    q, vx, vz, theta = x[0], x[1], x[2], x[3]
    g = plant.gravity
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    Ac = np.zeros((6, 6))
    Ac[1, 0], Ac[1, 2], Ac[1, 3] = -vz, -q, -g * cos_t
    Ac[2, 0], Ac[2, 1], Ac[2, 3] = vx, q, -g * sin_t
    Ac[3, 0] = 1.0
    Ac[4, 1], Ac[4, 2], Ac[4, 3] = cos_t, sin_t, -vx * sin_t + vz * cos_t
    Ac[5, 1], Ac[5, 2], Ac[5, 3] = sin_t, -cos_t, vx * cos_t + vz * sin_t

    Bc = np.zeros((6, 3))
    Bc[0, 2] = 1.0 / plant.inertia
    Bc[1, 0] = 1.0 / plant.mass
    Bc[2, 1] = 1.0 / plant.mass
    return Ac, Bc


def finite_difference_jacobians(
    plant: Plant, x, u, step: float = 1e-6
) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians, used to audit the analytic ones."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    Ac = np.zeros((plant.n, plant.n))
    Bc = np.zeros((plant.n, plant.m))
    for j in range(plant.n):
        dx = np.zeros(plant.n)
        dx[j] = step
        Ac[:, j] = (eval_dynamics(plant, x + dx, u) - eval_dynamics(plant, x - dx, u)) / (2 * step)
    for j in range(plant.m):
        du = np.zeros(plant.m)
        du[j] = step
        Bc[:, j] = (eval_dynamics(plant, x, u + du) - eval_dynamics(plant, x, u - du)) / (2 * step)
    return Ac, Bc


def uas_trim(airspeed: float = UAS_AIRSPEED, plant: Optional[Plant] = None) -> Trim:
    """Level-flight trim: x* = (0, V, 0, 0, V t, 0), u* = (0, -m g, 0)."""
    if not airspeed > 0:
        raise ValueError(f"airspeed must be positive, got {airspeed}")
    plant = plant or Plant.from_name("uas")
    return Trim(
        state=np.array([0.0, airspeed, 0.0, 0.0, 0.0, 0.0]),
        input=np.array([0.0, -plant.mass * plant.gravity, 0.0]),
        airspeed=float(airspeed),
    )


def plant_trim(plant: Plant) -> Trim:
    """Operating point used for the plant's nominal model."""
    if plant.kind == "uas":
        return uas_trim(plant=plant)
    return Trim(state=np.zeros(plant.n), input=np.zeros(plant.m))


def to_deviation(trim: Trim, x_seq, u_seq, dt: float, t0: float = 0.0):
    """Subtract the (time-varying) trim from sampled states and inputs."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    u_seq = np.asarray(u_seq, dtype=np.float64)
    times = t0 + dt * np.arange(x_seq.shape[0])
    return x_seq - trim.state_at(times), u_seq - trim.input


def from_deviation(trim: Trim, x_dev, u_dev, dt: float, t0: float = 0.0):
    """Inverse of to_deviation."""
    x_dev = np.asarray(x_dev, dtype=np.float64)
    u_dev = np.asarray(u_dev, dtype=np.float64)
    times = t0 + dt * np.arange(x_dev.shape[0])
    return x_dev + trim.state_at(times), u_dev + trim.input


def nominal_model(plant: Plant, dt: float) -> StateSpace:
    """Zero-order-hold discretization of the trim linearization, with C = I and D = 0."""
    trim = plant_trim(plant)
    Ac, Bc = linearize(plant, trim.state, trim.input)
    Ad, Bd = zoh_discretize(Ac, Bc, dt)
    return StateSpace(Ad, Bd, np.eye(plant.n), np.zeros((plant.n, plant.m)), dt)


def integrate_interval(
    rhs: Rhs, x, u, dt: float, rtol: float = RTOL, atol: float = ATOL
) -> np.ndarray:
    """Advance x over one sample interval with u held constant (RK23 Bogacki-Shampine pair)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)

    def vector_field(_t, state):
        value = np.asarray(rhs(state, u), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise IntegrationError("integrate: non-finite state encountered")
        return value

    solution = solve_ivp(vector_field, (0.0, dt), x, method="RK23", rtol=rtol, atol=atol)
    if not solution.success:
        raise IntegrationError(f"integrate: {solution.message}")
    return solution.y[:, -1]


def integrate_rhs(
    rhs: Rhs, x0, u_seq, dt: float, rtol: float = RTOL, atol: float = ATOL
) -> np.ndarray:
    """Sampled states of x' = rhs(x, u) under zero-order-hold inputs.

    Args:
        rhs: Continuous-time vector field
        x0: Initial state
        u_seq: Inputs u(0)..u(T); u(k) is held on [k dt, (k+1) dt)
        dt: Sample time

    Returns:
        States at the T+1 sample instants
    """
    if not dt > 0:
        raise ValueError(f"integrate: dt must be positive, got {dt}")
    u_seq = np.asarray(u_seq, dtype=np.float64)
    if u_seq.ndim == 1:
        u_seq = u_seq.reshape(-1, 1)
    x = np.asarray(x0, dtype=np.float64).reshape(-1)

    states = np.zeros((u_seq.shape[0], x.shape[0]))
    if u_seq.shape[0] == 0:
        return states
    states[0] = x
    for k in range(u_seq.shape[0] - 1):
        x = integrate_interval(rhs, x, u_seq[k], dt, rtol=rtol, atol=atol)
        states[k + 1] = x
    return states


def integrate(
    plant: Plant, x0, u_seq, dt: float, rtol: float = RTOL, atol: float = ATOL
) -> np.ndarray:
    """Sampled plant states for an aligned input sequence of length T+1."""
    return integrate_rhs(
        lambda x, u: eval_dynamics(plant, x, u), x0, u_seq, dt, rtol=rtol, atol=atol
    )
