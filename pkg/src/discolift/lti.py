"""Discrete-time LTI algebra: simulation, ZOH, LQR/observer gains, coprime factors, norms."""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg

from .numkernel import (
    NumericalError,
    ShapeMismatchError,
    as_matrix,
    expm,
    linear_solve,
)

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 10_000
RICCATI_RESIDUAL_TOL = 1e-8
RICCATI_DOUBLINGS = 64
HINF_GRID_POINTS = 2048
HINF_FREQ_TOL = 1e-8

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class ConvergenceError(NumericalError):
    """Raised when an iterative solver hits its iteration cap."""

    pass


class InstabilityError(NumericalError):
    """Raised when a system required to be Schur stable is not."""

    pass


class WeightError(NumericalError, ValueError):
    """Raised when LQR weights are not symmetric (semi)definite."""

    pass


@dataclass(frozen=True)
class StateSpace:
    """State-space quadruple x(k+1) = A x + B u, y = C x + D u.

    ``dt == 0`` marks a continuous-time pair that has not been discretized.
    Zero-state (static) systems use an empty 0x0 A.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float = 0.0

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64, ndmin=2)
        B = np.array(self.B, dtype=np.float64, ndmin=2)
        C = np.array(self.C, dtype=np.float64, ndmin=2)
        D = np.array(self.D, dtype=np.float64, ndmin=2)
        for name, mat in (("A", A), ("B", B), ("C", C), ("D", D)):
            if mat.ndim != 2:
                raise ShapeMismatchError(f"StateSpace.{name} must be 2-D, got {mat.ndim}-D")
            if not np.all(np.isfinite(mat)):
                raise NumericalError(f"StateSpace.{name} contains non-finite entries")

        n_x = A.shape[0]
        if A.shape != (n_x, n_x):
            raise ShapeMismatchError(f"StateSpace: A must be square, got {A.shape}")
        if B.shape[0] != n_x:
            raise ShapeMismatchError(f"StateSpace: B has {B.shape[0]} rows, expected {n_x}")
        if C.shape[1] != n_x:
            raise ShapeMismatchError(f"StateSpace: C has {C.shape[1]} columns, expected {n_x}")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ShapeMismatchError(
                f"StateSpace: D has shape {D.shape}, expected {(C.shape[0], B.shape[1])}"
            )
        if self.dt < 0 or not np.isfinite(self.dt):
            raise ValueError(f"StateSpace: dt must be a finite non-negative number, got {self.dt}")

        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    @property
    def is_discrete(self) -> bool:
        return self.dt > 0


@dataclass(frozen=True)
class CoprimeFactorization:
    """Stacked left coprime factors [-N~ M~] realized with inputs (u, y)."""

    realization: StateSpace
    gain: np.ndarray


def _as_sequence(seq, width: int, name: str) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim == 1 and width == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeMismatchError(f"{name}: expected shape (T+1, {width}), got {arr.shape}")
    return arr


def simulate(ss: StateSpace, x0, u_seq) -> Tuple[np.ndarray, np.ndarray]:
    """Simulate a discrete system over an aligned input sequence.

    Args:
        ss: Discrete-time system
        x0: Initial state, length n_x
        u_seq: Inputs u(0)..u(T), shape (T+1, n_u)

    Returns:
        (states, outputs) with shapes (T+1, n_x) and (T+1, n_y)
    """
    if not ss.is_discrete:
        raise ValueError("simulate: system must be discrete (dt > 0)")

    u = _as_sequence(u_seq, ss.n_inputs, "simulate inputs")
    x = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x.shape[0] != ss.n_states:
        raise ShapeMismatchError(f"simulate: x0 has length {x.shape[0]}, expected {ss.n_states}")

    steps = u.shape[0]
    states = np.zeros((steps, ss.n_states))
    if steps == 0:
        return states, np.zeros((0, ss.n_outputs))

    states[0] = x
    for k in range(steps - 1):
        states[k + 1] = ss.A @ states[k] + ss.B @ u[k]
    outputs = states @ ss.C.T + u @ ss.D.T
    return states, outputs


def zoh_discretize(Ac, Bc, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization via the exponential of [[Ac, Bc], [0, 0]] dt."""
    if not dt > 0:
        raise ValueError(f"zoh_discretize: dt must be positive, got {dt}")

    Ac = as_matrix(Ac, "Ac")
    Bc = as_matrix(Bc, "Bc")
    n, m = Ac.shape[0], Bc.shape[1]
    if Ac.shape != (n, n) or Bc.shape[0] != n:
        raise ShapeMismatchError(f"zoh_discretize: Ac {Ac.shape} incompatible with Bc {Bc.shape}")

    block = np.zeros((n + m, n + m))
    block[:n, :n] = Ac
    block[:n, n:] = Bc
    phi = expm(block * dt)
    return phi[:n, :n], phi[:n, n:]


def _check_weights(Q: np.ndarray, R: np.ndarray, n: int, m: int) -> None:
    if Q.shape != (n, n):
        raise ShapeMismatchError(f"dlqr: Q must be {n}x{n}, got {Q.shape}")
    if R.shape != (m, m):
        raise ShapeMismatchError(f"dlqr: R must be {m}x{m}, got {R.shape}")
    if not np.allclose(Q, Q.T, atol=1e-12) or np.min(np.linalg.eigvalsh(Q)) < -1e-12:
        raise WeightError("dlqr: Q must be symmetric positive semidefinite")
    if not np.allclose(R, R.T, atol=1e-12):
        raise WeightError("dlqr: R must be symmetric")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as e:
        raise WeightError("dlqr: R must be positive definite") from e


def riccati_residual(A, B, Q, R, P) -> float:
    """Frobenius norm of Q + A'PA - A'PB (R + B'PB)^-1 B'PA - P."""
    BtP = B.T @ P
    gain = linear_solve(R + BtP @ B, BtP @ A)
    return float(np.linalg.norm(Q + A.T @ P @ A - A.T @ P @ B @ gain - P))


def _doubling_start(A, B, Q, R, tol: float) -> np.ndarray:
    """Doubling iterates of the Riccati solution; quadratic convergence from P = Q."""
    n = A.shape[0]
    A_k = A.copy()
    G_k = B @ linear_solve(R, B.T)
    H_k = Q.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(RICCATI_DOUBLINGS):
            W = np.eye(n) + G_k @ H_k
            try:
                WinvA = linear_solve(W, A_k)
                WinvG = linear_solve(W, G_k)
            except NumericalError:
                return H_k
            H_next = H_k + A_k.T @ H_k @ WinvA
            G_k = G_k + A_k @ WinvG @ A_k.T
            A_k = A_k @ WinvA
            H_next = 0.5 * (H_next + H_next.T)
            G_k = 0.5 * (G_k + G_k.T)
            if not np.all(np.isfinite(H_next)):
                raise ConvergenceError("dlqr: Riccati iteration diverged (is (A, B) stabilizable?)")
            change = np.linalg.norm(H_next - H_k)
            H_k = H_next
            if change < tol:
                break
        else:
            log.warning(f"Riccati doubling stopped at {RICCATI_DOUBLINGS} steps above tol {tol:g}")
    return H_k


def solve_dare(
    A, B, Q, R, tol: float = RICCATI_TOL, max_iter: int = RICCATI_MAX_ITER
) -> np.ndarray:
    """Stabilizing solution of the discrete algebraic Riccati equation.

    A doubling pass gives the starting point; the fixed-point iteration
    P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA then runs until the Frobenius
    change drops below tol. The result must satisfy the equation to
    RICCATI_RESIDUAL_TOL or ConvergenceError is raised.
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    Q = as_matrix(Q, "Q")
    R = as_matrix(R, "R")
    n, m = B.shape
    if A.shape != (n, n):
        raise ShapeMismatchError(f"dlqr: A {A.shape} incompatible with B {B.shape}")
    _check_weights(Q, R, n, m)

    P = _doubling_start(A, B, Q, R, tol)
    for iteration in range(1, max_iter + 1):
        BtP = B.T @ P
        gain = linear_solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise ConvergenceError("dlqr: Riccati iteration diverged (is (A, B) stabilizable?)")

        change = np.linalg.norm(P_next - P)
        P = P_next
        if change < tol:
            log.debug(f"Riccati iteration converged after {iteration} iterations")
            break
    else:
        raise ConvergenceError(f"dlqr: Riccati iteration did not converge in {max_iter} iterations")

    residual = riccati_residual(A, B, Q, R, P)
    if not residual < RICCATI_RESIDUAL_TOL:
        raise ConvergenceError(
            f"dlqr: Riccati residual {residual:.3e} is not below {RICCATI_RESIDUAL_TOL:.0e}"
        )
    return P


def dlqr(A, B, Q, R, tol: float = RICCATI_TOL, max_iter: int = RICCATI_MAX_ITER) -> np.ndarray:
    """Discrete LQR gain K for u = -K x."""
    P = solve_dare(A, B, Q, R, tol=tol, max_iter=max_iter)
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    R = as_matrix(R, "R")
    BtP = B.T @ P
    return linear_solve(R + BtP @ B, BtP @ A)


def spectral_radius(A) -> float:
    """Largest eigenvalue magnitude of a square matrix (0 for an empty matrix)."""
    A = as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ShapeMismatchError(f"spectral_radius: A must be square, got {A.shape}")
    if A.size == 0:
        return 0.0
    try:
        eigenvalues = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"spectral_radius: eigenvalue iteration failed: {e}") from e
    return float(np.max(np.abs(eigenvalues)))


def observer_gain(A, C, Q=None, R=None) -> np.ndarray:
    """Observer gain L with A + L C Schur stable, from the dual LQR problem."""
    A = as_matrix(A, "A")
    C = as_matrix(C, "C")
    n, p = A.shape[0], C.shape[0]
    Q = np.eye(n) if Q is None else as_matrix(Q, "Q")
    R = np.eye(p) if R is None else as_matrix(R, "R")

    L = -dlqr(A.T, C.T, Q, R).T
    rho = spectral_radius(A + L @ C)
    if rho >= 1.0:
        raise InstabilityError(f"observer_gain: rho(A + LC) = {rho:.6f} is not below 1")
    return L


def left_coprime(ss: StateSpace, L) -> CoprimeFactorization:
    """Left coprime factorization with state matrix A + LC, inputs (u, y) and feedthrough [0 I]."""
    L = as_matrix(L, "L")
    if L.shape != (ss.n_states, ss.n_outputs):
        raise ShapeMismatchError(
            f"left_coprime: L must be {ss.n_states}x{ss.n_outputs}, got {L.shape}"
        )
    if np.any(ss.D != 0.0):
        raise ValueError("left_coprime: plant must be strictly proper (D = 0)")

    A_f = ss.A + L @ ss.C
    rho = spectral_radius(A_f)
    if rho >= 1.0:
        raise InstabilityError(f"left_coprime: rho(A + LC) = {rho:.6f} is not below 1")

    realization = StateSpace(
        A=A_f,
        B=np.hstack([-ss.B, L]),
        C=ss.C,
        D=np.hstack([np.zeros((ss.n_outputs, ss.n_inputs)), np.eye(ss.n_outputs)]),
        dt=ss.dt,
    )
    return CoprimeFactorization(realization=realization, gain=L)


def residual_rollout(cf: CoprimeFactorization, u_seq, x_seq, x0) -> np.ndarray:
    """Residual r(k) of measured (u, x) data through the factorization started at -x0."""
    n_x = cf.realization.n_states
    n_u = cf.realization.n_inputs - cf.realization.n_outputs
    u = _as_sequence(u_seq, n_u, "residual_rollout inputs")
    x = _as_sequence(x_seq, cf.realization.n_outputs, "residual_rollout states")
    if u.shape[0] != x.shape[0]:
        raise ShapeMismatchError(
            f"residual_rollout: input and state sequences differ in length "
            f"({u.shape[0]} vs {x.shape[0]})"
        )
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != n_x:
        raise ShapeMismatchError(f"residual_rollout: x0 has length {x0.shape[0]}, expected {n_x}")

    _, residuals = simulate(cf.realization, -x0, np.hstack([u, x]))
    return residuals


def frequency_gains(ss: StateSpace, omegas: np.ndarray) -> np.ndarray:
    """sigma_max of C (e^{jw} I - A)^-1 B + D at each frequency.

    The complex solve is carried out as a real 2n-dimensional system
    [[cI - A, -sI], [sI, cI - A]] [Xr; Xi] = [B; 0] with c = cos w, s = sin w.
    """
    omegas = np.atleast_1d(np.asarray(omegas, dtype=np.float64))
    n, m, p = ss.n_states, ss.n_inputs, ss.n_outputs

    if n == 0:
        H_real = np.broadcast_to(ss.D, (omegas.size, p, m))
        H_imag = np.zeros_like(H_real)
    else:
        c = np.cos(omegas)[:, None, None]
        s = np.sin(omegas)[:, None, None]
        ident = np.eye(n)[None, :, :]
        diag_block = c * ident - ss.A[None, :, :]
        system = np.concatenate(
            [
                np.concatenate([diag_block, -s * ident], axis=2),
                np.concatenate([s * ident, diag_block], axis=2),
            ],
            axis=1,
        )
        rhs = np.broadcast_to(np.vstack([ss.B, np.zeros((n, m))]), (omegas.size, 2 * n, m))
        solution = np.linalg.solve(system, rhs)
        H_real = ss.C @ solution[:, :n, :] + ss.D
        H_imag = ss.C @ solution[:, n:, :]

    augmented = np.concatenate(
        [
            np.concatenate([H_real, -H_imag], axis=2),
            np.concatenate([H_imag, H_real], axis=2),
        ],
        axis=1,
    )
    return np.linalg.norm(augmented, ord=2, axis=(1, 2))


def hinf_norm(
    ss: StateSpace,
    freq_tol: float = HINF_FREQ_TOL,
    grid_points: int = HINF_GRID_POINTS,
) -> float:
    """H-infinity norm of a stable discrete system.

    The gain is sampled on a uniform grid over [0, pi]; the bracket around the
    grid peak is then refined by golden-section search until it is narrower
    than freq_tol.
    """
    if grid_points < 3:
        raise ValueError("hinf_norm: grid_points must be at least 3")

    rho = spectral_radius(ss.A)
    if rho >= 1.0:
        raise InstabilityError(f"hinf_norm: system is not stable (rho(A) = {rho:.6f})")

    if ss.n_inputs == 0 or ss.n_outputs == 0:
        return 0.0
    if ss.n_states == 0:
        return float(np.linalg.norm(ss.D, 2))

    grid = np.linspace(0.0, np.pi, grid_points)
    gains = frequency_gains(ss, grid)
    peak = int(np.argmax(gains))
    best = float(gains[peak])

    def gain(omega: float) -> float:
        return float(frequency_gains(ss, np.array([omega]))[0])

    lo = grid[max(peak - 1, 0)]
    hi = grid[min(peak + 1, grid_points - 1)]
    left = hi - _GOLDEN * (hi - lo)
    right = lo + _GOLDEN * (hi - lo)
    g_left, g_right = gain(left), gain(right)
    while hi - lo > freq_tol:
        if g_left >= g_right:
            hi, right, g_right = right, left, g_left
            left = hi - _GOLDEN * (hi - lo)
            g_left = gain(left)
        else:
            lo, left, g_left = left, right, g_right
            right = lo + _GOLDEN * (hi - lo)
            g_right = gain(right)
    return max(best, g_left, g_right)


def matrix_norms(D) -> Tuple[float, float]:
    """(operator 2-norm, Frobenius norm) of D; the 2-norm is the largest singular value."""
    D = as_matrix(D, "D")
    frobenius = float(np.sqrt(np.sum(D * D)))
    if D.size == 0 or frobenius == 0.0:
        return 0.0, frobenius
    operator = float(linalg.svdvals(D, check_finite=False)[0])
    return min(operator, frobenius), frobenius
