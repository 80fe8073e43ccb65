"""Direct parametrization of stable LTI systems with a certified H-infinity bound.

Any parameter values map to a system (A, B, C, D) with rho(A) < 1 and
||G||_inf <= gamma = exp(alpha). The construction runs on a :class:`Tape` so
gradients reach every parameter block.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict

import numpy as np

from .lti import StateSpace, hinf_norm, matrix_norms, spectral_radius
from .numkernel import NumericalError, ShapeMismatchError, Tape, Var, as_matrix

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

DEFAULT_EPSILON = 1e-3
LOG_SCALE_CLAMP = (-30.0, 30.0)
PARAMETER_NAMES = ("d", "V", "X", "Y", "Z", "alpha")


class CertificationError(NumericalError):
    """Raised when a realized system violates its stability or norm certificate."""

    pass


@dataclass(frozen=True)
class SystemDims:
    """State, input and output dimensions of a parametrized system."""

    n_x: int
    n_u: int
    n_y: int

    def __post_init__(self):
        if self.n_x < 1 or self.n_u < 1 or self.n_y < 1:
            raise ValueError(f"dimensions must be positive, got {self}")

    @property
    def n_bar(self) -> int:
        return self.n_x + min(self.n_y, self.n_u)

    @property
    def n_tilde(self) -> int:
        return abs(self.n_y - self.n_u)

    def shapes(self) -> Dict[str, tuple]:
        return {
            "d": (self.n_x, 1),
            "V": (self.n_x, self.n_x),
            "X": (self.n_bar, self.n_bar),
            "Y": (self.n_bar, self.n_bar),
            "Z": (self.n_tilde, self.n_bar),
            "alpha": (1, 1),
        }


@dataclass(frozen=True)
class NormBoundedTheta:
    """Free parameters of a norm-bounded system. gamma = exp(alpha)."""

    d: np.ndarray
    V: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    alpha: float
    dims: SystemDims
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        for name, shape in self.dims.shapes().items():
            if name == "alpha":
                continue
            value = np.array(getattr(self, name), dtype=np.float64).reshape(shape)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def random(
        cls,
        dims: SystemDims,
        rng: np.random.Generator,
        std: float = 0.1,
        epsilon: float = DEFAULT_EPSILON,
        alpha: float = 0.0,
    ) -> "NormBoundedTheta":
        """Draw d, V, X, Y, Z i.i.d. normal with the given standard deviation."""
        shapes = dims.shapes()
        blocks = {
            name: std * rng.standard_normal(shapes[name]) for name in ("d", "V", "X", "Y", "Z")
        }
        return cls(alpha=alpha, dims=dims, epsilon=epsilon, **blocks)

    @classmethod
    def zeros(cls, dims: SystemDims, epsilon: float = DEFAULT_EPSILON) -> "NormBoundedTheta":
        shapes = dims.shapes()
        blocks = {name: np.zeros(shapes[name]) for name in ("d", "V", "X", "Y", "Z")}
        return cls(alpha=0.0, dims=dims, epsilon=epsilon, **blocks)

    @property
    def gamma(self) -> float:
        return float(np.exp(self.alpha))

    def parameters(self) -> Dict[str, np.ndarray]:
        """Parameter blocks keyed by name, alpha as a 1x1 matrix."""
        params = {name: getattr(self, name) for name in ("d", "V", "X", "Y", "Z")}
        params["alpha"] = np.array([[self.alpha]])
        return params

    def with_parameters(self, params: Dict[str, np.ndarray]) -> "NormBoundedTheta":
        updates = {name: params[name] for name in ("d", "V", "X", "Y", "Z") if name in params}
        if "alpha" in params:
            updates["alpha"] = float(np.asarray(params["alpha"]).reshape(-1)[0])
        return replace(self, **updates)


@dataclass
class RealizedSystem:
    """Realized (A, B, C, D) and gamma. Values are tape nodes when built on a tape."""

    A: Var
    B: Var
    C: Var
    D: Var
    gamma: Var

    def numeric(self) -> "RealizedMatrices":
        return RealizedMatrices(
            A=np.array(self.A.value),
            B=np.array(self.B.value),
            C=np.array(self.C.value),
            D=np.array(self.D.value),
            gamma=float(self.gamma.value[0, 0]),
        )


@dataclass(frozen=True)
class RealizedMatrices:
    """Plain-matrix snapshot of a realized system."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    gamma: float

    def state_space(self, dt: float = 1.0) -> StateSpace:
        return StateSpace(self.A, self.B, self.C, self.D, dt)


@dataclass(frozen=True)
class StrippedPerturbation:
    """Feedthrough-free (A, B, C) used in dynamics, plus the retained D for auditing."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    gamma: float

    def state_space(self, dt: float = 1.0) -> StateSpace:
        return StateSpace(self.A, self.B, self.C, np.zeros(self.D.shape), dt)

    def audit_bound(self) -> float:
        """gamma + ||D||_2, which bounds the H-infinity norm of the stripped system."""
        return self.gamma + matrix_norms(self.D)[0]


def cayley_graph(tape: Tape, V: Var) -> Var:
    """Q = (I - S)(I + S)^-1 with S = V - V'."""
    n = V.shape[0]
    if V.shape != (n, n):
        raise ShapeMismatchError(f"cayley: V must be square, got {V.shape}")
    ident = tape.constant(np.eye(n))
    skew = V - V.T
    # (I - S) and (I + S) commute, so Q = (I + S)^-1 (I - S)
    return tape.solve(ident + skew, ident - skew)


def cayley(V) -> np.ndarray:
    """Orthogonal Cayley transform of the skew part of V."""
    tape = Tape()
    return np.array(cayley_graph(tape, tape.constant(as_matrix(V, "V"))).value)


def contraction_graph(tape: Tape, X: Var, Y: Var, Z: Var, epsilon: float, dims: SystemDims) -> Var:
    """Strict contraction M built from N = X'X + Z'Z + Y - Y' + eps I."""
    n_bar = dims.n_bar
    ident = tape.constant(np.eye(n_bar))
    N = X.T @ X + Z.T @ Z + Y - Y.T + tape.constant(epsilon * np.eye(n_bar))
    # M_bar' = (I + N)'^-1 [(I - N)', -2 Z']
    rhs = tape.concat_cols([(ident - N).T, -2.0 * Z.T])
    M_bar_t = tape.solve((ident + N).T, rhs)
    if dims.n_y >= dims.n_u:
        return M_bar_t.T
    return M_bar_t


def contraction_M(X, Y, Z, epsilon: float, dims: SystemDims) -> np.ndarray:
    """Plain-matrix contraction M for the given blocks."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    shapes = dims.shapes()
    tape = Tape()
    nodes = [
        tape.constant(np.asarray(value, dtype=np.float64).reshape(shapes[name]))
        for name, value in (("X", X), ("Y", Y), ("Z", Z))
    ]
    return np.array(contraction_graph(tape, *nodes, epsilon=epsilon, dims=dims).value)


def realize_graph(
    tape: Tape, nodes: Dict[str, Var], epsilon: float, dims: SystemDims
) -> RealizedSystem:
    """Record the realization of (A, B, C, D) from parameter nodes keyed by name."""
    n_x, n_u = dims.n_x, dims.n_u

    Q = cayley_graph(tape, nodes["V"])
    lam = tape.diag(tape.exp(nodes["d"], clamp=LOG_SCALE_CLAMP))
    lam_inv = tape.diag(tape.exp(-nodes["d"], clamp=LOG_SCALE_CLAMP))
    gamma = tape.exp(nodes["alpha"])
    gamma_eye = tape.diag(tape.constant(np.ones((n_u, 1))) @ gamma)

    M = contraction_graph(tape, nodes["X"], nodes["Y"], nodes["Z"], epsilon, dims)
    rows, cols = M.shape
    M11 = M[(0, n_x), (0, n_x)]
    M12 = M[(0, n_x), (n_x, cols)]
    M21 = M[(n_x, rows), (0, n_x)]
    M22 = M[(n_x, rows), (n_x, cols)]

    left = Q @ lam_inv
    right = lam @ Q.T
    return RealizedSystem(
        A=left @ M11 @ right,
        B=left @ M12 @ gamma_eye,
        C=M21 @ right,
        D=M22 @ gamma_eye,
        gamma=gamma,
    )


def realize(theta: NormBoundedTheta) -> RealizedMatrices:
    """Realize theta off-tape as plain matrices."""
    tape = Tape()
    nodes = {name: tape.constant(value, name=name) for name, value in theta.parameters().items()}
    return realize_graph(tape, nodes, theta.epsilon, theta.dims).numeric()


def strip_feedthrough(rs: RealizedMatrices) -> StrippedPerturbation:
    return StrippedPerturbation(A=rs.A, B=rs.B, C=rs.C, D=rs.D, gamma=rs.gamma)


@dataclass(frozen=True)
class CertificationResult:
    """Outcome of a certification sweep over random parameter draws."""

    draws: int
    dims: SystemDims
    max_ratio: float
    max_spectral_radius: float
    max_stripped_excess: float
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


def certify(
    draws: int,
    dims: SystemDims,
    seed: int = 0,
    std: float = 1.0,
    epsilon: float = DEFAULT_EPSILON,
    rel_tol: float = 1e-6,
) -> CertificationResult:
    """Draw random parameters and check stability, the H-infinity bound and the stripped bound.

    Args:
        draws: Number of random parameter sets
        dims: System dimensions
        seed: Seed for the draw stream
        std: Standard deviation of the free blocks; alpha is drawn uniformly in [-1, 1]
        epsilon: Contraction margin
        rel_tol: Relative slack allowed on the H-infinity bound

    Returns:
        CertificationResult; failures counts draws that broke any check
    """
    if draws < 1:
        raise ValueError("certify: draws must be positive")

    rng = np.random.default_rng(seed)
    max_ratio = 0.0
    max_rho = 0.0
    max_excess = -np.inf
    failures = 0

    for index in range(draws):
        theta = NormBoundedTheta.random(
            dims, rng, std=std, epsilon=epsilon, alpha=float(rng.uniform(-1.0, 1.0))
        )
        rs = realize(theta)
        rho = spectral_radius(rs.A)
        max_rho = max(max_rho, rho)
        if rho >= 1.0:
            log.warning(f"Draw {index}: rho(A) = {rho:.6f}")
            failures += 1
            continue

        ratio = hinf_norm(rs.state_space()) / rs.gamma
        stripped = strip_feedthrough(rs)
        excess = hinf_norm(stripped.state_space()) - stripped.audit_bound()
        max_ratio = max(max_ratio, ratio)
        max_excess = max(max_excess, excess)
        if ratio > 1.0 + rel_tol or excess > rel_tol:
            log.warning(f"Draw {index}: hinf/gamma = {ratio:.9f}, stripped excess = {excess:.3e}")
            failures += 1

    log.info(f"Certified {draws} draws of dims {dims}: max hinf/gamma = {max_ratio:.9f}")
    return CertificationResult(
        draws=draws,
        dims=dims,
        max_ratio=max_ratio,
        max_spectral_radius=max_rho,
        max_stripped_excess=float(max_excess),
        failures=failures,
    )


def require_certified(result: CertificationResult) -> CertificationResult:
    """Raise CertificationError unless every draw passed."""
    if not result.passed:
        raise CertificationError(
            f"{result.failures} of {result.draws} draws violated the certificate "
            f"(max hinf/gamma = {result.max_ratio:.9f}, max rho = {result.max_spectral_radius:.6f})"
        )
    return result


def theta_from_parameters(
    params: Dict[str, np.ndarray], dims: SystemDims, epsilon: float = DEFAULT_EPSILON
) -> NormBoundedTheta:
    """Build theta from a name-keyed parameter dict (alpha may be a 1x1 matrix)."""
    missing = [name for name in PARAMETER_NAMES if name not in params]
    if missing:
        raise KeyError(f"missing parameter blocks: {missing}")
    alpha = float(np.asarray(params["alpha"]).reshape(-1)[0])
    blocks = {name: params[name] for name in ("d", "V", "X", "Y", "Z")}
    return NormBoundedTheta(alpha=alpha, dims=dims, epsilon=epsilon, **blocks)
