"""Lifted discrepancy models: lifting network, perturbation rollouts, losses and recovered G.

A :class:`DiscrepancyModel` pairs a nominal plant P and its left coprime
factorization with a norm-bounded perturbation system whose initial state is
produced by a bias-free lifting network. In ``perturbation`` mode the
perturbation learns the residual of P's factorization; in ``direct`` mode it
learns the state itself and G is recovered without P.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import Dataset
from .lti import (
    CoprimeFactorization,
    InstabilityError,
    StateSpace,
    left_coprime,
    observer_gain,
    residual_rollout,
    simulate,
    spectral_radius,
)
from .normbounded import (
    DEFAULT_EPSILON,
    NormBoundedTheta,
    RealizedMatrices,
    StrippedPerturbation,
    SystemDims,
    realize,
    realize_graph,
    strip_feedthrough,
)
from .numkernel import (
    ACTIVATIONS,
    ShapeMismatchError,
    Tape,
    Var,
    activate,
)
from .plants import Plant, Trim, nominal_model, plant_trim

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

MODES = ("perturbation", "direct")
PSI_PREFIX = "psi."
THETA_PREFIX = "theta."


class EmptyBatchError(ValueError):
    """Raised when a loss is requested on a batch with no trajectories."""

    pass


@dataclass
class LiftingNet:
    """Bias-free feedforward network; activation after every hidden layer, linear output."""

    weights: List[np.ndarray]
    activation: str = "elu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"Unknown activation '{self.activation}' (expected one of {ACTIVATIONS})"
            )
        if not self.weights:
            raise ValueError("LiftingNet needs at least one weight matrix")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        for previous, current in zip(self.weights, self.weights[1:]):
            if current.shape[1] != previous.shape[0]:
                raise ShapeMismatchError(
                    f"LiftingNet: layer of shape {current.shape} cannot follow {previous.shape}"
                )

    @classmethod
    def create(
        cls,
        input_dim: int,
        output_dim: int,
        hidden_widths: Sequence[int] = (64, 64),
        activation: str = "elu",
        rng: Optional[np.random.Generator] = None,
    ) -> "LiftingNet":
        """Weights drawn normal with standard deviation 1/sqrt(fan_in)."""
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [input_dim, *hidden_widths, output_dim]
        weights = [
            rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
            for fan_in, fan_out in zip(widths[:-1], widths[1:])
        ]
        return cls(weights=weights, activation=activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def lift(self, x) -> np.ndarray:
        """Psi(x) for a state vector (n,) or a block of column states (n, K)."""
        h = np.asarray(x, dtype=np.float64)
        vector = h.ndim == 1
        if vector:
            h = h.reshape(-1, 1)
        if h.shape[0] != self.input_dim:
            raise ShapeMismatchError(f"lift: expected {self.input_dim} states, got {h.shape[0]}")

        last = len(self.weights) - 1
        for index, W in enumerate(self.weights):
            h = W @ h
            if index < last:
                h = activate(self.activation, h)
        return h[:, 0] if vector else h

    def graph(self, tape: Tape, weights: Sequence[Var], X: Var) -> Var:
        """Record Psi applied to the columns of X."""
        h = X
        last = len(weights) - 1
        for index, W in enumerate(weights):
            h = W @ h
            if index < last:
                h = tape.activation(h, self.activation)
        return h


@dataclass(frozen=True)
class ChannelScaling:
    """Per-channel multipliers applied to states (and residuals) and inputs before training."""

    state_scale: np.ndarray
    input_scale: np.ndarray

    @classmethod
    def fit(cls, dataset: Dataset) -> "ChannelScaling":
        """Inverse standard deviation of every channel over all samples (1 for flat channels)."""

        def inverse_std(values: np.ndarray) -> np.ndarray:
            std = values.reshape(-1, values.shape[-1]).std(axis=0)
            return np.where(std > 0.0, 1.0 / np.where(std > 0.0, std, 1.0), 1.0)

        return cls(state_scale=inverse_std(dataset.states), input_scale=inverse_std(dataset.inputs))

    def input_block(self) -> np.ndarray:
        """diag(input_scale, state_scale), the map from raw (u, x) to scaled (u, x)."""
        return np.diag(np.concatenate([self.input_scale, self.state_scale]))


@dataclass(frozen=True)
class LossWeights:
    """Weights of the dynamics loss, the gamma penalty and the feedthrough penalty."""

    beta1: float = 0.1
    beta2: float = 1e-5
    beta3: float = 1e-5

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")


@dataclass(frozen=True)
class LossResult:
    """Scalar loss and its components."""

    total: float
    pred: float
    dyn: float
    gamma: float
    d_frob: float


@dataclass
class DiscrepancyModel:
    """Nominal plant, observer gain, perturbation parameters and lifting network."""

    nominal: StateSpace
    gain: np.ndarray
    theta: NormBoundedTheta
    net: LiftingNet
    trim: Trim
    mode: str = "perturbation"
    scaling: Optional[ChannelScaling] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Unknown mode '{self.mode}' (expected one of {MODES})")
        n, m = self.nominal.n_states, self.nominal.n_inputs
        if not np.array_equal(self.nominal.C, np.eye(n)) or np.any(self.nominal.D):
            raise ValueError("nominal model must have C = I and D = 0")
        self.gain = np.asarray(self.gain, dtype=np.float64)
        if self.gain.shape != (n, n):
            raise ShapeMismatchError(f"gain must be {n}x{n}, got {self.gain.shape}")

        expected = SystemDims(n_x=self.net.output_dim, n_u=m + n, n_y=n)
        if self.theta.dims != expected:
            raise ShapeMismatchError(f"theta dims {self.theta.dims} do not match {expected}")
        if self.net.input_dim != n:
            raise ShapeMismatchError(f"lifting input dim {self.net.input_dim} != {n} states")

        rho = spectral_radius(self.nominal.A + self.gain)
        if rho >= 1.0:
            raise InstabilityError(f"rho(A_P + L_P) = {rho:.6f} is not below 1")

    @property
    def n(self) -> int:
        return self.nominal.n_states

    @property
    def m(self) -> int:
        return self.nominal.n_inputs

    @property
    def lifted_dim(self) -> int:
        return self.net.output_dim

    def factorization(self) -> CoprimeFactorization:
        return left_coprime(self.nominal, self.gain)

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable blocks keyed 'psi.<layer>' and 'theta.<block>'."""
        params = {f"{PSI_PREFIX}{i}": W for i, W in enumerate(self.net.weights)}
        for name, value in self.theta.parameters().items():
            params[f"{THETA_PREFIX}{name}"] = value
        return params

    def with_parameters(self, params: Dict[str, np.ndarray]) -> "DiscrepancyModel":
        weights = [np.array(params[f"{PSI_PREFIX}{i}"]) for i in range(len(self.net.weights))]
        theta = self.theta.with_parameters(
            {
                key[len(THETA_PREFIX) :]: value
                for key, value in params.items()
                if key.startswith(THETA_PREFIX)
            }
        )
        return replace(self, theta=theta, net=replace(self.net, weights=weights))

    def realized(self) -> RealizedMatrices:
        """Perturbation system in the (possibly scaled) training coordinates."""
        return realize(self.theta)

    def effective(self) -> StrippedPerturbation:
        """Stripped perturbation acting on raw deviation (u, x) and producing raw units."""
        stripped = strip_feedthrough(self.realized())
        if self.scaling is None:
            return stripped
        input_block = self.scaling.input_block()
        output_block = np.diag(1.0 / self.scaling.state_scale)
        return StrippedPerturbation(
            A=stripped.A,
            B=stripped.B @ input_block,
            C=output_block @ stripped.C,
            D=output_block @ stripped.D @ input_block,
            gamma=stripped.gamma,
        )

    def lift(self, x) -> np.ndarray:
        """Psi on raw deviation states."""
        x = np.asarray(x, dtype=np.float64)
        if self.scaling is not None:
            x = x * (self.scaling.state_scale if x.ndim == 1 else self.scaling.state_scale[:, None])
        return self.net.lift(x)

    def initial_state(self, x0) -> np.ndarray:
        """Initial state of the recovered G for a plant started at x0."""
        x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
        if self.mode == "perturbation":
            return np.concatenate([x0, -self.lift(x0)])
        return -self.lift(x0)


def create_model(
    nominal: StateSpace,
    gain: np.ndarray,
    trim: Trim,
    lifted_dim: int,
    hidden_widths: Sequence[int] = (64, 64),
    activation: str = "elu",
    mode: str = "perturbation",
    epsilon: float = DEFAULT_EPSILON,
    init_std: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    scaling: Optional[ChannelScaling] = None,
) -> DiscrepancyModel:
    """Fresh model with randomly initialized theta (alpha = 0) and lifting weights."""
    rng = rng if rng is not None else np.random.default_rng(0)
    n, m = nominal.n_states, nominal.n_inputs
    dims = SystemDims(n_x=lifted_dim, n_u=m + n, n_y=n)
    theta = NormBoundedTheta.random(dims, rng, std=init_std, epsilon=epsilon)
    net = LiftingNet.create(n, lifted_dim, hidden_widths, activation, rng)
    return DiscrepancyModel(
        nominal=nominal,
        gain=gain,
        theta=theta,
        net=net,
        trim=trim,
        mode=mode,
        scaling=scaling,
    )


def model_for_plant(
    plant: Plant,
    dt: float,
    lifted_dim: int,
    hidden_widths: Sequence[int] = (64, 64),
    activation: str = "elu",
    mode: str = "perturbation",
    epsilon: float = DEFAULT_EPSILON,
    init_std: float = 0.1,
    observer_q_scale: float = 1.0,
    observer_r_scale: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    scaling: Optional[ChannelScaling] = None,
) -> DiscrepancyModel:
    """Nominal model, observer gain and a fresh discrepancy model for a benchmark plant."""
    nominal = nominal_model(plant, dt)
    gain = observer_gain(
        nominal.A,
        nominal.C,
        observer_q_scale * np.eye(plant.n),
        observer_r_scale * np.eye(plant.n),
    )
    log.debug(f"Observer gain for {plant.kind}: rho(A+L) = {spectral_radius(nominal.A + gain):.4f}")
    return create_model(
        nominal,
        gain,
        plant_trim(plant),
        lifted_dim,
        hidden_widths=hidden_widths,
        activation=activation,
        mode=mode,
        epsilon=epsilon,
        init_std=init_std,
        rng=rng,
        scaling=scaling,
    )


def attach_residuals(model: DiscrepancyModel, dataset: Dataset) -> Dataset:
    """Residuals of the nominal factorization for every trajectory, started at -x(0)."""
    cf = model.factorization()
    residuals = np.zeros(dataset.states.shape)
    for index in range(dataset.count):
        states = dataset.states[index]
        residuals[index] = residual_rollout(cf, dataset.inputs[index], states, states[0])
    return dataset.with_residuals(residuals)


def _time_major_columns(seq: np.ndarray) -> np.ndarray:
    """(K, T+1, d) -> (d, (T+1) K) with column k*K + i holding trajectory i at time k."""
    count, steps, width = seq.shape
    return seq.transpose(2, 1, 0).reshape(width, steps * count)


@dataclass
class LossGraph:
    """Tape nodes of a recorded loss."""

    tape: Tape
    leaves: Dict[str, Var]
    total: Var
    pred: Var
    dyn: Var
    gamma: Var
    d_frob: Var

    def result(self) -> LossResult:
        return LossResult(
            total=float(self.total.value[0, 0]),
            pred=float(self.pred.value[0, 0]),
            dyn=float(self.dyn.value[0, 0]),
            gamma=float(self.gamma.value[0, 0]),
            d_frob=float(self.d_frob.value[0, 0]),
        )


def record_loss(
    model: DiscrepancyModel,
    batch: Dataset,
    weights: LossWeights,
    trainable: bool = True,
    lift_grad_from_pred: bool = True,
) -> LossGraph:
    """Record the rollout of a batch and its weighted loss on a fresh tape.

    Trajectories are stacked as columns, so each rollout step advances the
    whole batch. With lift_grad_from_pred off, Psi(x0) enters the rollout as a
    constant and the lifting weights learn from the dynamics loss only.
    """
    if batch.count == 0:
        raise EmptyBatchError("loss: batch contains no trajectories")
    if batch.horizon < 1:
        raise ValueError("loss: horizon must be at least 1")
    if model.mode == "perturbation" and batch.residuals is None:
        raise ValueError("loss: residuals must be attached before training in perturbation mode")

    states, inputs, residuals = batch.states, batch.inputs, batch.residuals
    if model.scaling is not None:
        states = states * model.scaling.state_scale
        inputs = inputs * model.scaling.input_scale
        if residuals is not None:
            residuals = residuals * model.scaling.state_scale

    tape = Tape()
    leaves = {
        name: tape.leaf(value, trainable=trainable, name=name)
        for name, value in model.parameters().items()
    }
    theta_nodes = {
        name[len(THETA_PREFIX) :]: var
        for name, var in leaves.items()
        if name.startswith(THETA_PREFIX)
    }
    psi_nodes = [leaves[f"{PSI_PREFIX}{i}"] for i in range(len(model.net.weights))]
    rs = realize_graph(tape, theta_nodes, model.theta.epsilon, model.theta.dims)

    count, horizon = batch.count, batch.horizon
    X = tape.constant(_time_major_columns(states))
    lifted = model.net.graph(tape, psi_nodes, X)
    if lift_grad_from_pred:
        z = lifted[:, (0, count)]
    else:
        frozen = [tape.constant(W) for W in model.net.weights]
        z = model.net.graph(tape, frozen, X[:, (0, count)])

    rollout = [z]
    for k in range(horizon):
        drive = tape.constant(np.vstack([inputs[:, k, :].T, states[:, k, :].T]))
        z = rs.A @ z + rs.B @ drive
        rollout.append(z)
    Z = tape.concat_cols(rollout)
    out = rs.C @ Z

    if model.mode == "perturbation":
        error = out - tape.constant(_time_major_columns(residuals))
    else:
        error = -out - X
    pred = tape.mse(error)
    columns = Z.shape[1]
    dyn = tape.mse(Z[:, (count, columns)] - lifted[:, (count, columns)])
    d_frob = tape.frobenius(rs.D)

    total = pred + weights.beta1 * dyn + weights.beta2 * rs.gamma + weights.beta3 * d_frob
    return LossGraph(tape, leaves, total, pred, dyn, rs.gamma, d_frob)


def loss(
    model: DiscrepancyModel,
    batch: Dataset,
    weights: LossWeights,
    lift_grad_from_pred: bool = True,
) -> LossResult:
    """Weighted loss and its components, without gradients."""
    graph = record_loss(
        model, batch, weights, trainable=False, lift_grad_from_pred=lift_grad_from_pred
    )
    return graph.result()


def loss_and_gradients(
    model: DiscrepancyModel,
    batch: Dataset,
    weights: LossWeights,
    lift_grad_from_pred: bool = True,
) -> Tuple[LossResult, Dict[str, np.ndarray]]:
    """Loss and its gradients keyed like model.parameters()."""
    graph = record_loss(
        model, batch, weights, trainable=True, lift_grad_from_pred=lift_grad_from_pred
    )
    grads = graph.tape.backward(graph.total)
    return graph.result(), {name: grads[var] for name, var in graph.leaves.items()}


def _rollout(model: DiscrepancyModel, u_seq, x_seq, x0) -> Tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u_seq, dtype=np.float64).reshape(-1, model.m)
    x = np.asarray(x_seq, dtype=np.float64).reshape(-1, model.n)
    if u.shape[0] != x.shape[0]:
        raise ShapeMismatchError(
            f"rollout: input and state sequences differ in length ({u.shape[0]} vs {x.shape[0]})"
        )
    eff = model.effective()
    feedthrough = np.zeros((model.n, model.m + model.n))
    system = StateSpace(eff.A, eff.B, eff.C, feedthrough, model.nominal.dt)
    z0 = model.lift(np.asarray(x0, dtype=np.float64).reshape(-1))
    return simulate(system, z0, np.hstack([u, x]))


def perturbation_rollout(
    model: DiscrepancyModel, u_seq, x_seq, x0
) -> Tuple[np.ndarray, np.ndarray]:
    """Lifted perturbation states and predicted residuals over aligned (u, x) data."""
    if model.mode != "perturbation":
        raise ValueError(f"perturbation_rollout requires perturbation mode, model is {model.mode}")
    return _rollout(model, u_seq, x_seq, x0)


def direct_rollout(model: DiscrepancyModel, u_seq, x_seq, x0) -> Tuple[np.ndarray, np.ndarray]:
    """Lifted states and state predictions x_hat = -C z of a direct-mode model."""
    if model.mode != "direct":
        raise ValueError(f"direct_rollout requires direct mode, model is {model.mode}")
    z, out = _rollout(model, u_seq, x_seq, x0)
    return z, -out


def _split_input_matrix(model: DiscrepancyModel, B: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return B[:, : model.m], B[:, model.m :]


def assemble_G(model: DiscrepancyModel) -> StateSpace:
    """Improved lifted model G of dimension n + N; start it from model.initial_state(x0)."""
    if model.mode != "perturbation":
        raise ValueError("assemble_G requires perturbation mode; use recover_G_direct")
    eff = model.effective()
    A_P, B_P, L_P = model.nominal.A, model.nominal.B, model.gain
    B1, B2 = _split_input_matrix(model, eff.B)
    n = model.n

    A_G = np.block([[A_P, L_P @ eff.C], [-B2, eff.A + B2 @ eff.C]])
    B_G = np.vstack([B_P, -B1])
    C_G = np.hstack([np.eye(n), -eff.C])
    return StateSpace(A_G, B_G, C_G, np.zeros((n, model.m)), model.nominal.dt)


def perturbed_factorization(model: DiscrepancyModel) -> StateSpace:
    """Factorization of G: nominal factors minus the perturbation, inputs (u, x).

    Its output is r - r_hat; started from [-x0; Psi(x0)] it vanishes on G's own
    trajectories.
    """
    if model.mode != "perturbation":
        raise ValueError("perturbed_factorization requires perturbation mode")
    eff = model.effective()
    A_P, B_P, L_P = model.nominal.A, model.nominal.B, model.gain
    B1, B2 = _split_input_matrix(model, eff.B)
    n, N, m = model.n, model.lifted_dim, model.m

    A = np.block([[A_P + L_P, np.zeros((n, N))], [np.zeros((N, n)), eff.A]])
    B = np.block([[-B_P, L_P], [B1, B2]])
    C = np.hstack([np.eye(n), -eff.C])
    D = np.hstack([np.zeros((n, m)), np.eye(n)])
    return StateSpace(A, B, C, D, model.nominal.dt)


def recover_G_direct(model: DiscrepancyModel) -> StateSpace:
    """Lifted model of dimension N recovered from a direct-mode model; start it at -Psi(x0)."""
    if model.mode != "direct":
        raise ValueError("recover_G_direct requires direct mode; use assemble_G")
    eff = model.effective()
    B1, B2 = _split_input_matrix(model, eff.B)
    return StateSpace(
        eff.A - B2 @ eff.C, -B1, eff.C, np.zeros((model.n, model.m)), model.nominal.dt
    )


def learned_system(model: DiscrepancyModel) -> StateSpace:
    """G for either mode."""
    return assemble_G(model) if model.mode == "perturbation" else recover_G_direct(model)
