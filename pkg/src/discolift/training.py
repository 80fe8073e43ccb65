"""Adam training of discrepancy models, held-out evaluation and the metric history."""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .datagen import Dataset
from .discrepancy import (
    MODES,
    DiscrepancyModel,
    LossResult,
    LossWeights,
    attach_residuals,
    loss,
    loss_and_gradients,
)
from .lti import hinf_norm, matrix_norms, spectral_radius
from .normbounded import strip_feedthrough
from .numkernel import NumericalError

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

HISTORY_COLUMNS = ("epoch", "train_pred", "train_dyn", "val_pred", "val_dyn", "gamma", "d_frob")


class NonFiniteLossError(NumericalError):
    """Raised when a batch produces a NaN/Inf loss or gradient."""

    def __init__(self, epoch: int, batch: int, parameter_norms: Dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.parameter_norms = parameter_norms
        norms = ", ".join(f"{name}={value:.3e}" for name, value in parameter_norms.items())
        super().__init__(
            f"Non-finite loss at epoch {epoch}, batch {batch} (parameter norms: {norms})"
        )


@dataclass
class TrainConfig:
    """Optimization settings. horizon and window default to the dataset's full horizon."""

    epochs: int = 5000
    batch_size: int = 256
    horizon: Optional[int] = None
    window: Optional[int] = None
    loss: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    seed: int = 0
    validation_fraction: float = 0.2
    mode: str = "perturbation"
    checkpoint_every: int = 50
    lift_grad_from_pred: bool = True
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}"
            )
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        if self.window is not None and self.window < 1:
            raise ValueError(f"window must be at least 1, got {self.window}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be at least 1, got {self.checkpoint_every}")
        if self.workers < 1:
            raise ValueError(f"workers must be at least 1, got {self.workers}")


@dataclass
class AdamState:
    """Moment accumulators, step counter and hyperparameters of Adam."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Dict[str, np.ndarray], learning_rate: float = 1e-3) -> "AdamState":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
            learning_rate=learning_rate,
        )


def adam_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step

    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        new_params[name] = value - state.learning_rate * (m / correction1) / (
            np.sqrt(v / correction2) + state.eps
        )
        new_m[name], new_v[name] = m, v

    new_state = AdamState(
        m=new_m,
        v=new_v,
        step=step,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return new_params, new_state


def clip_gradients(
    grads: Dict[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale all gradients together so their global 2-norm is at most max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


@dataclass(frozen=True)
class HistoryRow:
    """Metrics recorded after one epoch (epoch 0 is the initial model)."""

    epoch: int
    train_pred: float
    train_dyn: float
    val_pred: float
    val_dyn: float
    gamma: float
    d_frob: float


def write_history_csv(rows: List[HistoryRow], path: Path) -> None:
    """Write the history with 17-significant-digit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            values = asdict(row)
            writer.writerow(
                [str(row.epoch)] + [format(values[name], ".17g") for name in HISTORY_COLUMNS[1:]]
            )


def read_history_csv(path: Path) -> List[HistoryRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            HistoryRow(
                epoch=int(record["epoch"]),
                **{name: float(record[name]) for name in HISTORY_COLUMNS[1:]},
            )
            for record in reader
        ]


@dataclass
class TrainResult:
    """Best-validation model, the model after the last epoch, and the history."""

    model: DiscrepancyModel
    final_model: DiscrepancyModel
    history: List[HistoryRow]
    best_epoch: int
    adam: AdamState


CheckpointCallback = Callable[[int, DiscrepancyModel, AdamState, str], None]


def prepare_dataset(
    model: DiscrepancyModel,
    dataset: Dataset,
    horizon: Optional[int] = None,
    window: Optional[int] = None,
) -> Dataset:
    """Truncate, optionally cut into windows, and attach nominal residuals."""
    if horizon is not None and horizon < dataset.horizon:
        dataset = dataset.truncate(horizon)
    if window is not None and window < dataset.horizon:
        dataset = dataset.windows(window)
    return attach_residuals(model, dataset)


def batched_loss(
    model: DiscrepancyModel,
    dataset: Dataset,
    weights: LossWeights,
    batch_size: int = 256,
    lift_grad_from_pred: bool = True,
) -> LossResult:
    """Loss over a whole dataset, evaluated chunk by chunk and weighted by chunk size."""
    pred = dyn = 0.0
    result = None
    for start in range(0, dataset.count, batch_size):
        chunk = dataset.subset(np.arange(start, min(start + batch_size, dataset.count)))
        result = loss(model, chunk, weights, lift_grad_from_pred=lift_grad_from_pred)
        pred += result.pred * chunk.count
        dyn += result.dyn * chunk.count
    if result is None:
        return loss(model, dataset, weights)

    pred /= dataset.count
    dyn /= dataset.count
    total = (
        pred + weights.beta1 * dyn + weights.beta2 * result.gamma + weights.beta3 * result.d_frob
    )
    return LossResult(total=total, pred=pred, dyn=dyn, gamma=result.gamma, d_frob=result.d_frob)


def _chunks(batch: Dataset, workers: int) -> List[Dataset]:
    bounds = np.linspace(0, batch.count, min(workers, batch.count) + 1).astype(int)
    return [batch.subset(np.arange(lo, hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _batch_gradients(
    model: DiscrepancyModel,
    batch: Dataset,
    config: TrainConfig,
    executor: Optional[ThreadPoolExecutor],
) -> Tuple[LossResult, Dict[str, np.ndarray]]:
    if executor is None:
        return loss_and_gradients(model, batch, config.loss, config.lift_grad_from_pred)

    chunks = _chunks(batch, config.workers)
    outcomes = list(
        executor.map(
            lambda chunk: loss_and_gradients(model, chunk, config.loss, config.lift_grad_from_pred),
            chunks,
        )
    )
    # ordered reduction, weighted by chunk size
    total = pred = dyn = 0.0
    grads: Dict[str, np.ndarray] = {}
    for chunk, (result, chunk_grads) in zip(chunks, outcomes):
        share = chunk.count / batch.count
        total += share * result.total
        pred += share * result.pred
        dyn += share * result.dyn
        for name, grad in chunk_grads.items():
            grads[name] = grads[name] + share * grad if name in grads else share * grad
    gamma, d_frob = outcomes[0][0].gamma, outcomes[0][0].d_frob
    return LossResult(total=total, pred=pred, dyn=dyn, gamma=gamma, d_frob=d_frob), grads


def _parameter_norms(params: Dict[str, np.ndarray]) -> Dict[str, float]:
    return {name: float(np.linalg.norm(value)) for name, value in params.items()}


def _is_finite(result: LossResult, grads: Dict[str, np.ndarray]) -> bool:
    return np.isfinite(result.total) and all(np.all(np.isfinite(g)) for g in grads.values())


def train(
    model: DiscrepancyModel,
    dataset: Dataset,
    config: TrainConfig,
    on_checkpoint: Optional[CheckpointCallback] = None,
    adam: Optional[AdamState] = None,
) -> TrainResult:
    """Fit the lifting network and perturbation parameters with Adam.

    The dataset is split by trajectory; the training part is reshuffled every
    epoch with a generator seeded from config.seed. The returned model is the
    one with the lowest validation prediction loss, epoch 0 included.

    Args:
        model: Initial model; its mode must match config.mode
        dataset: Trajectories in deviation coordinates
        config: Optimization settings
        on_checkpoint: Called as (epoch, model, adam_state, reason) with reason
            "best" on every validation improvement and "periodic" every
            config.checkpoint_every epochs
        adam: Optimizer state to resume from

    Returns:
        TrainResult with the best and final models and the per-epoch history

    Raises:
        NonFiniteLossError: If a batch loss or gradient is NaN or infinite
    """
    if model.mode != config.mode:
        raise ValueError(f"model mode '{model.mode}' does not match config mode '{config.mode}'")

    train_set, val_set = dataset.split(config.validation_fraction, config.seed)
    train_set = prepare_dataset(model, train_set, config.horizon, config.window)
    val_set = prepare_dataset(model, val_set, config.horizon)
    log.info(
        f"Training on {train_set.count} trajectories (T={train_set.horizon}), "
        f"validating on {val_set.count}"
    )

    params = model.parameters()
    state = adam if adam is not None else AdamState.create(params, config.learning_rate)
    rng = np.random.default_rng(config.seed)

    def evaluate_split(current: DiscrepancyModel, data: Dataset) -> LossResult:
        return batched_loss(
            current, data, config.loss, config.batch_size, config.lift_grad_from_pred
        )

    initial_train = evaluate_split(model, train_set)
    initial_val = evaluate_split(model, val_set)
    history = [
        HistoryRow(
            epoch=0,
            train_pred=initial_train.pred,
            train_dyn=initial_train.dyn,
            val_pred=initial_val.pred,
            val_dyn=initial_val.dyn,
            gamma=initial_val.gamma,
            d_frob=initial_val.d_frob,
        )
    ]
    best_model, best_epoch, best_val = model, 0, initial_val.pred

    executor = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(train_set.count)
            pred_sum = dyn_sum = 0.0
            for batch_index, start in enumerate(range(0, train_set.count, config.batch_size)):
                batch = train_set.subset(order[start : start + config.batch_size])
                result, grads = _batch_gradients(model, batch, config, executor)
                if not _is_finite(result, grads):
                    raise NonFiniteLossError(epoch, batch_index, _parameter_norms(params))

                grads, grad_norm = clip_gradients(grads, config.clip_norm)
                params, state = adam_step(params, grads, state)
                model = model.with_parameters(params)
                pred_sum += result.pred * batch.count
                dyn_sum += result.dyn * batch.count
                log.debug(
                    f"epoch {epoch} batch {batch_index}: loss={result.total:.6e} "
                    f"grad_norm={grad_norm:.3e}"
                )

            val = evaluate_split(model, val_set)
            row = HistoryRow(
                epoch=epoch,
                train_pred=pred_sum / train_set.count,
                train_dyn=dyn_sum / train_set.count,
                val_pred=val.pred,
                val_dyn=val.dyn,
                gamma=val.gamma,
                d_frob=val.d_frob,
            )
            history.append(row)
            log.info(
                f"epoch {epoch}/{config.epochs}: train_pred={row.train_pred:.3e} "
                f"val_pred={row.val_pred:.3e} gamma={row.gamma:.4f} d_frob={row.d_frob:.3e}"
            )

            if val.pred < best_val:
                best_model, best_epoch, best_val = model, epoch, val.pred
                if on_checkpoint is not None:
                    on_checkpoint(epoch, model, state, "best")
            if on_checkpoint is not None and epoch % config.checkpoint_every == 0:
                on_checkpoint(epoch, model, state, "periodic")
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    log.info(f"Best validation L_pred {best_val:.6e} at epoch {best_epoch}")
    return TrainResult(
        model=best_model,
        final_model=model,
        history=history,
        best_epoch=best_epoch,
        adam=state,
    )


@dataclass(frozen=True)
class EvaluationReport:
    """Prediction and dynamics losses on both splits plus the norm audit of the perturbation."""

    mode: str
    train_pred: float
    train_dyn: float
    val_pred: float
    val_dyn: float
    nominal_pred: float
    gamma: float
    d_frob: float
    d_op: float
    hinf: float
    audit_bound: float
    spectral_radius: float

    def rows(self) -> List[Tuple[str, float]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "mode"]


def _zero_perturbation_pred(model: DiscrepancyModel, dataset: Dataset) -> float:
    """Prediction loss of a perturbation that outputs zero, in training coordinates."""
    target = dataset.residuals if model.mode == "perturbation" else dataset.states
    if model.scaling is not None:
        target = target * model.scaling.state_scale
    return float(np.mean(target ** 2))


def evaluate(
    model: DiscrepancyModel,
    dataset: Dataset,
    horizon: Optional[int] = None,
    validation_fraction: float = 0.2,
    seed: int = 0,
    weights: Optional[LossWeights] = None,
    batch_size: int = 256,
) -> EvaluationReport:
    """Losses on the same split train() uses, plus an independent H-infinity check.

    The H-infinity norm is computed for the stripped (feedthrough-free)
    perturbation in training coordinates, where gamma + ||D||_2 bounds it.
    """
    weights = weights or LossWeights()
    train_set, val_set = dataset.split(validation_fraction, seed)
    train_set = prepare_dataset(model, train_set, horizon)
    val_set = prepare_dataset(model, val_set, horizon)

    train_metrics = batched_loss(model, train_set, weights, batch_size)
    val_metrics = batched_loss(model, val_set, weights, batch_size)

    stripped = strip_feedthrough(model.realized())
    d_op, d_frob = matrix_norms(stripped.D)
    hinf = hinf_norm(stripped.state_space(model.nominal.dt))
    return EvaluationReport(
        mode=model.mode,
        train_pred=train_metrics.pred,
        train_dyn=train_metrics.dyn,
        val_pred=val_metrics.pred,
        val_dyn=val_metrics.dyn,
        nominal_pred=_zero_perturbation_pred(model, val_set),
        gamma=stripped.gamma,
        d_frob=d_frob,
        d_op=d_op,
        hinf=hinf,
        audit_bound=stripped.audit_bound(),
        spectral_radius=spectral_radius(stripped.A),
    )
