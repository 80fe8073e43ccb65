"""Checksummed JSON checkpoints of discrepancy models."""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .config import ExperimentConfig, config_from_dict
from .discrepancy import ChannelScaling, DiscrepancyModel, LiftingNet
from .lti import StateSpace
from .normbounded import SystemDims, theta_from_parameters
from .plants import Trim
from .training import AdamState

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint is missing, truncated, corrupt or of an unknown version."""

    pass


class ModeMismatchError(Exception):
    """Raised when a checkpoint's mode differs from the one requested."""

    pass


@dataclass
class Checkpoint:
    """A model with the configuration that produced it and optional optimizer state."""

    model: DiscrepancyModel
    config: ExperimentConfig
    epoch: int = 0
    adam: Optional[AdamState] = None
    history_file: Optional[str] = None


def _encode_matrix(value: np.ndarray) -> List[List[str]]:
    value = np.atleast_2d(np.asarray(value, dtype=np.float64))
    return [[format(float(x), ".17g") for x in row] for row in value]


def _decode_matrix(rows: List[List[str]], shape: Optional[tuple] = None) -> np.ndarray:
    value = np.array([[float(x) for x in row] for row in rows], dtype=np.float64)
    if shape is not None:
        value = value.reshape(shape)
    return value


def _encode_vector(value: np.ndarray) -> List[str]:
    return [format(float(x), ".17g") for x in np.asarray(value, dtype=np.float64).reshape(-1)]


def _decode_vector(values: List[str]) -> np.ndarray:
    return np.array([float(x) for x in values], dtype=np.float64)


def _encode_params(params: Dict[str, np.ndarray]) -> Dict[str, Any]:
    return {
        name: {"shape": list(value.shape), "values": _encode_matrix(value)}
        for name, value in params.items()
    }


def _decode_params(encoded: Dict[str, Any]) -> Dict[str, np.ndarray]:
    return {
        name: _decode_matrix(entry["values"], tuple(entry["shape"]))
        for name, entry in encoded.items()
    }


def _payload(checkpoint: Checkpoint) -> Dict[str, Any]:
    model = checkpoint.model
    theta = model.theta
    payload = {
        "mode": model.mode,
        "epoch": checkpoint.epoch,
        "history_file": checkpoint.history_file,
        "config": checkpoint.config.to_dict(),
        "nominal": {
            "A": _encode_matrix(model.nominal.A),
            "B": _encode_matrix(model.nominal.B),
            "dt": format(model.nominal.dt, ".17g"),
        },
        "gain": _encode_matrix(model.gain),
        "trim": {
            "state": _encode_vector(model.trim.state),
            "input": _encode_vector(model.trim.input),
            "airspeed": format(model.trim.airspeed, ".17g"),
        },
        "theta": {
            "dims": [theta.dims.n_x, theta.dims.n_u, theta.dims.n_y],
            "epsilon": format(theta.epsilon, ".17g"),
            "params": _encode_params(theta.parameters()),
        },
        "lifting": {
            "activation": model.net.activation,
            "weights": [_encode_matrix(W) for W in model.net.weights],
        },
        "scaling": None,
        "adam": None,
    }
    if model.scaling is not None:
        payload["scaling"] = {
            "state": _encode_vector(model.scaling.state_scale),
            "input": _encode_vector(model.scaling.input_scale),
        }
    adam = checkpoint.adam
    if adam is not None:
        payload["adam"] = {
            "step": adam.step,
            "learning_rate": format(adam.learning_rate, ".17g"),
            "beta1": format(adam.beta1, ".17g"),
            "beta2": format(adam.beta2, ".17g"),
            "eps": format(adam.eps, ".17g"),
            "m": _encode_params(adam.m),
            "v": _encode_params(adam.v),
        }
    return payload


def _canonical(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _checksum(payload: Dict[str, Any]) -> str:
    return hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()


def save_model(checkpoint: Checkpoint, path: Path) -> str:
    """Write a checkpoint; returns the payload checksum.

    Floats are stored as 17-significant-digit decimal strings, so a reload
    reproduces every parameter bit for bit.
    """
    path = Path(path)
    payload = _payload(checkpoint)
    checksum = _checksum(payload)
    document = {"format_version": FORMAT_VERSION, "checksum": checksum, "payload": payload}

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    tmp_path.replace(path)
    log.debug(f"Saved checkpoint {path} (epoch {checkpoint.epoch})")
    return checksum


def _model_from_payload(payload: Dict[str, Any]) -> DiscrepancyModel:
    nominal = payload["nominal"]
    A = _decode_matrix(nominal["A"])
    B = _decode_matrix(nominal["B"])
    n, m = B.shape
    state_space = StateSpace(A, B, np.eye(n), np.zeros((n, m)), float(nominal["dt"]))

    theta_entry = payload["theta"]
    dims = SystemDims(*theta_entry["dims"])
    params = _decode_params(theta_entry["params"])
    theta = theta_from_parameters(params, dims, float(theta_entry["epsilon"]))

    lifting = payload["lifting"]
    net = LiftingNet(
        weights=[_decode_matrix(W) for W in lifting["weights"]],
        activation=lifting["activation"],
    )
    trim = payload["trim"]
    scaling = None
    if payload["scaling"] is not None:
        scaling = ChannelScaling(
            state_scale=_decode_vector(payload["scaling"]["state"]),
            input_scale=_decode_vector(payload["scaling"]["input"]),
        )
    return DiscrepancyModel(
        nominal=state_space,
        gain=_decode_matrix(payload["gain"]),
        theta=theta,
        net=net,
        trim=Trim(
            state=_decode_vector(trim["state"]),
            input=_decode_vector(trim["input"]),
            airspeed=float(trim["airspeed"]),
        ),
        mode=payload["mode"],
        scaling=scaling,
    )


def _adam_from_payload(entry: Optional[Dict[str, Any]]) -> Optional[AdamState]:
    if entry is None:
        return None
    return AdamState(
        m=_decode_params(entry["m"]),
        v=_decode_params(entry["v"]),
        step=int(entry["step"]),
        learning_rate=float(entry["learning_rate"]),
        beta1=float(entry["beta1"]),
        beta2=float(entry["beta2"]),
        eps=float(entry["eps"]),
    )


def load_model(path: Path, expected_mode: Optional[str] = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises:
        CheckpointError: If the file is missing, truncated, fails its checksum or
            has an unknown format version
        ModeMismatchError: If expected_mode is given and differs from the stored mode, or
            the stored model and its config disagree on the mode
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")

    try:
        with open(path) as f:
            document = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(
            f"Checkpoint {path} is truncated or corrupt (checksum error): {e}"
        ) from e

    if not isinstance(document, dict) or "payload" not in document:
        raise CheckpointError(f"Checkpoint {path} is missing its payload")
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint {path} has unsupported format version {version!r}")

    payload = document["payload"]
    if _checksum(payload) != document.get("checksum"):
        raise CheckpointError(f"Checkpoint {path} failed its checksum")

    mode = payload.get("mode")
    if expected_mode is not None and mode != expected_mode:
        raise ModeMismatchError(f"Checkpoint {path} holds a {mode} model, expected {expected_mode}")

    try:
        config = config_from_dict(payload["config"])
        model = _model_from_payload(payload)
        adam = _adam_from_payload(payload.get("adam"))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} is malformed: {e}") from e
    if config.train.mode != model.mode:
        raise ModeMismatchError(
            f"Checkpoint {path} holds a {model.mode} model "
            f"but its config trains {config.train.mode}"
        )

    return Checkpoint(
        model=model,
        config=config,
        epoch=int(payload.get("epoch", 0)),
        adam=adam,
        history_file=payload.get("history_file"),
    )
