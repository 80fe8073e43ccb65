"""Dataset directories: a JSON manifest next to a raw little-endian float64 file."""

import json
import logging
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .manifest import file_sha256

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

FORMAT_VERSION = 1
MANIFEST_NAME = "dataset.json"
DATA_NAME = "trajectories.f64"
DTYPE = np.dtype("<f8")


class DatasetFileError(Exception):
    """Raised when a dataset directory is missing, inconsistent or corrupt."""

    pass


def _floats(values: np.ndarray) -> list:
    return [format(float(v), ".17g") for v in np.asarray(values).reshape(-1)]


def save_dataset(dataset: Dataset, directory: Path) -> Path:
    """Write dataset.json and trajectories.f64 into directory; returns the manifest path.

    The binary file is laid out trajectory by trajectory, sample by sample,
    with the state entries followed by the input entries. Residuals are not
    stored; they depend on the model.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_path = directory / DATA_NAME
    manifest_path = directory / MANIFEST_NAME

    packed = np.concatenate([dataset.states, dataset.inputs], axis=2).astype(DTYPE)
    with open(data_path, "wb") as f:
        f.write(packed.tobytes(order="C"))

    manifest = {
        "format_version": FORMAT_VERSION,
        "plant": dataset.plant,
        "dt": format(dataset.dt, ".17g"),
        "count": dataset.count,
        "horizon": dataset.horizon,
        "n_states": dataset.n_states,
        "n_inputs": dataset.n_inputs,
        "trim_state": _floats(dataset.trim_state),
        "trim_input": _floats(dataset.trim_input),
        "seed": dataset.seed,
        "config_hash": dataset.config_hash,
        "envelope_violations": [int(i) for i in np.flatnonzero(dataset.envelope_violations)],
        "data_file": DATA_NAME,
        "sha256": file_sha256(data_path),
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    log.info(f"Wrote {dataset.count} trajectories to {directory}")
    return manifest_path


def load_dataset(directory: Path) -> Dataset:
    """Read a dataset directory written by save_dataset.

    Raises:
        DatasetFileError: If the manifest is missing or malformed, the version is
            unknown, or the binary file fails its size or checksum check
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetFileError(f"Dataset manifest not found: {manifest_path}")

    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFileError(f"Failed to parse {manifest_path}: {e}") from e

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFileError(f"{manifest_path}: unsupported format version {version!r}")

    try:
        count = int(manifest["count"])
        steps = int(manifest["horizon"]) + 1
        n = int(manifest["n_states"])
        m = int(manifest["n_inputs"])
        data_path = directory / manifest["data_file"]
        expected_sha = manifest["sha256"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFileError(f"{manifest_path} is malformed: {e}") from e

    if not data_path.exists():
        raise DatasetFileError(f"Trajectory file not found: {data_path}")
    expected_size = count * steps * (n + m) * DTYPE.itemsize
    if data_path.stat().st_size != expected_size:
        raise DatasetFileError(
            f"{data_path} holds {data_path.stat().st_size} bytes, expected {expected_size}"
        )
    if file_sha256(data_path) != expected_sha:
        raise DatasetFileError(f"{data_path} failed its checksum")

    packed = np.fromfile(data_path, dtype=DTYPE).astype(np.float64).reshape(count, steps, n + m)
    flags = np.zeros(count, dtype=bool)
    flags[np.asarray(manifest.get("envelope_violations", []), dtype=int)] = True

    try:
        return Dataset(
            plant=manifest["plant"],
            dt=float(manifest["dt"]),
            states=packed[:, :, :n].copy(),
            inputs=packed[:, :, n:].copy(),
            trim_state=np.array([float(v) for v in manifest["trim_state"]]),
            trim_input=np.array([float(v) for v in manifest["trim_input"]]),
            envelope_violations=flags,
            seed=int(manifest.get("seed", 0)),
            config_hash=manifest.get("config_hash", ""),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFileError(f"{manifest_path} is malformed: {e}") from e


def dataset_checksum(directory: Path) -> str:
    """SHA-256 of the trajectory file as recorded in the dataset manifest."""
    manifest_path = Path(directory) / MANIFEST_NAME
    try:
        with open(manifest_path) as f:
            return json.load(f)["sha256"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise DatasetFileError(f"Cannot read checksum from {manifest_path}: {e}") from e
