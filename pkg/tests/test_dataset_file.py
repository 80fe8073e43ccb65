"""Tests for dataset directories."""

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from discolift.datagen import DataGenConfig, generate_dataset
from discolift.dataset_file import (
    DATA_NAME,
    MANIFEST_NAME,
    DatasetFileError,
    dataset_checksum,
    load_dataset,
    save_dataset,
)
from discolift.manifest import file_sha256
from discolift.plants import Plant


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def dataset():
    config = DataGenConfig(
        count=4, horizon=6, dt=0.1, x0_bounds=[2.0, 2.0], envelope_bounds=[2.5, 2.5], seed=5
    )
    return generate_dataset(Plant.from_name("vdp"), config)


def test_save_and_load(temp_dir, dataset):
    """Test a saved dataset loads with identical arrays and metadata."""
    dataset.config_hash = "abc123"
    save_dataset(dataset, temp_dir)
    loaded = load_dataset(temp_dir)

    assert loaded.plant == "vdp"
    assert loaded.dt == 0.1
    assert loaded.seed == 5
    assert loaded.config_hash == "abc123"
    np.testing.assert_array_equal(loaded.states, dataset.states)
    np.testing.assert_array_equal(loaded.inputs, dataset.inputs)
    np.testing.assert_array_equal(loaded.envelope_violations, dataset.envelope_violations)


def test_layout(temp_dir, dataset):
    """Test the binary file size and the manifest fields."""
    save_dataset(dataset, temp_dir)
    assert (temp_dir / DATA_NAME).stat().st_size == 4 * 7 * 3 * 8

    manifest = json.loads((temp_dir / MANIFEST_NAME).read_text())
    assert manifest["count"] == 4
    assert manifest["horizon"] == 6
    assert manifest["n_states"] == 2
    assert manifest["n_inputs"] == 1
    assert manifest["sha256"] == file_sha256(temp_dir / DATA_NAME)
    assert dataset_checksum(temp_dir) == manifest["sha256"]


def test_first_record_holds_state_then_input(temp_dir, dataset):
    """Test samples are stored as state entries followed by input entries."""
    save_dataset(dataset, temp_dir)
    raw = np.fromfile(temp_dir / DATA_NAME, dtype="<f8")
    np.testing.assert_array_equal(
        raw[:3], [dataset.states[0, 0, 0], dataset.states[0, 0, 1], dataset.inputs[0, 0, 0]]
    )


def test_missing_manifest(temp_dir):
    """Test a directory without a manifest raises DatasetFileError."""
    with pytest.raises(DatasetFileError, match="not found"):
        load_dataset(temp_dir)


def test_corrupt_data(temp_dir, dataset):
    """Test a flipped byte fails the checksum."""
    save_dataset(dataset, temp_dir)
    data_path = temp_dir / DATA_NAME
    raw = bytearray(data_path.read_bytes())
    raw[10] ^= 0xFF
    data_path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFileError, match="checksum"):
        load_dataset(temp_dir)


def test_truncated_data(temp_dir, dataset):
    """Test a short trajectory file fails the size check."""
    save_dataset(dataset, temp_dir)
    data_path = temp_dir / DATA_NAME
    data_path.write_bytes(data_path.read_bytes()[:-8])
    with pytest.raises(DatasetFileError, match="bytes"):
        load_dataset(temp_dir)


def test_unknown_version(temp_dir, dataset):
    """Test an unknown manifest version is refused."""
    save_dataset(dataset, temp_dir)
    manifest_path = temp_dir / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text())
    manifest["format_version"] = 7
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(DatasetFileError, match="version"):
        load_dataset(temp_dir)


def test_rewrite_is_byte_identical(temp_dir, dataset):
    """Test saving a loaded dataset reproduces both files exactly."""
    first, second = temp_dir / "a", temp_dir / "b"
    save_dataset(dataset, first)
    save_dataset(load_dataset(first), second)
    for name in (DATA_NAME, MANIFEST_NAME):
        assert (first / name).read_bytes() == (second / name).read_bytes()
