"""End-to-end tests of the command-line interface."""

import json
import tempfile
from pathlib import Path

import pytest
from click.testing import CliRunner

from discolift.checkpoint_file import load_model
from discolift.cli import cli, run_command

SMALL_CONFIG = """\
plant: pendulum
lifted_dim: 3
lifting:
  hidden_widths: [4]
datagen:
  count: 10
  horizon: 5
train:
  epochs: 2
  batch_size: 4
  checkpoint_every: 1
"""


@pytest.fixture
def workspace():
    """Create a temporary workspace."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def config_file(workspace):
    path = workspace / "small.yaml"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture
def data_dir(workspace, config_file):
    """Generate a small pendulum dataset through the CLI."""
    out = workspace / "data"
    result = CliRunner().invoke(cli, ["generate", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0, f"Exit code {result.exit_code}: {result.output}"
    return out


@pytest.fixture
def run_dir(workspace, config_file, data_dir):
    """Train a small model through the CLI."""
    out = workspace / "run"
    args = ["train", "--data", str(data_dir), "--config", str(config_file), "--out", str(out)]
    result = CliRunner().invoke(cli, args)
    assert result.exit_code == 0, f"Exit code {result.exit_code}: {result.output}"
    return out


def test_generate_writes_dataset(data_dir):
    """Test generate writes the dataset, its config and a manifest."""
    for name in ("dataset.json", "trajectories.f64", "config.yaml", "manifest.json"):
        assert (data_dir / name).exists(), name

    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert set(manifest["artifacts"]) == {"config.yaml", "dataset.json", "trajectories.f64"}
    assert json.loads((data_dir / "dataset.json").read_text())["count"] == 10


def test_generate_is_reproducible(workspace, config_file, data_dir):
    """Test a second run with the same seed writes identical bytes."""
    again = workspace / "again"
    result = CliRunner().invoke(
        cli, ["generate", "--config", str(config_file), "--out", str(again)]
    )
    assert result.exit_code == 0
    for name in ("trajectories.f64", "dataset.json", "manifest.json"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes(), name


def test_generate_overrides(workspace, config_file):
    """Test --count and --seed override the config file."""
    out = workspace / "data"
    args = ["generate", "--config", str(config_file), "--out", str(out), "--count", "3"]
    result = CliRunner().invoke(cli, args + ["--seed", "8"])
    assert result.exit_code == 0
    manifest = json.loads((out / "dataset.json").read_text())
    assert manifest["count"] == 3
    assert manifest["seed"] == 8


def test_train_writes_artifacts(run_dir):
    """Test train writes models, periodic checkpoints, history and manifest."""
    for name in ("model.json", "final.json", "history.csv", "config.yaml", "manifest.json"):
        assert (run_dir / name).exists(), name
    assert (run_dir / "checkpoints" / "epoch_00001.json").exists()
    assert (run_dir / "checkpoints" / "epoch_00002.json").exists()
    assert len((run_dir / "history.csv").read_text().splitlines()) == 4

    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert len(manifest["dataset_sha256"]) == 64
    assert "checkpoints/epoch_00002.json" in manifest["artifacts"]


def test_train_is_reproducible(workspace, config_file, data_dir, run_dir):
    """Test retraining with the same inputs reproduces the model bytes."""
    again = workspace / "again"
    args = ["train", "--data", str(data_dir), "--config", str(config_file), "--out", str(again)]
    assert CliRunner().invoke(cli, args).exit_code == 0
    for name in ("model.json", "final.json", "history.csv", "manifest.json"):
        assert (again / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_resume(workspace, data_dir, run_dir):
    """Test training resumes from the final checkpoint."""
    out = workspace / "resumed"
    args = ["train", "--data", str(data_dir), "--out", str(out), "--epochs", "1"]
    result = CliRunner().invoke(cli, args + ["--resume", str(run_dir / "final.json")])
    assert result.exit_code == 0, result.output
    assert (out / "model.json").exists()
    assert load_model(out / "final.json").epoch == 3
    history = (out / "history.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in history[1:]] == ["0", "1", "2", "3"]
    assert history[1:3] == (run_dir / "history.csv").read_text().splitlines()[1:3]


def test_resume_reports_changed_artifacts(workspace, data_dir, run_dir):
    """Test resuming from a run whose recorded artifacts changed warns about them."""
    (run_dir / "config.yaml").write_text("plant: pendulum\n")
    out = workspace / "resumed"
    args = ["train", "--data", str(data_dir), "--out", str(out), "--epochs", "1"]
    result = CliRunner().invoke(cli, args + ["--resume", str(run_dir / "final.json")])
    assert result.exit_code == 0, result.output
    assert "Artifacts changed" in result.output
    assert "config.yaml" in result.output


def test_default_output_dir(workspace, config_file):
    """Test generate and train write under the config's output_dir without --out."""
    runs = workspace / "runs"
    config_file.write_text(SMALL_CONFIG + f"output_dir: {runs.as_posix()}\n")
    result = CliRunner().invoke(cli, ["generate", "--config", str(config_file)])
    assert result.exit_code == 0, result.output
    data = runs / "pendulum" / "data"
    assert (data / "dataset.json").exists()

    args = ["train", "--data", str(data), "--config", str(config_file)]
    result = CliRunner().invoke(cli, args)
    assert result.exit_code == 0, result.output
    assert (runs / "pendulum" / "train" / "model.json").exists()


def test_evaluate(data_dir, run_dir):
    """Test evaluate prints the metric table."""
    args = ["evaluate", "--model", str(run_dir / "model.json"), "--data", str(data_dir)]
    result = CliRunner().invoke(cli, args)
    assert result.exit_code == 0, result.output
    assert "val_pred" in result.output
    assert "hinf" in result.output


def test_hinf_check(run_dir):
    """Test hinf-check passes for a trained model."""
    result = CliRunner().invoke(cli, ["hinf-check", "--model", str(run_dir / "model.json")])
    assert result.exit_code == 0, result.output
    assert "PASS" in result.output
    assert "FAIL" not in result.output


@pytest.mark.parametrize("kind", ["openloop", "closedloop"])
def test_compare(workspace, run_dir, kind):
    """Test the comparison commands write traces, a summary and a manifest."""
    out = workspace / f"compare-{kind}"
    args = [f"compare-{kind}", "--model", str(run_dir / "model.json"), "--out", str(out)]
    result = CliRunner().invoke(cli, args + ["--scenarios", "2", "--steps", "4"])
    assert result.exit_code == 0, result.output
    assert (out / "scenario_001.csv").exists()
    assert (out / "summary.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["command"] == f"compare-{kind}"


def test_certify_param():
    """Test certify-param reports the worst ratio."""
    result = CliRunner().invoke(cli, ["certify-param", "--draws", "5", "--dims", "3,2,2"])
    assert result.exit_code == 0, result.output
    assert "max hinf/gamma" in result.output


class TestExitCodes:
    def test_success(self):
        """Test a passing command exits with 0."""
        assert run_command(["certify-param", "--draws", "2"]) == 0

    def test_usage_error(self):
        """Test malformed dims exit with 2."""
        assert run_command(["certify-param", "--dims", "4,2"]) == 2

    def test_config_error(self, workspace):
        """Test an unknown configuration key exits with 2."""
        bad = workspace / "bad.yaml"
        bad.write_text("train:\n  bogus: 1\n")
        assert run_command(["generate", "--config", str(bad), "--out", str(workspace / "d")]) == 2

    def test_mode_mismatch(self, data_dir, run_dir):
        """Test evaluating with the wrong mode exits with 2."""
        args = ["evaluate", "--model", str(run_dir / "model.json"), "--data", str(data_dir)]
        assert run_command(args + ["--mode", "direct"]) == 2

    def test_numerical_error(self, workspace):
        """Test invalid controller weights exit with 3."""
        bad = workspace / "weights.yaml"
        bad.write_text("datagen:\n  count: 2\n  closed_loop: true\n  lqr_r: [0.0]\n")
        assert run_command(["generate", "--config", str(bad), "--out", str(workspace / "d")]) == 3

    def test_missing_dataset(self, workspace):
        """Test a missing dataset exits with 4."""
        args = ["train", "--data", str(workspace / "nowhere"), "--out", str(workspace / "r")]
        assert run_command(args) == 4

    def test_corrupt_checkpoint(self, workspace):
        """Test a corrupt checkpoint exits with 4."""
        broken = workspace / "model.json"
        broken.write_text('{"format_version": 1, "payl')
        assert run_command(["hinf-check", "--model", str(broken)]) == 4

    def test_version(self):
        """Test --version exits cleanly."""
        assert run_command(["--version"]) == 0
