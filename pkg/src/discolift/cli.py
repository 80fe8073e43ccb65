"""Main CLI entry point for discolift."""

import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import click
import numpy as np

from . import __version__
from .checkpoint_file import (
    Checkpoint,
    CheckpointError,
    ModeMismatchError,
    load_model,
    save_model,
)
from .compare import run_comparison, write_comparison
from .config import ConfigError, ConfigFile, ExperimentConfig, config_hash, load_config
from .datagen import generate_dataset, limited_uas_dataset
from .dataset_file import DatasetFileError, dataset_checksum, load_dataset, save_dataset
from .discrepancy import MODES, ChannelScaling, EmptyBatchError, model_for_plant
from .display import (
    format_certification_table,
    format_comparison_table,
    format_hinf_table,
    format_history_tail,
    format_metrics_table,
    verdict,
)
from .lti import hinf_norm, matrix_norms, spectral_radius
from .manifest import RunManifest
from .normbounded import (
    CertificationError,
    SystemDims,
    certify,
    require_certified,
    strip_feedthrough,
)
from .numkernel import NumericalError
from .plants import PLANT_KINDS, Plant
from .training import (
    HistoryRow,
    evaluate,
    read_history_csv,
    train,
    write_history_csv,
)

log = logging.getLogger(__name__)

HINF_REL_TOL = 1e-6
OUT_HELP = "Defaults to <output_dir>/<plant>/<command> from the config"


def _with_overrides(
    config: ExperimentConfig, datagen: Optional[dict] = None, train: Optional[dict] = None
) -> ExperimentConfig:
    """Apply command-line flags on top of a loaded configuration."""
    datagen = {k: v for k, v in (datagen or {}).items() if v is not None}
    train = {k: v for k, v in (train or {}).items() if v is not None}
    try:
        if datagen:
            config = replace(config, datagen=replace(config.datagen, **datagen))
        if train:
            config = replace(config, train=replace(config.train, **train))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid option: {e}") from e
    return config


def _output_dir(out_dir: Optional[Path], config: ExperimentConfig, name: str) -> Path:
    if out_dir is not None:
        return out_dir
    return Path(config.output_dir) / config.plant / name


def _prior_history(resume_path: Path, checkpoint: Checkpoint) -> List[HistoryRow]:
    """History of the run being resumed, up to the checkpoint's epoch."""
    source = RunManifest(resume_path.parent)
    stale = sorted(key for key, ok in source.verify().items() if not ok)
    if stale:
        click.echo(f"⚠️  Artifacts changed since {source.path} was written: {', '.join(stale)}")
    if checkpoint.history_file is None:
        return []
    path = resume_path.parent / checkpoint.history_file
    if not path.exists():
        log.warning(f"No history at {path}; the resumed history starts at epoch {checkpoint.epoch}")
        return []
    return [row for row in read_history_csv(path) if row.epoch <= checkpoint.epoch]


def _parse_dims(ctx, param, value: str) -> SystemDims:
    try:
        n_x, n_u, n_y = (int(part) for part in value.split(","))
        return SystemDims(n_x=n_x, n_u=n_u, n_y=n_y)
    except ValueError:
        raise click.BadParameter(f"expected three comma-separated integers, got '{value}'")


def _load_checkpoint(path: Path, mode: Optional[str] = None) -> Checkpoint:
    checkpoint = load_model(path, expected_mode=mode)
    click.echo(f"✓ Loaded {checkpoint.model.mode} model from {path} (epoch {checkpoint.epoch})")
    return checkpoint


@click.group()
@click.version_option(__version__, prog_name="discolift")
@click.option("--verbose", "-v", count=True, help="Log progress (-v) or every batch (-vv)")
def cli(verbose: int):
    """discolift: learn H-infinity bounded discrepancy models of nonlinear plants."""
    if verbose:
        logging.basicConfig(
            level=logging.DEBUG if verbose > 1 else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )


@cli.command()
@click.option("--plant", type=click.Choice(PLANT_KINDS), default=None, help="Benchmark plant")
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None, help=OUT_HELP)
@click.option("--seed", type=int, default=None, help="Overrides datagen.seed")
@click.option("--count", type=int, default=None, help="Overrides datagen.count")
@click.option("--limited", is_flag=True, help="One trajectory per corner of the x0 box")
def generate(
    plant: Optional[str],
    config_path: Optional[Path],
    out_dir: Optional[Path],
    seed: Optional[int],
    count: Optional[int],
    limited: bool,
):
    """Simulate a trajectory dataset for a benchmark plant."""
    config = load_config(config_path, plant=plant)
    config = _with_overrides(config, datagen={"seed": seed, "count": count})
    plant_obj = Plant.from_name(config.plant)

    if limited:
        dataset = limited_uas_dataset(plant_obj, config.datagen)
    else:
        dataset = generate_dataset(plant_obj, config.datagen)
    digest = config_hash(config)
    dataset = replace(dataset, config_hash=digest)
    out_dir = _output_dir(out_dir, config, "data")

    manifest_path = save_dataset(dataset, out_dir)
    config_file = ConfigFile(out_dir / "config.yaml")
    config_file.save(config)
    click.echo(f"✓ Wrote {dataset.count} {config.plant} trajectories to {out_dir}")
    violations = int(dataset.envelope_violations.sum())
    if violations:
        click.echo(f"⚠️  {violations} trajectories left the sampling envelope")

    run = RunManifest(out_dir)
    run.create("generate", digest, config.datagen.seed)
    run.record_artifacts([manifest_path, out_dir / "trajectories.f64", config_file.path])
    click.echo(f"✓ Recorded manifest {run.path}")


@cli.command("train")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None, help=OUT_HELP)
@click.option("--seed", type=int, default=None, help="Overrides train.seed")
@click.option("--workers", type=int, default=None, help="Threads per batch (default 1)")
@click.option("--epochs", type=int, default=None, help="Overrides train.epochs")
@click.option("--mode", type=click.Choice(MODES), default=None, help="Overrides train.mode")
@click.option(
    "--resume",
    "resume_path",
    type=click.Path(path_type=Path),
    default=None,
    help="Continue from a checkpoint's model and optimizer state",
)
def train_command(
    data_dir: Path,
    config_path: Optional[Path],
    out_dir: Optional[Path],
    seed: Optional[int],
    workers: Optional[int],
    epochs: Optional[int],
    mode: Optional[str],
    resume_path: Optional[Path],
):
    """Train a discrepancy model on a generated dataset."""
    dataset = load_dataset(data_dir)
    click.echo(f"✓ Loaded {dataset.count} {dataset.plant} trajectories (T={dataset.horizon})")

    resumed = None
    if resume_path is not None:
        resumed = _load_checkpoint(resume_path, mode)
        config = resumed.config
    else:
        config = load_config(config_path, plant=dataset.plant)
    config = _with_overrides(
        config, train={"seed": seed, "workers": workers, "epochs": epochs, "mode": mode}
    )
    if config.plant != dataset.plant:
        raise ConfigError(f"config is for plant '{config.plant}' but data is '{dataset.plant}'")

    out_dir = _output_dir(out_dir, config, "train")

    start_epoch, prior = 0, []
    if resumed is not None:
        model, adam = resumed.model, resumed.adam
        start_epoch, prior = resumed.epoch, _prior_history(resume_path, resumed)
    else:
        scaling = None
        if config.scaling:
            train_split, _ = dataset.split(config.train.validation_fraction, config.train.seed)
            scaling = ChannelScaling.fit(train_split)
        model = model_for_plant(
            Plant.from_name(config.plant),
            dataset.dt,
            config.lifted_dim,
            hidden_widths=config.lifting.hidden_widths,
            activation=config.lifting.activation,
            mode=config.train.mode,
            epsilon=config.epsilon,
            init_std=config.init_std,
            observer_q_scale=config.observer.q_scale,
            observer_r_scale=config.observer.r_scale,
            rng=np.random.default_rng(config.train.seed),
            scaling=scaling,
        )
        adam = None

    out_dir.mkdir(parents=True, exist_ok=True)
    history_name = "history.csv"
    checkpoints = []

    def on_checkpoint(epoch, current, state, reason):
        epoch += start_epoch
        if reason == "best":
            path = out_dir / "model.json"
        else:
            path = out_dir / "checkpoints" / f"epoch_{epoch:05d}.json"
            checkpoints.append(path)
        save_model(Checkpoint(current, config, epoch, state, history_name), path)

    click.echo(f"Training {config.train.mode} model for {config.train.epochs} epochs...")
    result = train(model, dataset, config.train, on_checkpoint=on_checkpoint, adam=adam)

    shifted = [replace(row, epoch=row.epoch + start_epoch) for row in result.history]
    history = prior + shifted[1:] if prior else shifted
    best_epoch = result.best_epoch + start_epoch
    final_epoch = config.train.epochs + start_epoch
    write_history_csv(history, out_dir / history_name)
    save_model(
        Checkpoint(result.model, config, best_epoch, None, history_name),
        out_dir / "model.json",
    )
    save_model(
        Checkpoint(result.final_model, config, final_epoch, result.adam, history_name),
        out_dir / "final.json",
    )
    ConfigFile(out_dir / "config.yaml").save(config)

    click.echo(format_history_tail(history))
    click.echo(f"✓ Best validation model from epoch {best_epoch} saved to model.json")

    run = RunManifest(out_dir)
    run.create("train", config_hash(config), config.train.seed)
    run.update({"dataset_sha256": dataset_checksum(data_dir)})
    run.record_artifacts(
        [
            out_dir / history_name,
            out_dir / "model.json",
            out_dir / "final.json",
            out_dir / "config.yaml",
        ]
        + checkpoints
    )
    click.echo(f"✓ Recorded manifest {run.path}")


@cli.command("evaluate")
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True)
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True)
@click.option("--mode", type=click.Choice(MODES), default=None, help="Required model mode")
@click.option("--horizon", type=int, default=None, help="Truncate trajectories to this horizon")
def evaluate_command(model_path: Path, data_dir: Path, mode: Optional[str], horizon: Optional[int]):
    """Report prediction/dynamics losses and the norm audit of a trained model."""
    checkpoint = _load_checkpoint(model_path, mode)
    dataset = load_dataset(data_dir)
    if dataset.plant != checkpoint.config.plant:
        raise ConfigError(
            f"model is for plant '{checkpoint.config.plant}' but data is '{dataset.plant}'"
        )

    train_config = checkpoint.config.train
    report = evaluate(
        checkpoint.model,
        dataset,
        horizon=horizon,
        validation_fraction=train_config.validation_fraction,
        seed=train_config.seed,
        weights=train_config.loss,
        batch_size=train_config.batch_size,
    )
    click.echo(format_metrics_table(report))
    improved = report.val_pred < report.nominal_pred
    click.echo(verdict(improved, "validation L_pred below the zero-perturbation baseline"))


def _compare(kind: str, model_path: Path, scenarios: int, steps: Optional[int], seed: int, out_dir):
    checkpoint = _load_checkpoint(model_path)
    config = checkpoint.config
    plant = Plant.from_name(config.plant)
    steps = steps if steps is not None else config.datagen.horizon

    report = run_comparison(
        checkpoint.model, plant, config.datagen, kind, scenarios, steps, seed=seed
    )
    out_dir = _output_dir(out_dir, config, f"compare-{kind}")
    written = write_comparison(report, out_dir)
    click.echo(format_comparison_table(report))
    nominal, learned = report.mean_mse()
    click.echo(f"Mean MSE vs nonlinear: nominal {nominal:.6g}, learned {learned:.6g}")
    click.echo(verdict(learned < nominal, "learned model closer to the nonlinear plant"))

    run = RunManifest(out_dir)
    run.create(f"compare-{kind}", config_hash(config), seed)
    run.record_artifacts(written)
    click.echo(f"✓ Wrote {len(written)} CSV files to {out_dir}")


_compare_options = [
    click.option("--model", "model_path", type=click.Path(path_type=Path), required=True),
    click.option("--scenarios", type=int, default=20, show_default=True),
    click.option("--steps", type=int, default=None, help="Defaults to the data horizon"),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None, help=OUT_HELP),
]


def _with_compare_options(fn):
    for option in reversed(_compare_options):
        fn = option(fn)
    return fn


@cli.command("compare-openloop")
@_with_compare_options
def compare_openloop(model_path: Path, scenarios: int, steps: Optional[int], seed: int, out_dir):
    """Open-loop runs of the nonlinear plant, P and G under identical random inputs."""
    _compare("openloop", model_path, scenarios, steps, seed, out_dir)


@cli.command("compare-closedloop")
@_with_compare_options
def compare_closedloop(model_path: Path, scenarios: int, steps: Optional[int], seed: int, out_dir):
    """LQR closed loops around the nonlinear plant, P and G with identical noise."""
    _compare("closedloop", model_path, scenarios, steps, seed, out_dir)


@cli.command("hinf-check")
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True)
def hinf_check(model_path: Path):
    """Verify the H-infinity bound of a trained perturbation independently."""
    checkpoint = _load_checkpoint(model_path)
    model = checkpoint.model
    dt = model.nominal.dt

    realized = model.realized()
    stripped = strip_feedthrough(realized)
    full = hinf_norm(realized.state_space(dt))
    hinf = hinf_norm(stripped.state_space(dt))
    d_op, _ = matrix_norms(stripped.D)
    click.echo(format_hinf_table(hinf, stripped.gamma, d_op, spectral_radius(stripped.A)))

    full_ok = full <= realized.gamma * (1.0 + HINF_REL_TOL)
    stripped_ok = hinf <= stripped.audit_bound() * (1.0 + HINF_REL_TOL)
    click.echo(verdict(full_ok, f"||Delta||_inf = {full:.9g} <= gamma"))
    click.echo(verdict(stripped_ok, "stripped norm within gamma + ||D||_2"))
    if not (full_ok and stripped_ok):
        raise CertificationError(f"{model_path} violates its H-infinity bound")


@cli.command("certify-param")
@click.option("--draws", type=int, default=100, show_default=True)
@click.option("--dims", type=str, default="4,2,3", show_default=True, callback=_parse_dims)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--std", type=float, default=1.0, show_default=True, help="Std of the free blocks")
def certify_param(draws: int, dims: SystemDims, seed: int, std: float):
    """Check the norm-bounded parametrization over random draws."""
    result = certify(draws, dims, seed=seed, std=std)
    click.echo(format_certification_table(result))
    click.echo(f"max hinf/gamma = {result.max_ratio:.9f}")
    click.echo(verdict(result.passed, f"{draws} draws"))
    require_certified(result)


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures to exit codes.

    Returns:
        0 on success, 2 for configuration or usage errors, 3 for numerical
        failures, 4 for file errors, 130 when interrupted
    """
    try:
        result = cli.main(
            args=list(argv) if argv is not None else None,
            prog_name="discolift",
            standalone_mode=False,
        )
    except click.exceptions.Abort:
        click.echo("\n⏸️  Interrupted", err=True)
        return 130
    except click.ClickException as e:
        e.show()
        return 2
    except (ConfigError, ModeMismatchError) as e:
        click.echo(f"❌ Error: {e}", err=True)
        return 2
    except (NumericalError, EmptyBatchError) as e:
        click.echo(f"❌ Error: {e}", err=True)
        return 3
    except (CheckpointError, DatasetFileError, OSError) as e:
        click.echo(f"❌ Error: {e}", err=True)
        return 4
    except ValueError as e:
        click.echo(f"❌ Error: {e}", err=True)
        return 2
    return result if isinstance(result, int) else 0


def main():
    """Entry point for the CLI."""
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
