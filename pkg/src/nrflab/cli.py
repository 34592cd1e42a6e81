"""Command-line interface: ``nrflab <command> --help`` for details."""

import asyncio
import functools
import logging
from pathlib import Path
from typing import Annotated

import numpy as np
import pandas as pd
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from nrflab.cache import load_features, load_probe, save_features, save_probe
from nrflab.constants import DATA_DIR, DEFAULT_L2_GRID, DEFAULT_VALIDATION_FRACTION, OUTPUT_DIR, REPORT_FLOAT_FORMAT
from nrflab.datasets import NormalizeMode, split_indices
from nrflab.errors import ConfigError, NrfLabError
from nrflab.features import estimate_kernel, extract_features
from nrflab.fetcher import DATASET_URLS, SkipMode, fetch_dataset
from nrflab.harness import emit_report, load_dataset, run_ablation
from nrflab.models.architecture import ActivationKind, make_architecture
from nrflab.models.experiment import DatasetSpec, ExperimentConfig
from nrflab.probe import OptSettings, accuracy, class_cosine, probability_frame, top_bottom_classes, train_probe, tune_l2
from nrflab.rng import InitKind, InitScheme

logger = logging.getLogger(__name__)

app = typer.Typer(no_args_is_help=True, add_completion=False, help="Neural random features and linear probes.")
console = Console(stderr=True)

DatasetOpt = Annotated[str, typer.Option("--dataset", "-d", help="cifar10, cifar100, mnist or blobs")]
DataDirOpt = Annotated[
    Path | None,
    typer.Option("--data-dir", envvar="NRFLAB_DATA_DIR", help="dataset directory (default: $NRFLAB_DATA_DIR/<name>)"),
]
SubsampleOpt = Annotated[int | None, typer.Option(help="train examples per class")]
TestSubsampleOpt = Annotated[int | None, typer.Option(help="test examples per class")]
NormalizeOpt = Annotated[NormalizeMode, typer.Option(help="input preprocessing")]
PresetOpt = Annotated[str, typer.Option("--arch", "-a", help="architecture preset")]
ActivationOpt = Annotated[str | None, typer.Option(help="activation override, e.g. leaky_relu:0.1")]
InitOpt = Annotated[InitKind | None, typer.Option("--init", help="initializer override")]
SeedOpt = Annotated[int, typer.Option("--seed", "-s", help="base seed of the network streams")]
WorkersOpt = Annotated[int, typer.Option("--workers", "-j", min=1, help="worker threads")]


def _reports_errors(func):
    """Turn library errors into a short message and exit status 1."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ValidationError as e:
            error = ConfigError(f"invalid options: {e}")
            console.print(f"[bold red]error:[/] {error}")
            raise typer.Exit(code=1) from error
        except (NrfLabError, FileNotFoundError) as e:
            console.print(f"[bold red]error:[/] {e}")
            raise typer.Exit(code=1) from e

    return wrapper


def _dataset_spec(
    name: str, data_dir: Path | None, subsample: int | None, test_subsample: int | None, normalize: NormalizeMode
) -> DatasetSpec:
    try:
        return DatasetSpec(
            name=name, dir=data_dir, subsample=subsample, test_subsample=test_subsample, normalize=normalize
        )
    except ValueError as e:
        raise ConfigError(f"invalid dataset options: {e}") from e


def _mean_std(mean: float | None, std: float | None) -> str:
    return "-" if mean is None else f"{mean:.4f} ± {std:.4f}"


def _architecture(preset: str, activation: str | None, init: InitKind | None, output_dim: int = 1):
    overrides = {"output_dim": output_dim}
    if activation is not None:
        overrides["activation_override"] = ActivationKind.parse(activation)
    if init is not None:
        overrides["init_scheme"] = InitScheme(kind=init)
    return make_architecture(preset, **overrides)


@app.command()
@_reports_errors
def extract(
    dataset: DatasetOpt,
    arch: PresetOpt,
    n: Annotated[int, typer.Option("-n", min=1, help="number of sampled networks")],
    out: Annotated[Path, typer.Option("--out", "-o", help="directory for train.nrf and test.nrf")],
    seed: SeedOpt = 0,
    activation: ActivationOpt = None,
    init: InitOpt = None,
    data_dir: DataDirOpt = None,
    subsample: SubsampleOpt = None,
    test_subsample: TestSubsampleOpt = None,
    normalize: NormalizeOpt = NormalizeMode.UNIT_RANGE,
    workers: WorkersOpt = 1,
):
    """Embed the train and test splits with n random networks and cache the features."""
    spec = _dataset_spec(dataset, data_dir, subsample, test_subsample, normalize)
    architecture = _architecture(arch, activation, init)
    train, test = load_dataset(spec)
    for split_name, split in (("train", train), ("test", test)):
        features = extract_features(
            architecture, split.images, n, seed, dataset_fingerprint=split.fingerprint, workers=workers
        )
        save_features(features, out / f"{split_name}.nrf")
    console.print(f"[green]wrote[/] {architecture.identifier} features (n={n}, seed={seed}) to {out}")


@app.command()
@_reports_errors
def kernel(
    dataset: DatasetOpt,
    arch: PresetOpt,
    first: Annotated[int, typer.Argument(help="index of the first example")],
    second: Annotated[int, typer.Argument(help="index of the second example")],
    n: Annotated[int, typer.Option("-n", min=1, help="number of sampled networks")] = 1024,
    seed: SeedOpt = 0,
    split: Annotated[str, typer.Option(help="train or test")] = "train",
    activation: ActivationOpt = None,
    init: InitOpt = None,
    data_dir: DataDirOpt = None,
    normalize: NormalizeOpt = NormalizeMode.UNIT_RANGE,
    workers: WorkersOpt = 1,
):
    """Monte-Carlo estimate of the prior kernel between two examples."""
    spec = _dataset_spec(dataset, data_dir, None, None, normalize)
    architecture = _architecture(arch, activation, init)
    train, test = load_dataset(spec)
    data = {"train": train, "test": test}.get(split)
    if data is None:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    for index in (first, second):
        if not 0 <= index < len(data):
            raise ConfigError(f"example index {index} out of range for {len(data)} {split} examples")
    estimate = estimate_kernel(architecture, data.images[first], data.images[second], n, seed, workers=workers)
    table = Table(title=f"{architecture.identifier}, {split}[{first}] vs {split}[{second}]")
    for column in ("n", "kernel", "variance", "std error"):
        table.add_column(column, justify="right")
    table.add_row(str(estimate.n), f"{estimate.value:.6g}", f"{estimate.variance:.6g}", f"{estimate.standard_error:.3g}")
    Console().print(table)


@app.command()
@_reports_errors
def probe(
    dataset: DatasetOpt,
    features: Annotated[Path, typer.Option("--features", "-f", help="directory written by `extract`")],
    out: Annotated[Path | None, typer.Option("--out", "-o", help="where to save the probe model")] = None,
    l2: Annotated[list[float] | None, typer.Option(help="l2 values to tune over; repeat the flag")] = None,
    seed: Annotated[int, typer.Option("--seed", "-s", help="seed of the validation split")] = 0,
    data_dir: DataDirOpt = None,
    subsample: SubsampleOpt = None,
    test_subsample: TestSubsampleOpt = None,
    normalize: NormalizeOpt = NormalizeMode.UNIT_RANGE,
    max_iterations: Annotated[int, typer.Option(min=1)] = OptSettings().max_iterations,
    workers: WorkersOpt = 1,
):
    """Train a linear probe on cached features and report train/test accuracy."""
    spec = _dataset_spec(dataset, data_dir, subsample, test_subsample, normalize)
    train, test = load_dataset(spec)
    train_fm = load_features(features / "train.nrf", expected_fingerprint=train.fingerprint)
    test_fm = load_features(features / "test.nrf", expected_fingerprint=test.fingerprint)
    if train_fm.manifest.model_copy(update={"dataset_fingerprint": 0}) != test_fm.manifest.model_copy(
        update={"dataset_fingerprint": 0}
    ):
        raise ConfigError("train and test features were extracted with different networks")

    opt = OptSettings(max_iterations=max_iterations)
    grid = l2 or DEFAULT_L2_GRID
    x_train = train_fm.values
    fit_idx, val_idx = split_indices(len(train), DEFAULT_VALIDATION_FRACTION, seed)
    best_l2, _ = tune_l2(
        x_train[fit_idx], train.labels[fit_idx], x_train[val_idx], train.labels[val_idx],
        grid, opt, num_classes=train.num_classes, workers=workers,
    )  # fmt: skip
    model = train_probe(x_train, train.labels, best_l2, opt, num_classes=train.num_classes)
    train_acc = accuracy(model, x_train, train.labels)
    test_acc = accuracy(model, test_fm.values, test.labels)
    console.print(
        f"{train_fm.manifest.arch.identifier} n={train_fm.n}: train {train_acc:.4f}, test {test_acc:.4f}, "
        f"l2={best_l2:g}"
    )
    if out is not None:
        save_probe(model, out)


@app.command()
@_reports_errors
def ablate(
    config: Annotated[Path, typer.Option("--config", "-c", help="experiment config (JSON)")],
    out: Annotated[Path | None, typer.Option("--out", "-o", help="output directory")] = None,
    format: Annotated[str, typer.Option("--format", help="csv or json")] = "csv",
    seed: Annotated[int | None, typer.Option("--seed", "-s", help="override the config's base seed")] = None,
    workers: Annotated[int | None, typer.Option("--workers", "-j", min=1, help="override the config's workers")] = None,
    data_dir: DataDirOpt = None,
):
    """Run an ablation grid and write its report."""
    if format not in ("csv", "json"):
        raise ConfigError(f"format must be 'csv' or 'json', got {format!r}")
    experiment = ExperimentConfig.from_file(config)
    updates = {}
    if seed is not None:
        updates["base_seed"] = seed
    if out is not None:
        updates["output_dir"] = out
    if updates:
        experiment = ExperimentConfig.from_dict({**experiment.model_dump(mode="json"), **updates})
    output_dir = experiment.output_dir or OUTPUT_DIR / experiment.name

    report = run_ablation(experiment, data_dir=data_dir, workers=workers)
    path = emit_report(report, format, output_dir / f"report.{format}")

    table = Table(title=experiment.name)
    for column in ("arch", "init", "activation", "n", "trials", "train", "test", "failed"):
        table.add_column(column, justify="left" if column in ("arch", "init", "activation") else "right")
    for agg in report.aggregates:
        table.add_row(
            agg.arch, agg.init, agg.activation, str(agg.n), str(agg.trials),
            _mean_std(agg.train_acc_mean, agg.train_acc_std), _mean_std(agg.test_acc_mean, agg.test_acc_std),
            str(agg.failures),
        )  # fmt: skip
    Console().print(table)
    console.print(f"[green]report written to[/] {path}")


@app.command()
@_reports_errors
def cosine(
    model: Annotated[Path, typer.Option("--model", "-m", help="probe model written by `probe --out`")],
    out: Annotated[Path, typer.Option("--out", "-o", help="CSV file for the class-similarity matrix")],
    top: Annotated[int, typer.Option("-k", min=1, help="how many most/least similar classes to list")] = 3,
    dataset: Annotated[str | None, typer.Option("--dataset", "-d", help="load class names from this dataset")] = None,
    data_dir: DataDirOpt = None,
):
    """Cosine similarity between the class weight vectors of a probe."""
    probe_model = load_probe(model)
    names = [str(i) for i in range(probe_model.num_classes)]
    if dataset is not None:
        train, _ = load_dataset(_dataset_spec(dataset, data_dir, None, None, NormalizeMode.NONE))
        names = list(train.class_names)
    cos = class_cosine(probe_model)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(cos, index=names, columns=names).to_csv(out, float_format=REPORT_FLOAT_FORMAT, lineterminator="\n")

    count = min(top, probe_model.num_classes - 1)
    table = Table(title="class similarity")
    for column in ("class", "most similar", "least similar"):
        table.add_column(column)
    for cls, name in enumerate(names):
        most, least = top_bottom_classes(cos, cls, count)
        table.add_row(name, ", ".join(names[j] for j in most), ", ".join(names[j] for j in least))
    Console().print(table)
    console.print(f"[green]wrote[/] {out}")


@app.command()
@_reports_errors
def proba(
    model: Annotated[Path, typer.Option("--model", "-m", help="probe model written by `probe --out`")],
    features: Annotated[Path, typer.Option("--features", "-f", help="feature cache (.nrf)")],
    out: Annotated[Path, typer.Option("--out", "-o", help="CSV file for the probabilities")],
):
    """Per-example class probabilities of a probe, for external plotting."""
    probe_model = load_probe(model)
    frame = probability_frame(probe_model, load_features(features))
    frame.insert(0, "predicted", np.argmax(frame.to_numpy(), axis=1))
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index_label="example", float_format=REPORT_FLOAT_FORMAT, lineterminator="\n")
    console.print(f"[green]wrote[/] {len(frame)} rows to {out}")


@app.command()
@_reports_errors
def fetch(
    name: Annotated[str, typer.Argument(help=f"one of {', '.join(DATASET_URLS)}")],
    data_dir: DataDirOpt = None,
    skip_mode: Annotated[SkipMode, typer.Option(help="when to skip files already present")] = SkipMode.CHECK,
):
    """Download and unpack a dataset."""
    if name not in DATASET_URLS:
        raise ConfigError(f"no download source for {name!r}; known: {', '.join(DATASET_URLS)}")
    directory = data_dir or DATA_DIR / name
    try:
        paths = asyncio.run(fetch_dataset(name, directory, skip_mode))
    except RuntimeError as e:
        console.print(f"[bold red]error:[/] {e}")
        raise typer.Exit(code=1) from e
    console.print(f"[green]{name}[/] ready in {directory} ({len(paths)} files)")


def main():
    app()


if __name__ == "__main__":
    main()
