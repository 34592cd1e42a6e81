"""Ablation runner: features -> tuned linear probe -> report rows."""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from time import perf_counter
from typing import Literal

import numpy as np
import pandas as pd

from nrflab.cache import load_features, save_features
from nrflab.constants import DATA_DIR, REPORT_FLOAT_FORMAT, TRIAL_SEED_STRIDE, UINT64_MASK
from nrflab.datasets import (
    DatasetSplit,
    load_cifar10,
    load_cifar100,
    load_mnist_idx,
    normalize_pair,
    split_indices,
    subsample,
    synth_blobs,
)
from nrflab.errors import ConfigError, StaleCacheError
from nrflab.features import FeatureMatrix, extract_features
from nrflab.models.architecture import ArchitectureSpec
from nrflab.models.experiment import CellAggregate, DatasetSpec, ExperimentConfig, ProbeSettings, Report, ReportRow
from nrflab.probe import accuracy, train_probe, tune_l2

logger = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "dataset",
    "arch",
    "init",
    "activation",
    "n",
    "trial",
    "train_acc",
    "test_acc",
    "best_l2",
    "wall_time_s",
]
CELL_KEYS = ["dataset", "arch", "init", "activation", "n"]
RAW_BASELINE = "raw"


def trial_seed(base_seed: int, trial: int) -> int:
    """Base seed of trial ``t``: ``base_seed + t * 2**32`` (mod 2**64)."""
    return (base_seed + trial * TRIAL_SEED_STRIDE) & UINT64_MASK


def load_dataset(spec: DatasetSpec, data_dir: Path | None = None) -> tuple[DatasetSplit, DatasetSplit]:
    """Load, subsample and normalize the train/test splits a ``DatasetSpec`` describes."""
    directory = spec.dir or (Path(data_dir) if data_dir is not None else DATA_DIR / spec.name)
    match spec.name:
        case "cifar10":
            train, test = load_cifar10(directory)
        case "cifar100":
            train, test = load_cifar100(directory, label_mode=spec.label_mode)
        case "mnist":
            train, test = load_mnist_idx(directory)
        case "blobs":
            train, test = synth_blobs(
                spec.blob_classes, spec.blob_per_class, spec.blob_dim, spec.blob_separation, spec.blob_seed
            )
        case _:
            raise ConfigError(f"unknown dataset {spec.name!r}")
    if spec.subsample is not None:
        train = subsample(train, spec.subsample, spec.subsample_seed)
    if spec.test_subsample is not None:
        test = subsample(test, spec.test_subsample, spec.subsample_seed)
    return normalize_pair(train, test, spec.normalize)


@dataclass(frozen=True, slots=True)
class ExperimentCell:
    """One grid coordinate. ``arch`` is None for the raw-input baseline."""

    dataset: str
    arch: ArchitectureSpec | None
    n: int
    trial: int
    base_seed: int
    probe: ProbeSettings


def _row_labels(cell: ExperimentCell) -> dict:
    if cell.arch is None:
        return {"arch": RAW_BASELINE, "init": "-", "activation": "-"}
    return {
        "arch": cell.arch.identifier,
        "init": cell.arch.resolved_init.label,
        "activation": cell.arch.resolved_activation.label,
    }


def run_experiment(
    cell: ExperimentCell,
    train: DatasetSplit,
    test: DatasetSplit,
    *,
    train_features: FeatureMatrix | None = None,
    test_features: FeatureMatrix | None = None,
    workers: int = 1,
    record_timing: bool = False,
) -> ReportRow:
    """Run one cell: embed train and test with the same networks, tune l2 on a held-out part of
    train, refit on all of train, and report both accuracies.

    Precomputed features wider than ``cell.n`` are cut down to their first ``cell.n`` networks.
    Failures inside the cell come back as a row with ``error`` set.

    Raises:
        ConfigError: the cell itself is invalid (e.g. ``n < 1``).
    """
    if cell.n < 1:
        raise ConfigError(f"feature dimension must be at least 1, got n={cell.n}")
    labels = _row_labels(cell)
    start = perf_counter()
    try:
        if cell.arch is None:
            x_train, x_test = train.flat(), test.flat()
        else:
            if train_features is None:
                train_features = extract_features(
                    cell.arch, train.images, cell.n, cell.base_seed,
                    dataset_fingerprint=train.fingerprint, workers=workers,
                )  # fmt: skip
            if test_features is None:
                test_features = extract_features(
                    cell.arch, test.images, cell.n, cell.base_seed,
                    dataset_fingerprint=test.fingerprint, workers=workers,
                )  # fmt: skip
            train_features = train_features.prefix(cell.n) if train_features.n > cell.n else train_features
            test_features = test_features.prefix(cell.n) if test_features.n > cell.n else test_features
            for fm in (train_features, test_features):
                if (fm.manifest.arch, fm.manifest.base_seed, fm.n) != (cell.arch, cell.base_seed, cell.n):
                    raise ValueError("train and test features must come from the cell's own networks")
            x_train, x_test = train_features.values, test_features.values

        settings = cell.probe
        num_classes = train.num_classes
        fit_idx, val_idx = split_indices(len(train), settings.validation_fraction, cell.base_seed)
        best_l2, _ = tune_l2(
            x_train[fit_idx], train.labels[fit_idx],
            x_train[val_idx], train.labels[val_idx],
            settings.l2_grid, settings.opt,
            num_classes=num_classes, standardize=settings.standardize, workers=workers,
        )  # fmt: skip
        model = train_probe(
            x_train, train.labels, best_l2, settings.opt, num_classes=num_classes, standardize=settings.standardize
        )
        row = ReportRow(
            dataset=cell.dataset,
            n=cell.n if cell.arch is not None else x_train.shape[1],
            trial=cell.trial,
            train_acc=accuracy(model, x_train, train.labels),
            test_acc=accuracy(model, x_test, test.labels),
            best_l2=best_l2,
            base_seed=cell.base_seed,
            **labels,
        )
    except Exception as e:
        logger.exception(f"cell {labels['arch']} n={cell.n} trial={cell.trial} failed")
        row = ReportRow(
            dataset=cell.dataset,
            n=cell.n,
            trial=cell.trial,
            base_seed=cell.base_seed,
            error=f"{type(e).__name__}: {e}",
            **labels,
        )
    elapsed = perf_counter() - start
    logger.info(
        f"{row.arch} n={row.n} trial={row.trial}: train={row.train_acc} test={row.test_acc} "
        f"l2={row.best_l2} ({elapsed:.1f}s)"
    )
    if record_timing:
        row = row.model_copy(update={"wall_time_s": elapsed})
    return row


def cache_key(arch: ArchitectureSpec) -> str:
    """Filename-safe key that distinguishes every architecture setting."""
    digest = hashlib.blake2b(arch.model_dump_json().encode("utf-8"), digest_size=6).hexdigest()
    return f"{arch.identifier}-{digest}"


def _cached_features(
    arch: ArchitectureSpec,
    split: DatasetSplit,
    split_name: str,
    n: int,
    seed: int,
    cache_dir: Path | None,
    workers: int,
) -> FeatureMatrix:
    path = cache_dir / f"{cache_key(arch)}-s{seed}-n{n}-{split_name}.nrf" if cache_dir is not None else None
    if path is not None and path.is_file():
        try:
            features = load_features(path, expected_fingerprint=split.fingerprint)
            if features.manifest.arch == arch and features.manifest.base_seed == seed and features.n == n:
                logger.info(f"reusing cached features {path.name}")
                return features
            logger.warning(f"cache {path.name} doesn't match its key; recomputing")
        except StaleCacheError as e:
            logger.warning(f"{e}; recomputing")
    features = extract_features(arch, split.images, n, seed, dataset_fingerprint=split.fingerprint, workers=workers)
    if path is not None:
        save_features(features, path)
    return features


def aggregate_rows(rows: list[ReportRow]) -> list[CellAggregate]:
    """Mean and (population) std of accuracies per grid cell, over trials."""
    if not rows:
        return []
    frame = pd.DataFrame([row.model_dump() for row in rows])
    for column in ("train_acc", "test_acc"):
        frame[column] = pd.to_numeric(frame[column], errors="coerce")
    frame["failed"] = frame["error"].notna()
    grouped = frame.groupby(CELL_KEYS, sort=False, dropna=False)
    stats = grouped.agg(
        trials=("trial", "count"),
        train_acc_mean=("train_acc", "mean"),
        train_acc_std=("train_acc", lambda s: s.std(ddof=0)),
        test_acc_mean=("test_acc", "mean"),
        test_acc_std=("test_acc", lambda s: s.std(ddof=0)),
        failures=("failed", "sum"),
    ).reset_index()

    aggregates = []
    for record in stats.to_dict(orient="records"):
        # numpy scalars -> python, NaN (all trials failed) -> None
        clean = {key: value.item() if isinstance(value, np.generic) else value for key, value in record.items()}
        clean = {key: None if isinstance(value, float) and np.isnan(value) else value for key, value in clean.items()}
        aggregates.append(CellAggregate.model_validate(clean))
    return aggregates


def run_ablation(
    config: ExperimentConfig,
    *,
    data_dir: Path | None = None,
    workers: int | None = None,
    cache_dir: Path | None = None,
) -> Report:
    """Run every (architecture, n, trial) cell of ``config``.

    Features are extracted once per (architecture, trial) at the largest n and narrower cells use
    column prefixes of them. Trial ``t`` uses ``trial_seed(config.base_seed, t)``. Failed cells are
    kept in the report with an error tag.
    """
    workers = workers or config.workers
    train, test = load_dataset(config.dataset, data_dir)
    if cache_dir is None and config.cache_features:
        cache_dir = (config.output_dir or Path("runs") / config.name) / "features"
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)

    n_max = max(config.n_grid)
    dataset = config.dataset.name
    # filled in once the job list is known
    inner_workers = outer_workers = 1

    def arch_trial(arch_idx: int, arch: ArchitectureSpec, trial: int) -> dict[tuple, ReportRow]:
        seed = trial_seed(config.base_seed, trial)
        rows: dict[tuple, ReportRow] = {}
        try:
            train_fm = _cached_features(arch, train, "train", n_max, seed, cache_dir, inner_workers)
            test_fm = _cached_features(arch, test, "test", n_max, seed, cache_dir, inner_workers)
        except Exception as e:
            logger.exception(f"feature extraction for {arch.identifier} trial {trial} failed")
            for n_idx, n in enumerate(config.n_grid):
                cell = ExperimentCell(dataset, arch, n, trial, seed, config.probe)
                rows[(arch_idx, n_idx, trial)] = ReportRow(
                    dataset=dataset, n=n, trial=trial, base_seed=seed,
                    error=f"{type(e).__name__}: {e}", **_row_labels(cell),
                )  # fmt: skip
            return rows
        for n_idx, n in enumerate(config.n_grid):
            cell = ExperimentCell(dataset, arch, n, trial, seed, config.probe)
            rows[(arch_idx, n_idx, trial)] = run_experiment(
                cell, train, test,
                train_features=train_fm, test_features=test_fm,
                workers=inner_workers, record_timing=config.record_timing,
            )  # fmt: skip
        return rows

    def raw_baseline(trial: int) -> dict[tuple, ReportRow]:
        seed = trial_seed(config.base_seed, trial)
        cell = ExperimentCell(dataset, None, int(np.prod(train.image_shape)), trial, seed, config.probe)
        row = run_experiment(cell, train, test, workers=inner_workers, record_timing=config.record_timing)
        return {(-1, 0, trial): row}

    jobs = []
    if config.include_raw_baseline:
        jobs += [(raw_baseline, (trial,)) for trial in range(config.trials)]
    jobs += [
        (arch_trial, (arch_idx, arch, trial))
        for arch_idx, arch in enumerate(config.archs)
        for trial in range(config.trials)
    ]
    # several jobs: run them side by side, single-threaded inside; one job: parallelize its columns
    if len(jobs) > 1:
        outer_workers = workers
    else:
        inner_workers = workers
    logger.info(
        f"ablation {config.name!r}: {len(config.archs)} archs x {len(config.n_grid)} n x {config.trials} trials "
        f"on {dataset} ({len(train)} train / {len(test)} test)"
    )

    collected: dict[tuple, ReportRow] = {}
    if outer_workers > 1:
        with ThreadPoolExecutor(max_workers=outer_workers, thread_name_prefix="cell") as pool:
            for result in pool.map(lambda job: job[0](*job[1]), jobs):
                collected.update(result)
    else:
        for fn, args in jobs:
            collected.update(fn(*args))

    # rows are keyed by grid coordinates, so the order doesn't depend on scheduling
    rows = [collected[key] for key in sorted(collected)]
    failures = sum(row.error is not None for row in rows)
    if failures:
        logger.warning(f"{failures} of {len(rows)} cells failed; see the error column")
    return Report(name=config.name, config=config, rows=rows, aggregates=aggregate_rows(rows))


def report_frame(report: Report) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in report.rows], columns=list(ReportRow.model_fields))
    return frame[REPORT_COLUMNS]


def emit_report(report: Report, format: Literal["csv", "json"], path: Path) -> Path:
    """Write a report as CSV (fixed header, 6 significant digits) or JSON (rows plus aggregates)."""
    if not report.rows:
        raise ValueError("refusing to write an empty report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    match format:
        case "csv":
            report_frame(report).to_csv(path, index=False, float_format=REPORT_FLOAT_FORMAT, lineterminator="\n")
        case "json":
            path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        case _:
            raise ValueError(f"unknown report format {format!r}")
    logger.info(f"wrote {len(report.rows)}-row report to {path}")
    return path


def load_report(path: Path) -> Report:
    return Report.model_validate_json(Path(path).read_text(encoding="utf-8"))
