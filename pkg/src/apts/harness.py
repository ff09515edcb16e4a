"""Experiment harness: config files, seeded trials, CSV persistence.

Configs are flat INI files with one section per concern (``[experiment]``,
``[model]``, ``[data]``, ``[batches]``, ``[tr]``, ``[apts]``, ``[sgd]``,
``[adam]``, ...).  Trial ``t`` derives every seed from ``master_seed + t``,
so a run is reproducible byte-for-byte from (config, master seed); only the
wall-clock column is exempt from that guarantee.
"""

from __future__ import annotations

import configparser
import csv
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import BaselineConfig, run_baseline
from .core import AptsConfig, EpochMetrics, MaskedObjective, run_apts
from .data import Dataset, load_idx, make_batches, make_image_blobs, make_synthetic
from .model import MlpSpec, evaluate, init_params
from .trloop import TrConfig, tr_step

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EpochRecord",
    "TrialResult",
    "ExperimentResult",
    "load_config",
    "run_experiment",
    "compare",
    "DATA_DIR_ENV",
    "EPOCH_COLUMNS",
]

DATA_DIR_ENV = "APTS_DATA_DIR"

EPOCH_COLUMNS = (
    "trial",
    "epoch",
    "train_loss",
    "test_loss",
    "test_accuracy",
    "global_radius",
    "fdl_activations",
    "wall_seconds",
)

STEP_COLUMNS = (
    "trial",
    "step",
    "loss_before",
    "loss_half",
    "loss_after",
    "rho",
    "delta_before",
    "delta_after",
    "precond_norm_inf",
    "global_accepted",
    "fdl_activations",
    "fdl_final_w",
    "fdl_final_delta",
    "local_iterations",
    "converged",
)

OPTIMIZERS = ("apts", "sapts", "tr", "gd", "sgd", "adam")


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass(frozen=True)
class EpochRecord:
    trial: int
    epoch: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    global_radius: float
    fdl_activations: int
    wall_seconds: float

    def row(self) -> List[str]:
        return [
            str(self.trial),
            str(self.epoch),
            repr(float(self.train_loss)),
            repr(float(self.test_loss)),
            repr(float(self.test_accuracy)),
            repr(float(self.global_radius)),
            str(self.fdl_activations),
            repr(float(self.wall_seconds)),
        ]


@dataclass(frozen=True)
class ExperimentConfig:
    label: str
    optimizer: str
    epochs: int
    trials: int
    master_seed: int
    out_dir: str
    model_widths: Tuple[int, ...]
    data: Dict[str, str]
    batch_count: int
    overlap: float
    tr: TrConfig
    subdomains: int
    local_iters: int
    fdl: bool
    workers: int
    baseline: Optional[BaselineConfig]

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def _get(section, key, cast, default=None, *, where=""):
    if key not in section:
        if default is None:
            raise ConfigError(f"missing key {key!r} in section {where or section}")
        return default
    raw = section[key]
    try:
        if cast is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}.{key}: {raw!r}") from exc


def load_config(path) -> ExperimentConfig:
    """Parse an experiment INI file (with line diagnostics on errors)."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as handle:
            parser.read_file(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    if "experiment" not in parser:
        raise ConfigError(f"{path}: missing [experiment] section")
    exp = parser["experiment"]
    optimizer = _get(exp, "optimizer", str, where="experiment")
    label = _get(exp, "label", str, optimizer, where="experiment")

    model = parser["model"] if "model" in parser else {}
    widths_raw = _get(model, "layer_widths", str, "784,32,32,10", where="model")
    try:
        widths = tuple(int(w) for w in widths_raw.replace(" ", "").split(",") if w)
    except ValueError:
        raise ConfigError(f"bad model.layer_widths: {widths_raw!r}")

    data = dict(parser["data"]) if "data" in parser else {}
    if "source" not in data:
        raise ConfigError("missing data.source")

    batches = parser["batches"] if "batches" in parser else {}
    batch_count = _get(batches, "count", int, 1, where="batches")
    overlap = _get(batches, "overlap", float, 0.0, where="batches")

    tr_sec = parser["tr"] if "tr" in parser else {}
    tr = TrConfig(
        delta_init=_get(tr_sec, "delta_init", float, 1e-2, where="tr"),
        delta_min=_get(tr_sec, "delta_min", float, 1e-4, where="tr"),
        delta_max=_get(tr_sec, "delta_max", float, 1e-1, where="tr"),
        eta1=_get(tr_sec, "eta1", float, 0.25, where="tr"),
        eta2=_get(tr_sec, "eta2", float, 0.75, where="tr"),
        alpha=_get(tr_sec, "alpha", float, 0.5, where="tr"),
        beta=_get(tr_sec, "beta", float, 2.0, where="tr"),
        order=_get(tr_sec, "order", int, 1, where="tr"),
        history=_get(tr_sec, "history", int, 5, where="tr"),
    )

    apts_sec = parser["apts"] if "apts" in parser else {}
    subdomains = _get(apts_sec, "subdomains", int, 2, where="apts")
    local_iters = _get(apts_sec, "local_iters", int, 5, where="apts")
    fdl = _get(apts_sec, "fdl", bool, False, where="apts")
    workers = _get(apts_sec, "workers", int, 0, where="apts")

    baseline = None
    if optimizer in ("gd", "sgd", "adam"):
        sec = parser[optimizer] if optimizer in parser else {}
        defaults = {"gd": 0.1, "sgd": 0.1, "adam": 1e-3}
        baseline = BaselineConfig(
            kind="sgd" if optimizer == "gd" else optimizer,
            learning_rate=_get(sec, "learning_rate", float, defaults[optimizer], where=optimizer),
            momentum=_get(sec, "momentum", float, 0.0, where=optimizer),
            beta1=_get(sec, "beta1", float, 0.9, where=optimizer),
            beta2=_get(sec, "beta2", float, 0.999, where=optimizer),
            epsilon=_get(sec, "epsilon", float, 1e-8, where=optimizer),
        )

    config = ExperimentConfig(
        label=label,
        optimizer=optimizer,
        epochs=_get(exp, "epochs", int, 10, where="experiment"),
        trials=_get(exp, "trials", int, 1, where="experiment"),
        master_seed=_get(exp, "master_seed", int, 0, where="experiment"),
        out_dir=_get(exp, "out_dir", str, "results", where="experiment"),
        model_widths=widths,
        data=data,
        batch_count=batch_count,
        overlap=overlap,
        tr=tr,
        subdomains=subdomains,
        local_iters=local_iters,
        fdl=fdl,
        workers=workers,
        baseline=baseline,
    )
    _check_paths(config)
    return config


def _data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


def _check_paths(config: ExperimentConfig):
    if config.data.get("source") != "idx":
        return
    for key in ("train_images", "train_labels"):
        if key not in config.data:
            raise ConfigError(f"idx source needs data.{key}")
        path = _data_dir() / config.data[key]
        if not path.exists():
            raise ConfigError(f"dataset file does not exist: {path}")


def build_datasets(config: ExperimentConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Materialize (train, test) from the [data] section."""
    data = config.data
    source = data["source"]
    if source == "idx":
        train = load_idx(
            _data_dir() / data["train_images"], _data_dir() / data["train_labels"]
        )
        test = None
        if "test_images" in data:
            test = load_idx(
                _data_dir() / data["test_images"], _data_dir() / data["test_labels"]
            )
        if "train_limit" in data:
            train = train.subset(int(data["train_limit"]))
        if test is not None and "test_limit" in data:
            test = test.subset(int(data["test_limit"]))
        return train, test

    train_size = int(data.get("train_size", 1000))
    test_size = int(data.get("test_size", 0))
    seed = int(data.get("seed", 0))
    total = train_size + test_size
    if source == "image_blobs":
        noise = float(data.get("noise", 0.35))
        full = make_image_blobs(total, seed, noise=noise)
    elif source in ("two_gaussians", "xor", "spiral"):
        noise = float(data.get("noise", 0.1))
        full = make_synthetic(source, total, seed, noise=noise)
    else:
        raise ConfigError(f"unknown data source {source!r}")
    train = full.subset(train_size, name=f"{full.name}/train")
    test = full.subset(test_size, offset=train_size, name=f"{full.name}/test") if test_size else None
    return train, test


@dataclass
class TrialResult:
    trial: int
    records: List[EpochRecord]
    step_rows: List[List[str]]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trials: List[TrialResult]
    trial_paths: List[Path]
    summary_path: Path


def _run_tr_trial(train, test, spec, config: ExperimentConfig) -> List[EpochMetrics]:
    """Standalone TR baseline: one TR iteration per batch per epoch, same
    settings as the global TR inside the preconditioned runs."""
    params = init_params(spec)
    plan = make_batches(train, config.batch_count, config.overlap, seed=int(config.data.get("seed", 0)))
    state = config.tr.initial_state()
    train_batch = train.batch()
    test_batch = test.batch() if test is not None else None
    mask = frozenset(range(len(params.segments)))

    def snapshot(epoch: int, wall: float) -> EpochMetrics:
        train_loss, _ = evaluate(params, train_batch)
        if test_batch is not None:
            test_loss, test_acc = evaluate(params, test_batch)
        else:
            test_loss, test_acc = float("nan"), float("nan")
        return EpochMetrics(epoch, train_loss, test_loss, test_acc, state.delta, 0, wall)

    records = [snapshot(0, 0.0)]
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        for indices in plan:
            objective = MaskedObjective(params, train.batch(indices), mask)
            result = tr_step(params.values, objective, state, config.tr)
            params = replace(params, values=result.params)
            state = result.state
        records.append(snapshot(epoch, time.perf_counter() - started))
    return records


def _run_trial(config: ExperimentConfig, trial: int, train, test) -> TrialResult:
    trial_seed = config.master_seed + trial
    spec = MlpSpec(config.model_widths, seed=trial_seed)
    data_seed = int(config.data.get("seed", 0))
    step_rows: List[List[str]] = []

    if config.optimizer in ("apts", "sapts"):
        if config.optimizer == "apts":
            plan = make_batches(train, 1, 0.0, seed=data_seed)
        else:
            plan = make_batches(train, config.batch_count, config.overlap, seed=data_seed)
        apts_cfg = AptsConfig(
            tr=config.tr,
            subdomain_count=config.subdomains,
            partition_seed=trial_seed,
            local_iters=config.local_iters,
            fdl=config.fdl,
            workers=config.workers,
        )
        run = run_apts(train, spec, apts_cfg, config.epochs, plan=plan, test=test)
        metrics = run.epochs
        for k, rec in enumerate(run.steps):
            step_rows.append(
                [
                    str(trial),
                    str(k),
                    repr(float(rec.loss_before)),
                    repr(float(rec.loss_half)),
                    repr(float(rec.loss_after)),
                    repr(float(rec.rho)),
                    repr(float(rec.delta_before)),
                    repr(float(rec.delta_after)),
                    repr(float(rec.precond_norm_inf)),
                    str(rec.global_accepted),
                    str(rec.fdl.activations),
                    repr(float(rec.fdl.final_w)),
                    repr(float(rec.fdl.final_delta)),
                    ";".join(str(i) for i in rec.local_iterations),
                    str(rec.converged),
                ]
            )
    elif config.optimizer == "tr":
        metrics = _run_tr_trial(train, test, spec, config)
    else:
        plan = make_batches(train, config.batch_count, config.overlap, seed=data_seed)
        baseline = replace(config.baseline, seed=trial_seed)
        run = run_baseline(train, spec, baseline, config.epochs, plan=plan, test=test)
        metrics = run.epochs

    records = [
        EpochRecord(
            trial,
            m.epoch,
            m.train_loss,
            m.test_loss,
            m.test_accuracy,
            m.global_radius,
            m.fdl_activations,
            m.wall_seconds,
        )
        for m in metrics
    ]
    return TrialResult(trial, records, step_rows)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _summary_rows(trials: List[TrialResult]) -> List[List[str]]:
    by_epoch: Dict[int, List[EpochRecord]] = {}
    for result in trials:
        for record in result.records:
            by_epoch.setdefault(record.epoch, []).append(record)
    rows = []
    for epoch in sorted(by_epoch):
        group = by_epoch[epoch]
        row = [str(epoch)]
        for attr in ("train_loss", "test_loss", "test_accuracy"):
            values = np.array([getattr(r, attr) for r in group], dtype=float)
            row.extend(
                [repr(float(values.mean())), repr(float(values.min())), repr(float(values.max()))]
            )
        rows.append(row)
    return rows


SUMMARY_COLUMNS = (
    "epoch",
    "train_loss_mean",
    "train_loss_min",
    "train_loss_max",
    "test_loss_mean",
    "test_loss_min",
    "test_loss_max",
    "test_accuracy_mean",
    "test_accuracy_min",
    "test_accuracy_max",
)


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run all trials, write per-trial and summary CSVs, return the records.

    Trial ``t`` uses seed ``master_seed + t`` for parameters and partition.
    Any trial failure propagates after the completed trials are flushed.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    train, test = build_datasets(config)
    trials: List[TrialResult] = []
    trial_paths: List[Path] = []
    for t in range(config.trials):
        result = _run_trial(config, t, train, test)
        trials.append(result)
        path = out / f"{config.label}_trial{t}.csv"
        _write_csv(path, EPOCH_COLUMNS, [r.row() for r in result.records])
        trial_paths.append(path)
        if result.step_rows:
            _write_csv(out / f"{config.label}_trial{t}_steps.csv", STEP_COLUMNS, result.step_rows)
    summary_path = out / f"{config.label}_summary.csv"
    _write_csv(summary_path, SUMMARY_COLUMNS, _summary_rows(trials))
    return ExperimentResult(config, trials, trial_paths, summary_path)


def compare(configs: Sequence[ExperimentConfig], out_dir=None) -> Path:
    """Run several configs on the same data and merge the per-epoch means
    into one table keyed by (label, epoch)."""
    if not configs:
        raise ConfigError("compare needs at least one config")
    first = configs[0]
    for other in configs[1:]:
        if other.data != first.data:
            raise ConfigError("compare requires identical [data] sections")
        if other.epochs != first.epochs:
            raise ConfigError("compare requires identical epoch counts")
    out = Path(out_dir if out_dir is not None else first.out_dir)
    rows = []
    for config in configs:
        result = run_experiment(config, out_dir=out)
        for summary_row in _summary_rows(result.trials):
            rows.append([config.label] + [summary_row[0], summary_row[1], summary_row[4], summary_row[7]])
    path = out / "compare.csv"
    _write_csv(
        path,
        ("label", "epoch", "train_loss_mean", "test_loss_mean", "test_accuracy_mean"),
        rows,
    )
    return path
