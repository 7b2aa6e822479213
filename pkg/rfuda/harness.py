"""Experiment runners behind the CLI subcommands: train, eval, ablate, synth."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from rfuda.config import RunConfig
from rfuda.dataset import Dataset, DomainSplit, domain_values, load_dataset, save_dataset, split_leave_one_out
from rfuda.errors import ConfigError, DataError
from rfuda.metrics import EvalReport, evaluate
from rfuda.model import ModelConfig, RfNet, load_checkpoint, save_checkpoint
from rfuda.optim import SgdState
from rfuda.synth import synth_generate
from rfuda.uda import EPOCH_CSV_HEADER, EpochReport, TrainConfig, pseudo_confidence_ceiling, train_epoch

logger = logging.getLogger(__name__)

EPOCHS_NAME = "epochs.csv"
CHECKPOINT_NAME = "model.ckpt"
EVAL_NAME = "eval.csv"
CONFUSION_NAME = "confusion.csv"
ABLATION_NAME = "ablation.csv"
ABLATION_HEADER = ("variant", "factor", "held_value", "seeds", "mean_target_acc", "target_accs")

EpochCallback = Callable[[EpochReport], None]


# ----------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------

def load_data(config: RunConfig) -> Dataset:
    """The configured data source: a dataset directory or the synthetic generator."""
    config.validate_data_source()
    if config.synth:
        return synth_generate(config.synth_spec(), config.seed)
    return load_dataset(config.data_dir, config.class_count or None)


def make_split(config: RunConfig, dataset: Dataset, held_value: Optional[str] = None) -> DomainSplit:
    split = split_leave_one_out(dataset, config.split_factor, held_value or config.held_value)
    if not split.source.labeled():
        raise DataError(f"no labeled source samples remain after holding out {config.split_factor}="
                        f"{held_value or config.held_value}")
    return split


# ----------------------------------------------------------------------
# Train
# ----------------------------------------------------------------------

def _configs(config: RunConfig, split: DomainSplit) -> tuple[TrainConfig, ModelConfig]:
    grid, frames = split.source.grid, split.source.frames
    return config.train_config(grid, frames), config.model_config(grid, frames, split.source.class_count)


def fit(config: RunConfig, split: DomainSplit, on_epoch: Optional[EpochCallback] = None) -> tuple[RfNet, list[EpochReport]]:
    """Initialise an RfNet from ``config.seed`` and run ``config.epochs`` epochs."""
    source, target, truth = split
    train_cfg, model_cfg = _configs(config, split)
    if train_cfg.mu and train_cfg.lambda_u:
        ceiling = pseudo_confidence_ceiling(train_cfg.lambda_u, train_cfg.eta_c, model_cfg.class_count)
        if ceiling < train_cfg.tau0:
            logger.warning("lambda_u=%g, eta_c=%g hold pseudo-labeled rows near p=%.3f, below tau0=%g; "
                           "expect few pseudo-labels", train_cfg.lambda_u, train_cfg.eta_c, ceiling, train_cfg.tau0)
    net = RfNet(model_cfg, seed=train_cfg.seed)
    state = SgdState.for_params(net.params, train_cfg.lr, train_cfg.momentum)
    reports = []
    for epoch in range(train_cfg.epochs):
        report = train_epoch(net, source, target, train_cfg, epoch, state, truth)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report)
    return net, reports


@dataclass
class TrainResult:
    net: RfNet
    reports: list[EpochReport]
    out_dir: Path
    checkpoint: Path
    epochs_csv: Path


def run_train(config: RunConfig, on_epoch: Optional[EpochCallback] = None,
              dataset: Optional[Dataset] = None) -> TrainResult:
    """Train on the configured split; writes config.resolved, epochs.csv and model.ckpt."""
    dataset = dataset if dataset is not None else load_data(config)
    split = make_split(config, dataset)
    _configs(config, split)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write_resolved(out)

    epochs_csv = out / EPOCHS_NAME
    with open(epochs_csv, "w", encoding="utf-8") as fh:
        fh.write(EPOCH_CSV_HEADER + "\n")

        def record(report: EpochReport) -> None:
            fh.write(report.csv_row() + "\n")
            fh.flush()
            if on_epoch is not None:
                on_epoch(report)

        net, reports = fit(config, split, record)

    checkpoint = out / CHECKPOINT_NAME
    save_checkpoint(net, checkpoint)
    logger.info("wrote %s and %s", epochs_csv, checkpoint)
    return TrainResult(net, reports, out, checkpoint, epochs_csv)


# ----------------------------------------------------------------------
# Eval
# ----------------------------------------------------------------------

def resolve_checkpoint(config: RunConfig, checkpoint: Optional[Union[str, Path]] = None) -> Path:
    path = Path(checkpoint or config.checkpoint or Path(config.out_dir) / CHECKPOINT_NAME)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return path


def write_eval(report: EvalReport, out_dir: Union[str, Path]) -> tuple[Path, Path]:
    """eval.csv (overall, per-class and per-domain rows) and confusion.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_csv = out / EVAL_NAME
    with open(eval_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scope", "name", "accuracy", "samples"])
        writer.writerow(["overall", "all", f"{report.accuracy:.10g}", report.sample_count])
        support = report.confusion.sum(axis=1)
        for c, acc in enumerate(report.per_class_accuracy):
            writer.writerow(["class", c, f"{acc:.10g}", int(support[c])])
        for name, acc in report.per_domain_accuracy.items():
            writer.writerow(["domain", name, f"{acc:.10g}", ""])

    confusion_csv = out / CONFUSION_NAME
    classes = range(report.confusion.shape[0])
    with open(confusion_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\pred"] + [str(c) for c in classes])
        for c in classes:
            writer.writerow([c] + [int(v) for v in report.confusion[c]])
    return eval_csv, confusion_csv


def run_eval(config: RunConfig, checkpoint: Optional[Union[str, Path]] = None,
             dataset: Optional[Dataset] = None, domain_factor: Optional[str] = None) -> EvalReport:
    """Evaluate a checkpoint on the configured target split; writes eval.csv and confusion.csv."""
    net = load_checkpoint(resolve_checkpoint(config, checkpoint))
    dataset = dataset if dataset is not None else load_data(config)
    split = make_split(config, dataset)
    if split.source.class_count != net.config.class_count:
        raise DataError(f"checkpoint has {net.config.class_count} classes, dataset has {split.source.class_count}")
    report = evaluate(net, split.target, split.target_truth, domain_factor)
    write_eval(report, config.out_dir)
    return report


# ----------------------------------------------------------------------
# Ablation
# ----------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    factor: str
    held_value: str
    seeds: tuple[int, ...]
    accuracies: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    def csv_fields(self) -> list[str]:
        return [
            self.variant, self.factor, self.held_value, " ".join(str(s) for s in self.seeds),
            f"{self.mean:.10g}", " ".join(f"{a:.10g}" for a in self.accuracies),
        ]


def ablation_variants(config: RunConfig) -> list[tuple[str, dict]]:
    """(name, overrides) pairs; the full method is included when a component is switched off."""
    variants = []
    if config.source_only:
        variants.append(("source_only", {"mu": 0}))
    if config.disable_lc:
        variants.append(("disable_lc", {"eta_c": 0.0}))
    if config.disable_augment:
        variants.append(("disable_augment", {"augment_mode": "none"}))
    if variants:
        variants.insert(0, ("full", {}))
    variants += [(f"tau0={tau:g}", {"tau0": tau}) for tau in config.threshold_sweep]
    variants += [(f"eta_c={eta:g}", {"eta_c": eta}) for eta in config.eta_sweep]
    variants += [(f"augment={mode}", {"augment_mode": mode}) for mode in config.augment_sweep]
    if not variants:
        raise ConfigError("ablation needs at least one of disable_lc, disable_augment, source_only, "
                          "threshold_sweep, eta_sweep or augment_sweep")
    return variants


def ablation_held_values(config: RunConfig, dataset: Dataset) -> list[str]:
    if config.held_values == ("all",):
        return domain_values(dataset, config.split_factor)
    return list(config.held_values) or [config.held_value]


def run_ablation(config: RunConfig, on_row: Optional[Callable[[AblationRow], None]] = None,
                 dataset: Optional[Dataset] = None) -> list[AblationRow]:
    """Train every variant on every held value and seed; writes ablation.csv.

    Runs are sequential. When more than one held value is swept, each variant
    also gets a ``held_value=mean`` row averaging its per-held means.
    """
    variants = ablation_variants(config)
    seeds = tuple(config.ablation_seeds)
    if not seeds:
        raise ConfigError("ablation_seeds must name at least one seed")
    dataset = dataset if dataset is not None else load_data(config)
    for _, overrides in variants:
        config.replace(**overrides).train_config(dataset.grid, dataset.frames)
    held_values = ablation_held_values(config, dataset)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write_resolved(out)
    rows = []
    for name, overrides in variants:
        per_held = []
        for held in held_values:
            row = AblationRow(name, config.split_factor, held, seeds)
            split = make_split(config, dataset, held)
            for seed in seeds:
                variant_cfg = config.replace(**overrides, seed=seed, held_value=held)
                net, reports = fit(variant_cfg, split)
                # the last epoch already evaluated this exact model
                acc = reports[-1].target_acc if reports else evaluate(net, split.target, split.target_truth).accuracy
                logger.info("ablation %s %s=%s seed %d: target_acc=%.4f", name, config.split_factor, held, seed, acc)
                row.accuracies.append(acc)
            rows.append(row)
            per_held.append(row)
            if on_row is not None:
                on_row(row)
        if len(per_held) > 1:
            summary = AblationRow(name, config.split_factor, "mean", seeds, [r.mean for r in per_held])
            rows.append(summary)
            if on_row is not None:
                on_row(summary)

    with open(out / ABLATION_NAME, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for row in rows:
            writer.writerow(row.csv_fields())
    return rows


# ----------------------------------------------------------------------
# Synth
# ----------------------------------------------------------------------

def run_synth(config: RunConfig) -> tuple[Dataset, Path]:
    """Generate the synthetic corpus from ``config.seed`` and write it to ``out_dir``."""
    dataset = synth_generate(config.synth_spec(), config.seed)
    manifest = save_dataset(dataset, config.out_dir)
    config.write_resolved(config.out_dir)
    return dataset, manifest
