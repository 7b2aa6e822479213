"""Target-domain evaluation: accuracy, per-class accuracy, confusion matrix."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rfuda.dataset import Dataset
from rfuda.errors import DimensionError, UsageError
from rfuda.model import RfNet, predict


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray  # rows: true class, columns: predicted class
    sample_count: int
    per_domain_accuracy: dict[str, float] = field(default_factory=dict)


def confusion_matrix(truth: np.ndarray, predicted: np.ndarray, class_count: int) -> np.ndarray:
    matrix = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(matrix, (truth, predicted), 1)
    return matrix


def report_from_predictions(truth: np.ndarray, predicted: np.ndarray, class_count: int,
                            domains: Optional[list[str]] = None) -> EvalReport:
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    matrix = confusion_matrix(truth, predicted, class_count)
    total = int(matrix.sum())
    support = matrix.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(matrix) / support, np.nan)
    accuracy = float(np.trace(matrix) / total) if total else float("nan")
    per_domain = {}
    if domains is not None:
        hits = truth == predicted
        for name in sorted(set(domains)):
            mask = np.array([d == name for d in domains])
            per_domain[name] = float(hits[mask].mean())
    return EvalReport(accuracy, per_class, matrix, total, per_domain)


def evaluate(net: RfNet, target: Dataset, truth: np.ndarray, domain_factor: Optional[str] = None) -> EvalReport:
    """Eval-mode forward on every target sample; argmax (lowest index on ties) vs ``truth``."""
    truth = np.asarray(truth, dtype=np.int64)
    if len(truth) != len(target):
        raise UsageError(f"{len(truth)} truth labels for {len(target)} target samples")
    cfg = net.config
    if len(target) and (target.grid, target.frames) != (cfg.grid, cfg.frames):
        raise DimensionError(
            f"dataset geometry N={target.grid}, T={target.frames} does not match model "
            f"N={cfg.grid}, T={cfg.frames}", axis="N" if target.grid != cfg.grid else "T",
        )
    if len(target) == 0:
        return report_from_predictions(truth, truth, cfg.class_count)
    probs = predict(net, np.stack([s.frames for s in target]))
    domains = [s.domain.value(domain_factor) for s in target] if domain_factor else None
    return report_from_predictions(truth, probs.argmax(axis=1), cfg.class_count, domains)
