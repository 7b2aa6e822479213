"""Unsupervised domain adaptation: batch composition, pseudo-labels, losses, epoch loop."""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from rfuda import rng as rngs
from rfuda.augment import AugmentPolicy, augment
from rfuda.dataset import Dataset, GestureSample
from rfuda.errors import ConfigError, NumericalError, UsageError
from rfuda.metrics import evaluate
from rfuda.model import (
    RfNet,
    classification_loss,
    forward_batch,
    one_hot,
    predict,
)
from rfuda.optim import SgdState, gradients, sgd_step
from rfuda.pipeline import BatchPrefetcher
from rfuda.tensor import TRAIN, Tape, Tensor, log, reduce_sum, take

logger = logging.getLogger(__name__)

LC_DIVISORS = ("pseudo_count", "mu_b")


@dataclass
class TrainConfig:
    batch_size: int = 32
    mu: int = 1
    tau0: float = 0.92
    tau_step: float = 0.001
    tau_max: float = 0.99
    lambda_u: float = 1.0
    eta_c: float = 0.005
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    seed: int = 0
    augment: Optional[AugmentPolicy] = None  # None: AugmentPolicy.default_for(N, T)
    lc_divisor: str = "pseudo_count"
    clean_pseudo_forward: bool = False
    per_sample_forward: bool = False
    prefetch: bool = True
    check_numerics: bool = False

    def validate(self) -> None:
        if not 0.0 < self.tau0 < 1.0:
            raise ConfigError(f"tau0 must be in (0, 1), got {self.tau0}")
        if self.tau_max > 1.0 or self.tau_max < self.tau0:
            raise ConfigError(f"tau_max must be in [tau0, 1], got {self.tau_max}")
        if self.tau_step < 0:
            raise ConfigError(f"tau_step must be non-negative, got {self.tau_step}")
        if self.lambda_u < 0 or self.eta_c < 0:
            raise ConfigError("lambda_u and eta_c must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.mu < 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.lc_divisor not in LC_DIVISORS:
            raise ConfigError(f"lc_divisor must be one of {', '.join(LC_DIVISORS)}, got {self.lc_divisor!r}")
        if not self.lr > 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("lr must be positive and momentum in [0, 1)")

    @property
    def unlabeled_per_batch(self) -> int:
        return self.mu * self.batch_size

    def policy_for(self, grid: int, frames: int) -> AugmentPolicy:
        policy = self.augment or AugmentPolicy.default_for(grid, frames)
        policy.validate(grid, frames)
        return policy


# ----------------------------------------------------------------------
# Batch composition
# ----------------------------------------------------------------------

@dataclass
class ComposedBatch:
    inputs: np.ndarray  # [B + 2μB, T, N, N]: X^l ∥ X^u ∥ X^u_aug
    targets: np.ndarray  # one-hot [B, C] for X^l only
    labeled_ids: list[str]
    unlabeled_ids: list[str]

    @property
    def labeled_count(self) -> int:
        return len(self.labeled_ids)

    @property
    def unlabeled_count(self) -> int:
        return len(self.unlabeled_ids)


def assemble_batch(labeled: Sequence[GestureSample], unlabeled: Sequence[GestureSample],
                   class_count: int, policy: AugmentPolicy, seed: int, epoch: int) -> ComposedBatch:
    """Stack X^l, X^u and A(X^u); sample augmentation streams come from (seed, id, epoch)."""
    originals = [s.frames for s in unlabeled]
    augmented = [augment(s.frames, policy, rngs.stream(seed, "augment", s.id, epoch)) for s in unlabeled]
    inputs = np.stack([s.frames for s in labeled] + originals + augmented)
    return ComposedBatch(
        inputs=inputs,
        targets=one_hot([s.label for s in labeled], class_count),
        labeled_ids=[s.id for s in labeled],
        unlabeled_ids=[s.id for s in unlabeled],
    )


def compose_batch(labeled_pool: Sequence[GestureSample], unlabeled_pool: Sequence[GestureSample],
                  batch_size: int, mu: int, rng: np.random.Generator, policy: AugmentPolicy,
                  class_count: int, seed: int = 0, epoch: int = 0) -> Optional[ComposedBatch]:
    """First batch of a freshly shuffled epoch: B labeled and μB unlabeled samples.

    Sampling follows :func:`plan_epoch`, so a labeled pool smaller than B
    gives only a partial batch, which is dropped (``None``), and an unlabeled
    pool smaller than μB is cycled.
    """
    if batch_size < 1:
        raise UsageError(f"batch size must be at least 1, got {batch_size}")
    plan = plan_epoch(len(labeled_pool), len(unlabeled_pool), batch_size, mu, rng)
    if not plan:
        logger.warning("labeled pool of %d is smaller than batch size %d; partial batch dropped",
                       len(labeled_pool), batch_size)
        return None
    lab, unl = plan[0]
    return assemble_batch(
        [labeled_pool[i] for i in lab], [unlabeled_pool[i] for i in unl], class_count, policy, seed, epoch
    )


def plan_epoch(labeled_size: int, unlabeled_size: int, batch_size: int, mu: int,
               rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index pairs per step; the trailing partial labeled batch is dropped.

    The unlabeled order is a fresh permutation, cycled when the pool is
    smaller than steps x μB.
    """
    steps = labeled_size // batch_size
    labeled_order = rng.permutation(labeled_size)
    need = steps * mu * batch_size
    if need and unlabeled_size == 0:
        raise UsageError("mu > 0 needs a non-empty unlabeled pool")
    chunks, have = [], 0
    while have < need:
        chunks.append(rng.permutation(unlabeled_size))
        have += unlabeled_size
    unlabeled_order = np.concatenate(chunks)[:need] if chunks else np.zeros(0, dtype=np.int64)
    u = mu * batch_size
    return [
        (labeled_order[i * batch_size:(i + 1) * batch_size], unlabeled_order[i * u:(i + 1) * u])
        for i in range(steps)
    ]


def epoch_batches(labeled_pool: Sequence[GestureSample], unlabeled_pool: Sequence[GestureSample],
                  config: TrainConfig, class_count: int, policy: AugmentPolicy,
                  epoch: int) -> Iterator[ComposedBatch]:
    plan = plan_epoch(len(labeled_pool), len(unlabeled_pool), config.batch_size, config.mu,
                      rngs.stream(config.seed, "shuffle", epoch))
    if not plan:
        logger.warning("labeled pool of %d is smaller than batch size %d; epoch %d has no steps",
                       len(labeled_pool), config.batch_size, epoch)
    for lab, unl in plan:
        yield assemble_batch([labeled_pool[i] for i in lab], [unlabeled_pool[i] for i in unl],
                             class_count, policy, config.seed, epoch)


# ----------------------------------------------------------------------
# Pseudo-labels and losses
# ----------------------------------------------------------------------

def dynamic_threshold(tau0: float, tau_step: float, epoch: int, tau_max: float = 0.99) -> float:
    """τ_d = min(τ_0 + step · epoch, τ_max)."""
    if epoch < 0:
        raise UsageError(f"epoch must be non-negative, got {epoch}")
    return min(tau0 + tau_step * epoch, tau_max)


@dataclass
class PseudoLabelSet:
    indices: np.ndarray  # rows of the unlabeled partition
    targets: np.ndarray  # one-hot [len(indices), C], frozen
    unlabeled_count: int

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def classes(self) -> np.ndarray:
        return self.targets.argmax(axis=1)

    @property
    def coverage(self) -> float:
        return len(self) / self.unlabeled_count if self.unlabeled_count else 0.0


def pseudo_label(probs: np.ndarray, tau: float) -> PseudoLabelSet:
    """One-hot on the argmax of each row whose top probability reaches ``tau``."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise UsageError(f"pseudo_label expects [rows, C], got {probs.shape}")
    keep = np.flatnonzero(probs.max(axis=1) >= tau) if len(probs) else np.zeros(0, dtype=np.int64)
    classes = probs[keep].argmax(axis=1) if len(keep) else np.zeros(0, dtype=np.int64)
    return PseudoLabelSet(keep, one_hot(classes, probs.shape[1]), len(probs))


def consistency_loss(pseudo: PseudoLabelSet, probs_aug: Tensor) -> Tensor:
    """L_u = -(1/|y^u|) Σ_i Σ_c y^u_ic ln ŷ^u_aug,ic; zero for an empty set."""
    if len(pseudo) == 0:
        return Tensor(0.0)
    rows = take(probs_aug, pseudo.indices)
    return reduce_sum(log(rows) * pseudo.targets) * (-1.0 / len(pseudo))


def confidence_constraint(probs_u: Tensor, pseudo_count: int, divisor: str = "pseudo_count") -> Tensor:
    """L_c = -(1/d) Σ_{all unlabeled i} Σ_c ln ŷ^u_ic.

    ``d`` is the pseudo-label count (μB when there are none), or always μB
    with ``divisor="mu_b"``.
    """
    if divisor not in LC_DIVISORS:
        raise ConfigError(f"lc_divisor must be one of {', '.join(LC_DIVISORS)}, got {divisor!r}")
    rows = probs_u.shape[0]
    if rows == 0:
        return Tensor(0.0)
    d = pseudo_count if divisor == "pseudo_count" and pseudo_count > 0 else rows
    return reduce_sum(log(probs_u)) * (-1.0 / d)


def total_objective(loss_a: Tensor, loss_u: Tensor, loss_c: Tensor,
                    lambda_u: float, eta_c: float) -> Tensor:
    """L = L_a + λ L_u + η L_c."""
    return loss_a + loss_u * lambda_u + loss_c * eta_c


def pseudo_confidence_ceiling(lambda_u: float, eta_c: float, class_count: int) -> float:
    """Top probability at which L_u and L_c balance on one pseudo-labeled row.

    ``-λ ln p_y - η Σ_c ln p_c`` is minimised over the simplex at
    ``p_y = (λ + η) / (λ + Cη)``. Training does not push a pseudo-labeled
    row past this value, so a threshold above it starves L_u.
    """
    if class_count < 1:
        raise UsageError(f"class_count must be positive, got {class_count}")
    if lambda_u < 0 or eta_c < 0:
        raise ConfigError("lambda_u and eta_c must be non-negative")
    if lambda_u + eta_c == 0:
        return 1.0
    return (lambda_u + eta_c) / (lambda_u + class_count * eta_c)


# ----------------------------------------------------------------------
# Epoch loop
# ----------------------------------------------------------------------

EPOCH_CSV_HEADER = "epoch,L_a,L_u,L_c,L,tau_d,pseudo_count,pseudo_coverage,pseudo_acc,target_acc"


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.10g}"


@dataclass
class EpochReport:
    epoch: int
    loss_a: float
    loss_u: float
    loss_c: float
    loss: float
    tau_d: float
    pseudo_count: int
    pseudo_coverage: float
    pseudo_acc: float
    target_acc: float
    steps: int = 0
    confusion: Optional[np.ndarray] = field(default=None, repr=False)

    def csv_row(self) -> str:
        values = [self.loss_a, self.loss_u, self.loss_c, self.loss, self.tau_d]
        tail = [self.pseudo_coverage, self.pseudo_acc, self.target_acc]
        return ",".join(
            [str(self.epoch)] + [_fmt(v) for v in values] + [str(self.pseudo_count)] + [_fmt(v) for v in tail]
        )


def train_epoch(net: RfNet, source: Dataset, target: Dataset, config: TrainConfig, epoch: int,
                state: SgdState, target_truth: Optional[np.ndarray] = None) -> EpochReport:
    """One pass over the labeled source pool with adaptation on the target pool.

    ``target_truth`` (aligned with ``target.samples``) only feeds the
    pseudo-label and target accuracy diagnostics.
    """
    labeled_pool = source.labeled()
    unlabeled_pool = target.samples if config.mu else []
    grid = source.grid or target.grid
    frames = source.frames or target.frames
    policy = config.policy_for(grid, frames)
    tau = dynamic_threshold(config.tau0, config.tau_step, epoch, config.tau_max)
    truth_by_id = (
        {s.id: int(y) for s, y in zip(target.samples, target_truth)} if target_truth is not None else None
    )

    batches = epoch_batches(labeled_pool, unlabeled_pool, config, source.class_count, policy, epoch)
    if config.prefetch:
        batches = BatchPrefetcher(batches)

    sums = np.zeros(4)
    steps = pseudo_total = unlabeled_total = pseudo_correct = 0
    for step, batch in enumerate(batches):
        b, u = batch.labeled_count, batch.unlabeled_count
        clean_probs = predict(net, batch.inputs[b:b + u]) if u and config.clean_pseudo_forward else None
        streams = [rngs.stream(config.seed, "dropout", epoch, step, row) for row in range(len(batch.inputs))]
        with Tape(check_numerics=config.check_numerics) as tape:
            pred = forward_batch(batch.inputs, net, TRAIN, streams, b, u, config.per_sample_forward)
            loss_a = classification_loss(pred.labeled, batch.targets)
            if u:
                probs_u = pred.unlabeled
                pseudo = pseudo_label(clean_probs if clean_probs is not None else probs_u.data, tau)
                loss_u = consistency_loss(pseudo, pred.augmented)
                loss_c = confidence_constraint(probs_u, len(pseudo), config.lc_divisor)
            else:
                pseudo = PseudoLabelSet(np.zeros(0, dtype=np.int64), np.zeros((0, source.class_count)), 0)
                loss_u = loss_c = Tensor(0.0)
            loss = total_objective(loss_a, loss_u, loss_c, config.lambda_u, config.eta_c)
            if not np.isfinite(loss.data):
                raise NumericalError(f"epoch {epoch} step {step}: loss is {loss.item()}", op=tape.first_nonfinite())
            tape.backward(loss)
        sgd_step(net.params, gradients(net.params), state)

        sums += [loss_a.item(), loss_u.item(), loss_c.item(), loss.item()]
        steps += 1
        pseudo_total += len(pseudo)
        unlabeled_total += u
        if truth_by_id is not None and len(pseudo):
            ids = [batch.unlabeled_ids[i] for i in pseudo.indices]
            pseudo_correct += int(sum(truth_by_id[i] == c for i, c in zip(ids, pseudo.classes)))
        logger.debug("epoch %d step %d: L=%.6f pseudo=%d/%d", epoch, step, loss.item(), len(pseudo), u)

    means = sums / steps if steps else np.full(4, np.nan)
    pseudo_acc = pseudo_correct / pseudo_total if truth_by_id is not None and pseudo_total else float("nan")
    target_acc, confusion = float("nan"), None
    if target_truth is not None and len(target):
        result = evaluate(net, target, target_truth)
        target_acc, confusion = result.accuracy, result.confusion

    report = EpochReport(
        epoch=epoch,
        loss_a=float(means[0]),
        loss_u=float(means[1]),
        loss_c=float(means[2]),
        loss=float(means[3]),
        tau_d=tau,
        pseudo_count=pseudo_total,
        pseudo_coverage=pseudo_total / unlabeled_total if unlabeled_total else 0.0,
        pseudo_acc=pseudo_acc,
        target_acc=target_acc,
        steps=steps,
        confusion=confusion,
    )
    logger.info("epoch %d: %s", epoch, report.csv_row())
    return report
