"""Training loop: cross-entropy, Adam, plateau LR schedule, early stopping, best checkpoint."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .data import DatasetIndex, load_image, make_batches
from .errors import ConfigError, IngestionError, LabelError, NumericError
from .model import ModelGraph
from .tensor import Tensor, as_tensor, make_rng, no_grad
from .weights import WeightArchive

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
FINETUNE_MODES = ("head", "full")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    factor: float = 0.1
    patience: int = 2
    min_lr: float = 1e-6
    early_stop_patience: int = 5
    min_delta: float = 0.0
    seed: int = 0
    finetune: str = "head"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 1 <= self.max_epochs <= 1000:
            raise ConfigError(f"max_epochs must be in [1, 1000], got {self.max_epochs}")
        if not 0 < self.factor < 1:
            raise ConfigError(f"scheduler factor must be in (0, 1), got {self.factor}")
        if self.batch_size < 1 or self.patience < 0 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, patience and early_stop_patience must be positive")
        if self.finetune not in FINETUNE_MODES:
            raise ConfigError(f"finetune must be one of {FINETUNE_MODES}, got {self.finetune!r}")


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------
def cross_entropy(scores: Tensor, targets: Sequence[int], from_logits: bool = True) -> Tensor:
    """Mean negative log-likelihood of the true classes.

    ``scores`` are logits (log-softmax applied internally) or, with
    ``from_logits=False``, probabilities clamped at 1e-12 before the log.
    """
    scores = as_tensor(scores)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise LabelError(f"expected [B, C] scores with C >= 2, got {scores.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, c = scores.shape
    if targets.shape != (n,):
        raise LabelError(f"{targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    if targets.min() < 0 or targets.max() >= c:
        raise LabelError(f"target ids must lie in [0, {c}), got range [{targets.min()}, {targets.max()}]")
    logp = ops.log_softmax(scores, axis=1) if from_logits else ops.log(scores, floor=PROB_FLOOR)
    picked = ops.index(logp, (np.arange(n), targets))
    return ops.mul(ops.sum(picked), -1.0 / n)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[tuple[str, Tensor]], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place, for every parameter that has a gradient."""
    params = [(n, p) for n, p in params if p.grad is not None]
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for weight {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# plateau logic
# ---------------------------------------------------------------------------
@dataclass
class PlateauState:
    best: float = math.inf
    bad_epochs: int = 0

    def observe(self, value: float, min_delta: float) -> bool:
        """Record one epoch; returns True when ``value`` improves on the best so far."""
        gain = self.best - value
        if gain > 0 and gain >= min_delta:
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False


@dataclass
class SchedulerState:
    lr: float
    factor: float = 0.1
    patience: int = 2
    min_lr: float = 1e-6
    min_delta: float = 0.0
    plateau: PlateauState = field(default_factory=PlateauState)


def plateau_scheduler_step(val_loss: float, sched: SchedulerState) -> float:
    """Cut the learning rate by ``factor`` after ``patience`` epochs without improvement."""
    if not math.isfinite(val_loss):
        raise NumericError(f"non-finite validation loss {val_loss}")
    sched.plateau.observe(val_loss, sched.min_delta)
    if sched.plateau.bad_epochs >= sched.patience:
        sched.lr = max(sched.lr * sched.factor, sched.min_lr)
        sched.plateau.bad_epochs = 0
    return sched.lr


@dataclass
class EarlyStopping:
    patience: int = 5
    min_delta: float = 0.0
    plateau: PlateauState = field(default_factory=PlateauState)

    def step(self, val_loss: float) -> bool:
        """Returns True when training should stop."""
        self.plateau.observe(val_loss, self.min_delta)
        return self.plateau.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    rows: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_csv(self, path: str | Path, timing: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds"])
            for r in self.rows:
                seconds = f"{r.seconds:.3f}" if timing else ""
                writer.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}", f"{r.val_acc:.6f}",
                                 f"{r.lr:.8g}", seconds])

    @property
    def best(self) -> EpochRecord:
        return min(self.rows, key=lambda r: r.val_loss)


class _FeatureSource:
    """Pooled backbone features per record, computed once when the backbone is frozen."""

    def __init__(self, model: ModelGraph, records, batch_size: int, size: int):
        feats = []
        with no_grad():
            for start in range(0, len(records), batch_size):
                chunk = records[start : start + batch_size]
                pixels = np.stack([_load(r, size) for r in chunk])
                feats.append(model.forward_features(Tensor(pixels)).data)
        self.features = np.concatenate(feats)
        self.labels = np.array([r.class_id for r in records], dtype=np.int64)


def _load(record, size: int) -> np.ndarray:
    try:
        return load_image(record.path, size).data
    except Exception as exc:  # noqa: BLE001 - surfaced with the path
        raise IngestionError(f"cannot read {record.path}: {exc}") from exc


def evaluate_loss(model: ModelGraph, batches: Iterable[tuple[Tensor, np.ndarray]], head_only: bool) -> tuple[float, float]:
    """Mean cross-entropy (accumulated in float64) and accuracy of an eval pass."""
    total, correct, count = 0.0, 0, 0
    with no_grad():
        for inputs, labels in batches:
            logits = model.classify(inputs) if head_only else model(inputs)
            loss = cross_entropy(logits, labels)
            total += float(loss.data) * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            count += len(labels)
    return total / count, correct / count


def train(
    model: ModelGraph,
    index: DatasetIndex,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[WeightArchive, TrainLog]:
    """Fit ``model`` on the train split and return the lowest-val-loss weights.

    Head-only fine-tuning freezes the backbone (parameters and batch-norm
    statistics), so its pooled features are computed once and reused.
    """
    train_records, val_records = index.split("train"), index.split("val")
    if not train_records or not val_records:
        raise IngestionError("train and val splits must both be non-empty")
    size = model.input_size
    head_only = cfg.finetune == "head"
    params = [(n, p) for n, p in model.named_parameters() if not head_only or n.startswith("head.")]
    opt = OptimizerState()
    sched = SchedulerState(cfg.lr, cfg.factor, cfg.patience, cfg.min_lr, cfg.min_delta)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    log_rows = TrainLog()
    best_archive = WeightArchive.from_model(model)
    best_loss = math.inf

    model.eval()
    model.set_backbone_frozen(head_only)
    if head_only:
        train_feats = _FeatureSource(model, train_records, cfg.batch_size, size)
        val_feats = _FeatureSource(model, val_records, cfg.batch_size, size)

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        drop_rng = make_rng(cfg.seed, epoch, 1)
        lr = sched.lr
        model.train()
        if head_only:
            order = make_rng(cfg.seed, epoch).permutation(len(train_records))
            batches = (
                (Tensor(train_feats.features[order[s : s + cfg.batch_size]]), train_feats.labels[order[s : s + cfg.batch_size]])
                for s in range(0, len(order), cfg.batch_size)
            )
        else:
            batches = ((b.pixels, b.class_ids) for b in make_batches(index, "train", cfg.batch_size, cfg.seed, epoch, size))
        total, count = 0.0, 0
        for batch_no, (inputs, labels) in enumerate(batches, start=1):
            model.zero_grad()
            logits = model.classify(inputs, rng=drop_rng) if head_only else model(inputs, rng=drop_rng)
            loss = cross_entropy(logits, labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            loss.backward()
            try:
                adam_step(params, opt, lr)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch}, batch {batch_no}") from None
            total += value * len(labels)
            count += len(labels)
        model.eval()

        if head_only:
            val_batches = (
                (Tensor(val_feats.features[s : s + cfg.batch_size]), val_feats.labels[s : s + cfg.batch_size])
                for s in range(0, len(val_records), cfg.batch_size)
            )
        else:
            val_batches = ((b.pixels, b.class_ids) for b in make_batches(index, "val", cfg.batch_size, cfg.seed, 0, size))
        val_loss, val_acc = evaluate_loss(model, val_batches, head_only)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")

        row = EpochRecord(epoch, total / count, val_loss, val_acc, lr, time.perf_counter() - started)
        log_rows.rows.append(row)
        log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f lr=%g", epoch, row.train_loss, val_loss, val_acc, lr)
        if on_epoch is not None:
            on_epoch(row)
        if val_loss < best_loss:
            best_loss = val_loss
            best_archive = WeightArchive.from_model(model)
            log_rows.best_epoch = epoch
        plateau_scheduler_step(val_loss, sched)
        if stopper.step(val_loss):
            log_rows.stopped_early = epoch < cfg.max_epochs
            break

    model.set_backbone_frozen(False)
    return best_archive, log_rows
