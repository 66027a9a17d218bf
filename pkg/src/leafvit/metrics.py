"""Classification metrics, evaluation reports and the throughput benchmark."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetIndex, make_batches
from .errors import ContractError, DimensionError
from .model import ModelGraph, count_macs, count_params, predict
from .tensor import Tensor, make_rng

PROB_FLOOR = 1e-12


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C], rows = true class, cols = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self, c: int) -> int:
        return int(self.counts[c, c])

    def fp(self, c: int) -> int:
        return int(self.counts[:, c].sum() - self.counts[c, c])

    def fn(self, c: int) -> int:
        return int(self.counts[c, :].sum() - self.counts[c, c])

    def tn(self, c: int) -> int:
        return self.total - self.tp(c) - self.fp(c) - self.fn(c)


@dataclass
class PredictionBatch:
    probs: np.ndarray  # [N, C]
    true_ids: np.ndarray  # [N]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.true_ids = np.asarray(self.true_ids, dtype=np.int64)
        if self.probs.ndim != 2 or self.true_ids.shape != (self.probs.shape[0],) or self.probs.shape[0] < 1:
            raise DimensionError(f"probs {self.probs.shape} and true_ids {self.true_ids.shape} do not align")


def confusion(preds: PredictionBatch) -> ConfusionMatrix:
    """Argmax decisions; ``np.argmax`` breaks ties toward the lowest class id."""
    c = preds.probs.shape[1]
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (preds.true_ids, preds.probs.argmax(axis=1)), 1)
    return ConfusionMatrix(counts)


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total <= 0:
        raise ContractError("confusion matrix is empty")


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, True) if den > 0 else (0.0, False)


def accuracy(cm: ConfusionMatrix) -> float:
    """Multiclass accuracy, trace / total."""
    _require_nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)


def precision_defined(cm: ConfusionMatrix, c: int) -> tuple[float, bool]:
    _require_nonempty(cm)
    return _ratio(cm.tp(c), cm.tp(c) + cm.fp(c))


def recall_defined(cm: ConfusionMatrix, c: int) -> tuple[float, bool]:
    _require_nonempty(cm)
    return _ratio(cm.tp(c), cm.tp(c) + cm.fn(c))


def precision(cm: ConfusionMatrix, c: int) -> float:
    return precision_defined(cm, c)[0]


def recall(cm: ConfusionMatrix, c: int) -> float:
    return recall_defined(cm, c)[0]


def f1_score(p: float, r: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def f1(cm: ConfusionMatrix, c: int) -> float:
    return f1_score(precision(cm, c), recall(cm, c))


def ovr_accuracy(cm: ConfusionMatrix, c: int) -> float:
    """One-vs-rest accuracy of class ``c``: (TP + TN) / total."""
    _require_nonempty(cm)
    return (cm.tp(c) + cm.tn(c)) / cm.total


def ranking(probs: np.ndarray) -> np.ndarray:
    """Class ids per row by descending probability, ties toward the lower id."""
    return np.argsort(-np.asarray(probs), axis=1, kind="stable")


def top_k(preds: PredictionBatch, k: int) -> float:
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    k = min(k, preds.probs.shape[1])
    top = ranking(preds.probs)[:, :k]
    return float((top == preds.true_ids[:, None]).any(axis=1).mean())


@dataclass
class RocCurve:
    points: list[tuple[float, float]]
    auc: float | None  # None marks an undefined curve (no positives or no negatives)

    @property
    def defined(self) -> bool:
        return self.auc is not None


def roc_from_scores(scores: Sequence[float], positives: Sequence[bool]) -> RocCurve:
    """ROC by sweeping every distinct score as a ``score >= threshold`` cut; AUC by trapezoids."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        return RocCurve([], None)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positives[order]
    tps = np.cumsum(p)
    fps = np.cumsum(~p)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tps[last_of_group] / n_pos]
    fpr = np.r_[0.0, fps[last_of_group] / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve([(float(a), float(b)) for a, b in zip(fpr, tpr)], auc)


def roc_curve(preds: PredictionBatch, c: int) -> RocCurve:
    """One-vs-rest ROC for class ``c``."""
    return roc_from_scores(preds.probs[:, c], preds.true_ids == c)


def nll(preds: PredictionBatch) -> float:
    """Mean negative log-probability of the true class (float64 accumulation)."""
    p_true = preds.probs[np.arange(len(preds.true_ids)), preds.true_ids]
    return float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
_RATE = {"type": "number", "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EvaluationReport",
    "type": "object",
    "required": ["labels", "accuracy", "top1", "top5", "loss", "macro_precision", "macro_recall",
                 "macro_f1", "classes", "confusion", "roc", "num_samples"],
    "additionalProperties": False,
    "properties": {
        "labels": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "accuracy": _RATE,
        "top1": _RATE,
        "top5": _RATE,
        "loss": {"type": "number", "minimum": 0},
        "macro_precision": _RATE,
        "macro_recall": _RATE,
        "macro_f1": _RATE,
        "num_samples": {"type": "integer", "minimum": 1},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "roc": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {"type": "array", "items": _RATE, "minItems": 2, "maxItems": 2},
            },
        },
        "classes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["label", "support", "precision", "recall", "f1", "ovr_accuracy", "auc", "undefined"],
                "additionalProperties": False,
                "properties": {
                    "label": {"type": "string"},
                    "support": {"type": "integer", "minimum": 0},
                    "precision": _RATE,
                    "recall": _RATE,
                    "f1": _RATE,
                    "ovr_accuracy": _RATE,
                    "auc": {"anyOf": [_RATE, {"type": "null"}]},
                    "undefined": {"type": "array", "items": {"enum": ["precision", "recall", "f1", "auc"]}},
                },
            },
        },
    },
}
"""JSON Schema of :meth:`EvaluationReport.to_json` output."""


@dataclass
class ClassReport:
    label: str
    support: int
    precision: float
    recall: float
    f1: float
    ovr_accuracy: float
    auc: float | None
    undefined: list[str] = field(default_factory=list)


@dataclass
class EvaluationReport:
    labels: list[str]
    accuracy: float
    top1: float
    top5: float
    loss: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    classes: list[ClassReport]
    confusion: list[list[int]]
    roc: dict[str, list[tuple[float, float]]]
    num_samples: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc"] = {k: [list(p) for p in v] for k, v in self.roc.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, json_path: str | Path) -> list[Path]:
        """Write the JSON report plus ``*_confusion.csv`` and ``*_roc_<class>.csv`` beside it."""
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(self.to_json(), encoding="utf-8")
        written = [json_path]
        stem = json_path.with_suffix("")
        cm_path = Path(f"{stem}_confusion.csv")
        with open(cm_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["true\\pred"] + self.labels)
            for label, row in zip(self.labels, self.confusion):
                writer.writerow([label] + row)
        written.append(cm_path)
        for i, label in enumerate(self.labels):
            roc_path = Path(f"{stem}_roc_{i}.csv")
            with open(roc_path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["fpr", "tpr"])
                for fpr, tpr in self.roc[label]:
                    writer.writerow([f"{fpr:.6f}", f"{tpr:.6f}"])
            written.append(roc_path)
        return written

    def format_table(self) -> str:
        """Per-class accuracy/precision/recall/F1 rows plus a macro ``Total`` row."""
        width = max([len(label) for label in self.labels] + [len("Disease Labels"), len("Total")])
        header = f"{'Disease Labels':<{width}}  {'Accuracy':>9}  {'Precision':>9}  {'Recall':>9}  {'F1-Score':>9}"
        lines = [header]

        def pct(value: float, ok: bool = True) -> str:
            return f"{100 * value:.2f}%" if ok else "-"

        for cr in self.classes:
            lines.append(
                f"{cr.label:<{width}}  {pct(cr.ovr_accuracy):>9}  {pct(cr.precision, 'precision' not in cr.undefined):>9}"
                f"  {pct(cr.recall, 'recall' not in cr.undefined):>9}  {pct(cr.f1, 'f1' not in cr.undefined):>9}"
            )
        lines.append(
            f"{'Total':<{width}}  {pct(self.accuracy):>9}  {pct(self.macro_precision):>9}"
            f"  {pct(self.macro_recall):>9}  {pct(self.macro_f1):>9}"
        )
        lines.append(f"top1={self.top1:.4f} top5={self.top5:.4f} loss={self.loss:.6f} samples={self.num_samples}")
        return "\n".join(lines) + "\n"


def build_report(preds: PredictionBatch, labels: list[str]) -> EvaluationReport:
    cm = confusion(preds)
    classes = []
    roc = {}
    for c, label in enumerate(labels):
        p, p_ok = precision_defined(cm, c)
        r, r_ok = recall_defined(cm, c)
        undefined = [name for name, ok in (("precision", p_ok), ("recall", r_ok)) if not ok]
        if undefined:
            undefined.append("f1")
        curve = roc_curve(preds, c)
        if not curve.defined:
            undefined.append("auc")
        roc[label] = curve.points
        classes.append(ClassReport(label, int(cm.counts[c].sum()), p, r, f1_score(p, r), ovr_accuracy(cm, c),
                                   curve.auc, undefined))
    return EvaluationReport(
        labels=list(labels),
        accuracy=accuracy(cm),
        top1=top_k(preds, 1),
        top5=top_k(preds, 5),
        loss=nll(preds),
        macro_precision=float(np.mean([c.precision for c in classes])),
        macro_recall=float(np.mean([c.recall for c in classes])),
        macro_f1=float(np.mean([c.f1 for c in classes])),
        classes=classes,
        confusion=cm.counts.tolist(),
        roc=roc,
        num_samples=len(preds.true_ids),
    )


def collect_predictions(model: ModelGraph, index: DatasetIndex, split: str = "val", batch_size: int = 32) -> PredictionBatch:
    probs, ids = [], []
    for batch in make_batches(index, split, batch_size, seed=0, epoch=0, size=model.input_size):
        probs.append(predict(model, batch.pixels).data)
        ids.append(batch.class_ids)
    return PredictionBatch(np.concatenate(probs), np.concatenate(ids))


def evaluate(model: ModelGraph, index: DatasetIndex, split: str = "val", batch_size: int = 32) -> EvaluationReport:
    model.eval()
    return build_report(collect_predictions(model, index, split, batch_size), index.labels)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------
@dataclass
class BenchReport:
    total_params: int
    macs: int
    gmacs: float
    fps: float
    latency_p50_ms: float
    latency_p95_ms: float
    iters: int
    warmup: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def bench(model: ModelGraph, iters: int = 100, warmup: int = 10, seed: int = 0) -> BenchReport:
    """Single-image eval forwards on a fixed random input; fps = iters / wall seconds."""
    if iters < 1 or warmup < 0:
        raise ContractError("iters must be >= 1 and warmup >= 0")
    model.eval()
    shape = (1, 3, model.input_size, model.input_size)
    x = Tensor(make_rng(seed).standard_normal(shape, dtype=np.float32))
    for _ in range(warmup):
        predict(model, x)
    latencies = []
    for _ in range(iters):
        start = time.perf_counter()
        predict(model, x)
        latencies.append(time.perf_counter() - start)
    total = float(np.sum(latencies))
    macs = count_macs(model, shape)
    return BenchReport(
        total_params=count_params(model),
        macs=macs,
        gmacs=macs / 1e9,
        fps=iters / max(total, 1e-9),
        latency_p50_ms=1e3 * float(np.percentile(latencies, 50)),
        latency_p95_ms=1e3 * float(np.percentile(latencies, 95)),
        iters=iters,
        warmup=warmup,
    )
