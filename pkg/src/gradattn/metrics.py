"""Classification metrics: top-k accuracy, P/R/F1, ECE and generalization gap."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError

ECE_BINS = 15


@dataclass
class PredictionSet:
    probs: np.ndarray  # [N, K], rows sum to 1
    labels: np.ndarray  # [N]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or self.labels.shape != (self.probs.shape[0],):
            raise ContractError(f"probs {self.probs.shape} and labels {self.labels.shape} disagree")
        k = self.probs.shape[1]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ContractError(f"labels must lie in [0, {k})")
        if self.probs.size and not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-5):
            raise ContractError("probability rows must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def predictions(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return self.probs.argmax(axis=1)


@dataclass
class MetricBundle:
    top1: float
    top3: float
    top5: float
    precision_macro: float
    precision_weighted: float
    recall_macro: float
    recall_weighted: float
    f1_macro: float
    f1_weighted: float
    ece: float
    loss: float | None = None
    train_acc: float | None = None
    generalization_gap: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricBundle":
        return cls(**json.loads(text))


def topk_accuracy(preds: PredictionSet, k: int) -> float:
    """Fraction of rows whose label is among the k most probable classes.

    Ties are ranked by lowest class index.
    """
    if not 1 <= k <= preds.num_classes:
        raise ContractError(f"k must be in [1, {preds.num_classes}], got {k}")
    if len(preds.labels) == 0:
        raise ContractError("empty prediction set")
    order = np.argsort(-preds.probs, axis=1, kind="stable")[:, :k]
    return float((order == preds.labels[:, None]).any(axis=1).mean())


def confusion_matrix(labels: np.ndarray, predicted: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predicted), 1)
    return cm


def precision_recall_f1(preds: PredictionSet, averaging: str = "macro") -> tuple[float, float, float]:
    if averaging not in ("macro", "weighted"):
        raise ContractError(f"averaging must be 'macro' or 'weighted', got {averaging!r}")
    cm = confusion_matrix(preds.labels, preds.predictions(), preds.num_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        r = np.where(support > 0, tp / support, 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    if averaging == "macro":
        return float(p.mean()), float(r.mean()), float(f.mean())
    w = support / support.sum()
    return float(p @ w), float(r @ w), float(f @ w)


def expected_calibration_error(preds: PredictionSet, bins: int = ECE_BINS) -> float:
    """Bin-weighted |accuracy - confidence| over equal-width confidence bins.

    Bin m covers ((m-1)/M, m/M]; confidence is the max probability per row.
    """
    if bins < 1:
        raise ContractError(f"bins must be >= 1, got {bins}")
    n = len(preds.labels)
    if n == 0:
        raise ContractError("empty prediction set")
    conf = preds.probs.max(axis=1)
    correct = (preds.predictions() == preds.labels).astype(np.float64)
    upper = np.arange(1, bins + 1) / bins
    idx = np.minimum(np.searchsorted(upper, conf, side="left"), bins - 1)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    return float(np.abs(acc_sum - conf_sum).sum() / n)


def generalization_gap(train_acc: float, val_acc: float) -> float:
    for v in (train_acc, val_acc):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"accuracies must be in [0, 1], got {v}")
    return abs(train_acc - val_acc)


def evaluate(preds: PredictionSet, loss: float | None = None, train_acc: float | None = None,
             bins: int = ECE_BINS) -> MetricBundle:
    k = preds.num_classes
    top = [topk_accuracy(preds, min(j, k)) for j in (1, 3, 5)]
    pm, rm, fm = precision_recall_f1(preds, "macro")
    pw, rw, fw = precision_recall_f1(preds, "weighted")
    gap = None if train_acc is None else generalization_gap(train_acc, top[0])
    return MetricBundle(*top, pm, pw, rm, rw, fm, fw, expected_calibration_error(preds, bins),
                        loss=loss, train_acc=train_acc, generalization_gap=gap)
