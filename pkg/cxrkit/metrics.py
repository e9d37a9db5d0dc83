"""
Softmax, weighted categorical cross-entropy, and the evaluation suite: confusion
matrix, one-vs-rest accuracy/precision/recall/specificity/F1 and rank-based ROC AUC,
reported per class and macro-averaged.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax as _softmax
from scipy.stats import rankdata

from .errors import (DegenerateClassError, InvalidTargetError, LabelOutOfRangeError,
                     NonFiniteError)

logger = logging.getLogger(__name__)

LOG_CLIP = 1e-12
METRIC_NAMES = ("accuracy", "precision", "recall", "specificity", "f1", "auc")


def _weights_array(weights, num_classes: int) -> np.ndarray:
    if weights is None:
        return np.ones(num_classes)
    if hasattr(weights, "as_array"):
        weights = weights.as_array()
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (num_classes,):
        raise InvalidTargetError(f"expected {num_classes} class weights, got {w.shape[0]}")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise InvalidTargetError("class weights must be positive and finite")
    return w


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax along the last axis"""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("logits must be finite")
    return _softmax(x, axis=-1)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRangeError(f"labels must lie in 0..{num_classes - 1}")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def predict_labels(probs) -> np.ndarray:
    """Argmax decision; ties go to the lowest class index"""
    return np.argmax(np.asarray(probs), axis=-1)


# ============ Weighted cross-entropy ============

@dataclass(frozen=True)
class LossInputs:
    """A batch of logits (B, C), one-hot targets (B, C) and per-class weights (C,)"""
    logits: np.ndarray
    targets: np.ndarray
    weights: Optional[Any] = None

    def __post_init__(self):
        logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if logits.shape != targets.shape:
            raise InvalidTargetError(f"logits {logits.shape} and targets {targets.shape} differ in shape")
        if not np.all((targets == 0.0) | (targets == 1.0)) or not np.all(targets.sum(axis=1) == 1.0):
            raise InvalidTargetError("targets must be one-hot rows")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "weights", _weights_array(self.weights, logits.shape[1]))

    @property
    def true_class(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)


def weighted_nll(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Mean over samples of -w(c) * log p_c, log argument clipped at 1e-12"""
    if len(labels) == 0:
        return 0.0
    p_true = probs[np.arange(len(labels)), labels]
    return float(np.mean(-weights[labels] * np.log(np.maximum(p_true, LOG_CLIP))))


def wce_loss(inputs: LossInputs) -> Tuple[float, np.ndarray]:
    """
    Weighted categorical cross-entropy, averaged over the batch.

    Returns:
        (loss, dloss/dlogits); for a sample of true class c the gradient row is
        w(c) * (softmax(s) - t) / batch_size
    """
    probs = softmax(inputs.logits)
    labels = inputs.true_class
    loss = weighted_nll(probs, labels, inputs.weights)
    scale = inputs.weights[labels][:, None] / len(labels)
    return loss, scale * (probs - inputs.targets)


# ============ Confusion matrix and derived metrics ============

@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class"""
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, cls: int) -> Tuple[int, int, int, int]:
        """(TP, FP, FN, TN) treating cls as the positive class"""
        tp = int(self.counts[cls, cls])
        fn = int(self.counts[cls, :].sum()) - tp
        fp = int(self.counts[:, cls].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, fp, fn, tn


def confusion(true_labels, predicted_labels, num_classes: int) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if true_labels.shape != predicted_labels.shape:
        raise ValueError(f"{true_labels.size} true labels vs {predicted_labels.size} predictions")
    for name, labels in (("true", true_labels), ("predicted", predicted_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise LabelOutOfRangeError(f"{name} labels must lie in 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    auc: Optional[float] = None
    undefined: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        out = {name: getattr(self, name) for name in METRIC_NAMES}
        out["undefined"] = list(self.undefined)
        return out


@dataclass
class EvalReport:
    """Per-class and macro-averaged metrics plus the confusion matrix and loss"""
    class_names: Tuple[str, ...]
    per_class: List[ClassMetrics]
    macro: ClassMetrics
    confusion: ConfusionMatrix
    loss: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "loss": self.loss,
            "averaging": "macro",
            "macro": self.macro.to_dict(),
            "per_class": {name: m.to_dict() for name, m in zip(self.class_names, self.per_class)},
            "confusion_matrix": {"labels": list(self.class_names), "counts": self.confusion.counts.tolist()},
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path


def _ratio(num: float, den: float) -> Tuple[float, bool]:
    if den == 0:
        return 0.0, False
    return num / den, True


def derive_metrics(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> EvalReport:
    """
    One-vs-rest metrics per class and their unweighted mean.

    A 0/0 ratio is reported as 0 and its name is listed in ``undefined``.
    """
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(cm.num_classes))
    per_class = []
    for cls in range(cm.num_classes):
        tp, fp, fn, tn = cm.one_vs_rest(cls)
        undefined = []
        values = {}
        for name, num, den in (("accuracy", tp + tn, cm.total),
                               ("precision", tp, tp + fp),
                               ("recall", tp, tp + fn),
                               ("specificity", tn, tn + fp)):
            values[name], ok = _ratio(num, den)
            if not ok:
                undefined.append(name)
        values["f1"], ok = _ratio(2 * values["precision"] * values["recall"], values["precision"] + values["recall"])
        if not ok:
            undefined.append("f1")
        per_class.append(ClassMetrics(**values, undefined=tuple(undefined)))

    macro = ClassMetrics(
        **{name: float(np.mean([getattr(m, name) for m in per_class]))
           for name in ("accuracy", "precision", "recall", "specificity", "f1")},
        undefined=tuple(sorted({u for m in per_class for u in m.undefined})),
    )
    return EvalReport(class_names=names, per_class=per_class, macro=macro, confusion=cm)


# ============ ROC AUC ============

@dataclass(frozen=True)
class AucResult:
    per_class: Tuple[Optional[float], ...]
    macro: Optional[float]


def binary_auc(is_positive, scores) -> float:
    """P(score of random positive > score of random negative), ties counted 1/2"""
    is_positive = np.asarray(is_positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(is_positive.sum())
    n_neg = is_positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(f"need positives and negatives, got {n_pos} / {n_neg}")
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[is_positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def roc_auc(true_labels, scores) -> AucResult:
    """
    One-vs-rest AUC for each column of scores (N, C).

    Classes without positives or without negatives are undefined (None) and left out
    of the macro mean.
    """
    true_labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if not np.all(np.isfinite(scores)):
        raise NonFiniteError("scores must be finite")
    if scores.shape[0] != true_labels.size:
        raise ValueError(f"{true_labels.size} labels vs {scores.shape[0]} score rows")
    per_class: List[Optional[float]] = []
    for cls in range(scores.shape[1]):
        try:
            per_class.append(binary_auc(true_labels == cls, scores[:, cls]))
        except DegenerateClassError:
            per_class.append(None)
    defined = [a for a in per_class if a is not None]
    return AucResult(per_class=tuple(per_class), macro=float(np.mean(defined)) if defined else None)


def evaluate(probs, labels, weights=None, class_names: Optional[Sequence[str]] = None) -> EvalReport:
    """Full report for predicted probabilities (N, C) against integer labels"""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    num_classes = probs.shape[1]
    w = _weights_array(weights, num_classes)

    report = derive_metrics(confusion(labels, predict_labels(probs), num_classes), class_names)
    report.loss = weighted_nll(probs, labels, w)
    auc = roc_auc(labels, probs)
    for metrics, value in zip(report.per_class, auc.per_class):
        metrics.auc = value
        if value is None:
            metrics.undefined = metrics.undefined + ("auc",)
    report.macro.auc = auc.macro
    return report
