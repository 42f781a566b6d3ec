"""Classification metrics reported by the lab: macro-averaged F1 and top-1 accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import ValidationError, as_label_array


@dataclass
class Metrics:
    """Final metrics of a run plus the per-epoch trajectory that produced them."""

    f1: float
    top1_accuracy: float
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name, value in (("f1", self.f1), ("top1_accuracy", self.top1_accuracy)):
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")


def top1_accuracy(y_true, y_pred):
    y_true = as_label_array(y_true, name="y_true")
    y_pred = as_label_array(y_pred, name="y_pred")
    if y_true.size == 0:
        raise ValidationError("cannot score an empty label array")
    if y_true.shape != y_pred.shape:
        raise ValidationError("y_true and y_pred must have identical shapes")
    return float(np.mean(y_true == y_pred))


def macro_f1(y_true, y_pred, n_classes=None):
    """Macro-averaged F1: unweighted mean of per-class F1 over classes present in y_true.

    Classes with no true and no predicted samples are excluded from the average;
    a class with true samples but zero correct predictions contributes F1 = 0.
    """
    y_true = as_label_array(y_true, name="y_true")
    y_pred = as_label_array(y_pred, name="y_pred")
    if y_true.size == 0:
        raise ValidationError("cannot score an empty label array")
    if y_true.shape != y_pred.shape:
        raise ValidationError("y_true and y_pred must have identical shapes")
    if n_classes is None:
        classes = np.union1d(np.unique(y_true), np.unique(y_pred))
    else:
        classes = np.arange(n_classes)
    scores = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def evaluate_predictions(y_true, y_pred, n_classes=None, history=None):
    return Metrics(
        f1=macro_f1(y_true, y_pred, n_classes=n_classes),
        top1_accuracy=top1_accuracy(y_true, y_pred),
        history=list(history) if history else [],
    )
