"""Ranking and classification metrics.

Average precision is the non-interpolated step sum
``sum_k (R_k - R_{k-1}) * P_k`` over the ranked list, with ties broken by
original index. Classes without positives have no AP and are left out of the
mean.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def average_precision(scores, labels):
    """AP of one ranking; returns ``None`` when there are no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if scores.size == 0:
        raise ValueError("average_precision needs at least one item")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(bool)
    n_pos = int(hits.sum())
    if n_pos == 0:
        return None
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hits.sum() / n_pos)


def per_class_ap(scores, labels):
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-shape matrices")
    return [average_precision(scores[:, j], labels[:, j]) if len(scores) else None
            for j in range(scores.shape[1])]


def mean_ap(scores, labels):
    aps = [a for a in per_class_ap(scores, labels) if a is not None]
    if not aps:
        warnings.warn("no class has a positive label; mAP reported as 0", RuntimeWarning)
        return 0.0
    return float(np.mean(aps))


def classification_metrics(pred, truth, n_disc):
    """Return ``(accuracy, macro_f1)``; a class with 0/0 precision or recall scores F1 = 0."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} differ")
    for name, a in (("pred", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= n_disc):
            raise ValueError(f"{name} contains class indices outside [0, {n_disc})")
    if pred.size == 0:
        return 0.0, 0.0
    accuracy = float(np.mean(pred == truth))
    conf = confusion_matrix(pred, truth, n_disc)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1)  # predicted + actual = 2tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(n_disc), where=denom > 0)
    return accuracy, float(f1.mean())


def confusion_matrix(pred, truth, n_disc):
    """Rows are true classes, columns predicted classes."""
    conf = np.zeros((n_disc, n_disc), dtype=np.int64)
    np.add.at(conf, (np.asarray(truth), np.asarray(pred)), 1)
    return conf


def avd_error(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"AVD arrays must both be (n, 3), got {pred.shape} and {truth.shape}")
    if len(pred) == 0:
        return np.zeros(3)
    return ((pred - truth) ** 2).mean(axis=0)


@dataclass
class EvalReport:
    task: str
    n_samples: int
    map: float = None
    per_class_ap: list = field(default_factory=list)
    accuracy: float = None
    macro_f1: float = None
    avd_mse: list = None
    class_counts: list = field(default_factory=list)

    def summary(self):
        out = {}
        if self.map is not None:
            out["map"] = self.map
        if self.avd_mse is not None:
            out["avd_mse"] = float(np.mean(self.avd_mse))
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
            out["macro_f1"] = self.macro_f1
        return out

    def to_text(self):
        """``key = value`` lines; scores printed to four decimals."""
        lines = [f"task = {self.task}", f"n_samples = {self.n_samples}"]
        if self.map is not None:
            lines.append(f"map = {self.map:.4f}")
            aps = ["nan" if a is None else f"{a:.4f}" for a in self.per_class_ap]
            lines.append(f"per_class_ap = {' '.join(aps)}")
            lines.append(f"avd_mse = {' '.join(f'{v:.4f}' for v in self.avd_mse)}")
        if self.accuracy is not None:
            lines.append(f"accuracy = {self.accuracy:.4f}")
            lines.append(f"macro_f1 = {self.macro_f1:.4f}")
        lines.append(f"class_counts = {' '.join(str(c) for c in self.class_counts)}")
        return "\n".join(lines) + "\n"


def multilabel_report(scores, y_disc, cont, y_cont):
    aps = per_class_ap(scores, y_disc)
    return EvalReport(
        task="multilabel_cont", n_samples=len(scores), map=mean_ap(scores, y_disc),
        per_class_ap=aps, avd_mse=avd_error(cont, y_cont).tolist(),
        class_counts=np.asarray(y_disc).sum(axis=0).astype(int).tolist())


def single_label_report(logits, y_class, n_disc):
    pred = np.argmax(logits, axis=-1)
    acc, f1 = classification_metrics(pred, y_class, n_disc)
    counts = np.bincount(np.asarray(y_class, dtype=np.int64), minlength=n_disc)
    return EvalReport(task="single_label", n_samples=len(logits), accuracy=acc, macro_f1=f1,
                      class_counts=counts.tolist())


def mean_std(values):
    """Format seed-level scores as ``"mean (std)"`` with the mean in percent."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return f"{100 * values.mean():.2f} ({std:.3f})"
