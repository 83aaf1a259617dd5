"""Weighted classification metrics and one-vs-rest ROC/AUC reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import ImageCache, apply_norm, batch_iter
from .model import model_forward


class MetricsError(ValueError):
    """Metric is undefined for the given inputs."""


@dataclass
class RocCurve:
    class_index: int
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    precision: float
    f1: float
    support: list
    per_class_auc: list          # None where undefined
    zero_division_hit: bool = False

    def to_json(self):
        return json.dumps({
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "precision": self.precision,
            "f1": self.f1,
            "support": self.support,
            "per_class_auc": self.per_class_auc,
            "zero_division_hit": self.zero_division_hit,
        }, indent=2, sort_keys=True)


def confusion_matrix(y_true, y_pred, num_classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise MetricsError("y_true and y_pred length mismatch")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise MetricsError(f"{name} label out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def weighted_metrics(cm):
    """Support-weighted accuracy, sensitivity, precision and F1.

    Per-class precision/recall/F1 with a vanishing denominator are
    defined as 0; the report flags when that happened.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    diag = np.diag(cm)
    zero_hit = bool(np.any((support == 0) | (predicted == 0)))
    recall = np.divide(diag, support, out=np.zeros_like(diag), where=support > 0)
    precision = np.divide(diag, predicted, out=np.zeros_like(diag),
                          where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom,
                   out=np.zeros_like(diag), where=denom > 0)
    w = support / total
    return {
        "accuracy": float(diag.sum() / total),
        "sensitivity": float((w * recall).sum()),
        "precision": float((w * precision).sum()),
        "f1": float((w * f1).sum()),
        "support": support.astype(int).tolist(),
        "zero_division_hit": zero_hit,
    }


def roc_points(scores, positives):
    """One-vs-rest ROC staircase anchored at (0,0) and (1,1).

    Thresholds sweep the unique scores in descending order; ties move
    both counts at once.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC undefined: only one class present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positives[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    # keep the last index of each tie group
    last = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tpr = np.concatenate([[0.0], tp[last] / n_pos])
    fpr = np.concatenate([[0.0], fp[last] / n_neg])
    return fpr, tpr


def auc_trapezoid(fpr, tpr):
    return float(np.trapezoid(tpr, fpr))


def roc_curve(scores, positives, class_index=0):
    fpr, tpr = roc_points(scores, positives)
    return RocCurve(class_index, fpr, tpr, auc_trapezoid(fpr, tpr))


def predict_scores(params, model_cfg, entries, table, data_root, batch=64):
    """Eval-mode softmax probabilities and labels for a manifest split."""
    cache = ImageCache(data_root, model_cfg.input_side)
    rng = np.random.default_rng(0)
    all_probs, all_labels, all_ids = [], [], []
    for imgs, feats, labels, ids in batch_iter(entries, table, cache, batch, rng):
        dt = params.dtype
        logits = model_forward(T.Tensor(imgs.astype(dt)),
                               T.Tensor(feats.astype(dt)), params,
                               model_cfg, "eval")
        all_probs.append(T.softmax(logits.data))
        all_labels.append(labels)
        all_ids.extend(ids)
    probs = np.vstack(all_probs)
    labels = np.concatenate(all_labels)
    # restore manifest order (batch_iter shuffles)
    order = {iid: i for i, iid in enumerate(all_ids)}
    idx = [order[p] for p, _ in entries]
    return probs[idx], labels[idx]


def evaluate(params, model_cfg, norm_stats, entries, table, data_root,
             batch=64):
    """MetricsReport plus per-class ROC curves for one split."""
    normed = apply_norm(table, norm_stats)
    probs, labels = predict_scores(params, model_cfg, entries, normed,
                                   data_root, batch)
    num_classes = model_cfg.num_classes
    cm = confusion_matrix(labels, probs.argmax(axis=1), num_classes)
    m = weighted_metrics(cm)
    curves = []
    per_class_auc = []
    for c in range(num_classes):
        try:
            curve = roc_curve(probs[:, c], labels == c, c)
            curves.append(curve)
            per_class_auc.append(curve.auc)
        except MetricsError:
            per_class_auc.append(None)
    report = MetricsReport(
        accuracy=m["accuracy"],
        sensitivity=m["sensitivity"],
        precision=m["precision"],
        f1=m["f1"],
        support=m["support"],
        per_class_auc=per_class_auc,
        zero_division_hit=m["zero_division_hit"],
    )
    return report, curves


def write_roc_csv(curves, path):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("class,fpr,tpr\n")
        for curve in curves:
            for f, t in zip(curve.fpr, curve.tpr):
                fh.write(f"{curve.class_index},{f:.17g},{t:.17g}\n")
