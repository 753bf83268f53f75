"""Classification metrics: report, confusion matrix, one-vs-rest ROC, seed aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence

import numpy as np

from .data import CLASS_NAMES


def confusion_matrix(labels, predictions, n_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValueError(f"labels {labels.shape} and predictions {predictions.shape} differ in shape")
    for name, arr in (("label", labels), ("prediction", predictions)):
        bad = arr[(arr < 0) | (arr >= n_classes)]
        if bad.size:
            raise ValueError(f"{name} {int(bad[0])} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def classification_report(labels, predictions, class_names: Sequence[str] = CLASS_NAMES) -> dict:
    """Per-class precision/recall/F1/support plus macro and weighted means and accuracy."""
    names = list(class_names)
    cm = confusion_matrix(labels, predictions, len(names))
    tp = np.diag(cm)
    pred_tot, true_tot = cm.sum(axis=0), cm.sum(axis=1)
    per_class = {}
    for c, name in enumerate(names):
        p, r = _ratio(tp[c], pred_tot[c]), _ratio(tp[c], true_tot[c])
        per_class[name] = {"precision": p, "recall": r, "f1": _ratio(2 * p * r, p + r), "support": int(true_tot[c])}
    total = int(cm.sum())
    keys = ("precision", "recall", "f1")
    macro = {k: float(np.mean([per_class[n][k] for n in names])) for k in keys}
    weighted = {k: _ratio(sum(per_class[n][k] * per_class[n]["support"] for n in names), total) for k in keys}
    return {"accuracy": _ratio(tp.sum(), total), "per_class": per_class, "macro": macro, "weighted": weighted,
            "support": total, "confusion": cm.tolist()}


def f1_from_pr(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_curve(is_positive, scores) -> RocCurve:
    """Threshold sweep from high to low score; equal scores form one step.

    The first point is (0, 0) at threshold +inf. AUC is the trapezoid area,
    accumulated on integer counts so it equals the pairwise-ranking value
    ``P(s_pos > s_neg) + P(tie) / 2`` exactly. With no positives or no
    negatives the AUC is undefined and reported as NaN.
    """
    y = np.asarray(is_positive, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(~y)[last]]
    n_pos, n_neg = int(tp[-1]), int(fp[-1])
    thresholds = np.r_[np.inf, s[last]]
    if n_pos == 0 or n_neg == 0:
        auc = math.nan
    else:
        twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
        auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(fpr=fp / max(n_neg, 1), tpr=tp / max(n_pos, 1), thresholds=thresholds, auc=auc)


def roc_auc_ovr(labels, probabilities, class_names: Sequence[str] = CLASS_NAMES) -> Dict[str, RocCurve]:
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probabilities)
    if probs.ndim != 2 or probs.shape != (labels.size, len(class_names)):
        raise ValueError(f"probabilities must be ({labels.size}, {len(class_names)}), got {probs.shape}")
    return {name: roc_curve(labels == c, probs[:, c]) for c, name in enumerate(class_names)}


def aggregate(values) -> tuple:
    """Mean and sample standard deviation (ddof=1; one value gives 0)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate needs at least one value")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def format_pm(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


# -- writers ----------------------------------------------------------------------

def write_confusion_csv(cm, path, class_names: Sequence[str] = CLASS_NAMES) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, np.asarray(cm)):
            w.writerow([name, *[int(v) for v in row]])


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            w.writerow([repr(float(f)), repr(float(t)), "inf" if np.isinf(th) else repr(float(th))])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_evaluation(out_dir, report: dict, rocs: Dict[str, RocCurve], extra: dict = None) -> None:
    """metrics.json, confusion.csv and one roc_<class>.csv per class."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = dict(report)
    body["auc"] = {name: c.auc for name, c in rocs.items()}
    finite = [c.auc for c in rocs.values() if not math.isnan(c.auc)]
    body["auc_macro"] = float(np.mean(finite)) if finite else math.nan
    if extra:
        body.update(extra)
    write_json(body, out / "metrics.json")
    names = list(report["per_class"])
    write_confusion_csv(report["confusion"], out / "confusion.csv", names)
    for name, curve in rocs.items():
        write_roc_csv(curve, out / f"roc_{name}.csv")
