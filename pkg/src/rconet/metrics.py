"""Confusion matrices and the six evaluation metrics.

Per class the multi-class problem is collapsed one-vs-rest into TP/TN/FP/FN,
and ACC, SEN, SPE, BAC, PPV and F1 follow the usual chest X-ray screening
definitions. Note that F1 here is ``2*ACC*SEN / (ACC+SEN)``, built
from accuracy and sensitivity rather than precision; the textbook F1 is
reported separately as ``f1_standard``. A ratio with a zero denominator is
reported as 0 and listed in ``undefined``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError

METRICS = ("ACC", "SEN", "SPE", "BAC", "PPV", "F1")
CSV_COLUMNS = ("class", "TP", "TN", "FP", "FN") + METRICS + ("f1_standard",)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows true class, columns predicted class

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(preds, labels, n_classes):
    preds = np.asarray(preds, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if preds.shape != labels.shape:
        raise ContractError("predictions and labels differ in length")
    for name, ids in (("prediction", preds), ("label", labels)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise ContractError(f"{name} id outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassMetrics:
    TP: int
    TN: int
    FP: int
    FN: int
    values: dict
    undefined: list = field(default_factory=list)


@dataclass
class MetricsReport:
    per_class: list
    macro: dict
    n_samples: int
    multiclass_accuracy: float
    class_names: list

    def row(self, name):
        if name == "macro":
            return self.macro
        return self.per_class[self.class_names.index(name)].values


def _ratio(num, den, key, undefined):
    if den == 0:
        undefined.append(key)
        return 0.0
    return num / den


def binary_metrics(tp, tn, fp, fn):
    """The six metrics (plus standard F1) from one-vs-rest counts."""
    und = []
    acc = _ratio(tp + tn, tp + tn + fp + fn, "ACC", und)
    sen = _ratio(tp, tp + fn, "SEN", und)
    spe = _ratio(tn, tn + fp, "SPE", und)
    ppv = _ratio(tp, tp + fp, "PPV", und)
    f1 = _ratio(2 * acc * sen, acc + sen, "F1", und)
    f1s = _ratio(2 * ppv * sen, ppv + sen, "f1_standard", und)
    vals = {"ACC": acc, "SEN": sen, "SPE": spe, "BAC": (sen + spe) / 2, "PPV": ppv, "F1": f1,
            "f1_standard": f1s}
    return vals, und


def compute_metrics(cm: ConfusionMatrix, class_names=None):
    counts = np.asarray(cm.counts)
    total = int(counts.sum())
    if total == 0:
        raise ContractError("confusion matrix is empty")
    c = counts.shape[0]
    names = list(class_names) if class_names else [str(i) for i in range(c)]
    per_class = []
    for k in range(c):
        tp = int(counts[k, k])
        fn = int(counts[k].sum() - tp)
        fp = int(counts[:, k].sum() - tp)
        tn = total - tp - fn - fp
        vals, und = binary_metrics(tp, tn, fp, fn)
        per_class.append(ClassMetrics(tp, tn, fp, fn, vals, und))
    macro = {key: float(np.mean([pc.values[key] for pc in per_class])) for key in METRICS + ("f1_standard",)}
    return MetricsReport(per_class, macro, total, float(np.trace(counts) / total), names)


def _fmt(v):
    return f"{v:.9f}"


def report_rows(r: MetricsReport):
    rows = []
    for name, pc in zip(r.class_names, r.per_class):
        rows.append([name, pc.TP, pc.TN, pc.FP, pc.FN] + [_fmt(pc.values[k]) for k in CSV_COLUMNS[5:]])
    macro_counts = [""] * 4
    rows.append(["macro"] + macro_counts + [_fmt(r.macro[k]) for k in CSV_COLUMNS[5:]])
    return rows


def report_dict(r: MetricsReport):
    classes = []
    for name, pc in zip(r.class_names, r.per_class):
        entry = {"class": name, "TP": pc.TP, "TN": pc.TN, "FP": pc.FP, "FN": pc.FN}
        entry.update({k: round(pc.values[k], 9) for k in CSV_COLUMNS[5:]})
        entry["undefined"] = list(pc.undefined)
        classes.append(entry)
    return {
        "n_samples": r.n_samples,
        "multiclass_accuracy": round(r.multiclass_accuracy, 9),
        "classes": classes,
        "macro": {k: round(r.macro[k], 9) for k in CSV_COLUMNS[5:]},
    }


def emit_report(r: MetricsReport, fmt, path):
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_COLUMNS)
                w.writerows(report_rows(r))
        elif fmt == "json":
            path.write_text(json.dumps(report_dict(r), indent=2) + "\n")
        else:
            raise ContractError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def read_report_csv(path):
    """{row name: {column: float}} from an emitted CSV report."""
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["class"]] = {k: float(v) for k, v in row.items() if k != "class" and v != ""}
    return out


def aggregate_reports(paths):
    """Mean and variance of every metric across run CSVs.

    Returns {row: {metric: (mean, variance)}}; the variance is the population
    variance across runs.
    """
    runs = [read_report_csv(p) for p in paths]
    if not runs:
        raise ContractError("no reports to aggregate")
    out = {}
    for row in runs[0]:
        out[row] = {}
        for metric in METRICS + ("f1_standard",):
            vals = np.array([run[row][metric] for run in runs if row in run])
            out[row][metric] = (float(vals.mean()), float(vals.var()))
    return out
