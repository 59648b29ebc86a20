"""Binary classification metrics and bit-stable CSV output."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

__all__ = ["ClassMetrics", "classification_metrics", "format_value", "csv_text", "write_csv"]


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    zero_division: bool = False  # some ratio had a zero denominator and was set to 0

    def as_tuple(self):
        return (self.accuracy, self.precision, self.recall, self.f1)


def classification_metrics(predictions, labels) -> ClassMetrics:
    """Accuracy, precision, recall and F1 with label 1 (malware) as positive."""
    pred = np.asarray(predictions).ravel()
    true = np.asarray(labels).ravel()
    if pred.size == 0 or pred.shape != true.shape:
        raise DomainError("need equal-length, non-empty predictions and labels")
    if not (np.isin(pred, (0, 1)).all() and np.isin(true, (0, 1)).all()):
        raise DomainError("predictions and labels must be binary")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    flagged = False

    def ratio(a, b):
        nonlocal flagged
        if b == 0:
            flagged = True
            return 0.0
        return a / b

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    f1 = ratio(2 * tp, 2 * tp + fp + fn)
    accuracy = float(np.mean(pred == true))
    return ClassMetrics(accuracy, precision, recall, f1, flagged)


def format_value(v) -> str:
    """Integers verbatim, floats to 6 significant digits, booleans as 0/1."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            raise DomainError(f"refusing to write non-finite value {v}")
        out = format(float(v), ".6g")
        return "0" if out == "-0" else out
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(csv_text(columns, rows))
    return path
