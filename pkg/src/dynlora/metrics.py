"""Classification metrics, forgetting, and CSV/markdown report emission.

Averaging is macro: every class counts equally, and a class with no support
(zero row or column sum) contributes 0 rather than being skipped.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EvaluationError(ValueError):
    pass


def confusion(preds, labels, n_classes: int) -> np.ndarray:
    """C x C counts, rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise EvaluationError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size and (min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= n_classes):
        raise EvaluationError(f"class index outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _checked(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.sum() <= 0:
        raise EvaluationError("empty confusion matrix")
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class(cm) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (precision, recall, F1)."""
    cm = _checked(cm)
    tp = np.diag(cm).astype(np.float64)
    recall = _safe_div(tp, cm.sum(axis=1).astype(np.float64))
    precision = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def accuracy(cm) -> float:
    cm = _checked(cm)
    return float(np.trace(cm) / cm.sum())


def macro_recall(cm) -> float:
    return float(per_class(cm)[1].mean())


def macro_f1(cm) -> float:
    return float(per_class(cm)[2].mean())


def forgetting(R) -> list[float]:
    """F(t) = R[t][t] - R[t][T-1] for every task except the last."""
    R = np.asarray(R, dtype=np.float64)
    T = R.shape[0]
    return [float(R[t, t] - R[t, T - 1]) for t in range(T - 1)]


@dataclass
class EvalReport:
    accuracy: float
    macro_recall: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    active_ranks: dict[str, int] = field(default_factory=dict)
    forgetting: list[float] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, preds, labels, n_classes: int, **extra) -> EvalReport:
        cm = confusion(preds, labels, n_classes)
        p, r, f = per_class(cm)
        return cls(accuracy(cm), float(r.mean()), float(f.mean()), p.tolist(), r.tolist(), f.tolist(), **extra)

    def headline(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "macro_recall": self.macro_recall, "macro_f1": self.macro_f1}


@dataclass
class ReportRow:
    config: str
    task: str
    metrics: dict[str, float]


_MD_COLS = (("accuracy", "Acc"), ("macro_recall", "Recall"), ("macro_f1", "F1"))


def to_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "task", "metric", "value"])
    for row in rows:
        for metric, value in row.metrics.items():
            w.writerow([row.config, row.task, metric, repr(float(value))])
    return buf.getvalue()


def read_csv(path) -> list[tuple[str, str, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        return [(c, t, m, float(v)) for c, t, m, v in r]


def to_markdown(rows: list[ReportRow], title: str = "Results") -> str:
    """One table per task: config rows x {Acc, Recall, F1} in percent."""
    lines = [f"# {title}", ""]
    tasks = list(dict.fromkeys(r.task for r in rows))
    for task in tasks:
        lines += [f"## {task}", "", "| Configuration | " + " | ".join(h for _, h in _MD_COLS) + " |",
                  "|---|" + "---|" * len(_MD_COLS)]
        for r in rows:
            if r.task != task:
                continue
            cells = [f"{100 * r.metrics[k]:.2f}" if k in r.metrics else "-" for k, _ in _MD_COLS]
            lines.append(f"| {r.config} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def emit_report(rows: list[ReportRow], path, title: str = "Results") -> tuple[Path, Path]:
    """Write ``path`` (CSV) and a markdown summary next to it with suffix ``.md``."""
    path = Path(path)
    md = path.with_suffix(".md")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(to_csv(rows))
    md.write_text(to_markdown(rows, title), encoding="utf-8")
    return path, md
