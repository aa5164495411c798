"""Confusion matrices, per-stage and global scores, and single/multi agreement."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .stages import N_STAGES, STAGES, StageLabel


def confusion(truth: Sequence[int], pred: Sequence[int], n: int = N_STAGES) -> np.ndarray:
    """Counts with rows = true stage, columns = predicted stage."""
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        raise ValueError(f"{len(truth)} true labels but {len(pred)} predictions")
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


@dataclass
class MetricReport:
    recall: list[float | None]
    precision: list[float | None]
    f1: list[float | None]
    accuracy: float
    mf1: float | None
    kappa: float
    support: list[float]
    total: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [s.short for s in STAGES]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        """Human-readable summary with percentages to two decimals."""
        pct = lambda v: "  n/a " if v is None else f"{100 * v:6.2f}"  # noqa: E731
        lines = ["stage   recall  precision  F1"]
        for i, s in enumerate(STAGES):
            lines.append(f"{s.short:<6} {pct(self.recall[i])}  {pct(self.precision[i])}   {pct(self.f1[i])}")
        lines.append(f"accuracy {100 * self.accuracy:.2f}  kappa {self.kappa:.2f}  MF1 {pct(self.mf1).strip()}")
        return "\n".join(lines)


def report(cm) -> MetricReport:
    """Scores from a confusion matrix of counts or rates.

    Recall or precision with an empty denominator is ``None`` and so is the F1
    built from it; MF1 averages the defined F1 values only (``None`` if
    there are none).
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    recall = [float(tp[i] / rows[i]) if rows[i] > 0 else None for i in range(len(cm))]
    precision = [float(tp[i] / cols[i]) if cols[i] > 0 else None for i in range(len(cm))]
    f1 = []
    for p, r in zip(precision, recall):
        if p is None or r is None:
            f1.append(None)
        else:
            f1.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    defined = [v for v in f1 if v is not None]
    acc = float(tp.sum() / total)
    pe = float((rows * cols).sum() / total ** 2)
    kappa = 1.0 if pe == 1.0 else (acc - pe) / (1.0 - pe)
    return MetricReport(recall, precision, f1, acc, float(np.mean(defined)) if defined else None, float(kappa),
                        rows.tolist(), float(total))


def kappa(truth, pred) -> float:
    return report(confusion(truth, pred)).kappa


@dataclass
class AgreementCell:
    total: int = 0
    corrected: int = 0
    corrupted: int = 0


@dataclass
class AgreementMatrix:
    """Off-diagonal (single-epoch stage, multi-epoch stage) disagreements."""

    cells: dict[tuple[int, int], AgreementCell] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, int, int, int]]:
        return [(StageLabel(a).short, StageLabel(b).short, c.total, c.corrected, c.corrupted)
                for (a, b), c in sorted(self.cells.items())]


def agreement_matrix(single: Sequence[int], multi: Sequence[int], truth: Sequence[int]) -> AgreementMatrix:
    """Where the two networks disagree, count how often the multi-epoch net fixed or broke the call."""
    if not (len(single) == len(multi) == len(truth)):
        raise ValueError("single, multi and truth must have equal length")
    out = AgreementMatrix()
    for s, m, t in zip(single, multi, truth):
        s, m, t = int(s), int(m), int(t)
        if s == m:
            continue
        cell = out.cells.setdefault((s, m), AgreementCell())
        cell.total += 1
        if s != t and m == t:
            cell.corrected += 1
        elif s == t and m != t:
            cell.corrupted += 1
    return out


def fold_summary(cms: Sequence[np.ndarray]) -> dict:
    """Per-fold mean and std of the global scores plus the report of the pooled matrix."""
    reports = [report(cm) for cm in cms]
    summary = {}
    for key in ("accuracy", "kappa", "mf1"):
        vals = np.array([getattr(r, key) for r in reports if getattr(r, key) is not None])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())} if len(vals) else None
    summary["pooled"] = report(np.sum(cms, axis=0)).to_dict()
    summary["per_fold"] = [r.to_dict() for r in reports]
    return summary


def write_confusion_csv(path, cm) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + [s.short for s in STAGES])
        for s, row in zip(STAGES, np.asarray(cm)):
            w.writerow([s.short] + [repr(v.item()) if hasattr(v, "item") else repr(v) for v in row])


def write_agreement_csv(path, agreement: AgreementMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["single_pred", "multi_pred", "total", "corrected", "corrupted"])
        w.writerows(agreement.rows())
