"""Continual-learning metrics computed from accuracy matrices.

R[i][j] is the accuracy on task j after training task i (j <= i). Reports are always
computed from persisted matrices so every number can be regenerated from artifacts.
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from lib.errors import DataError


@dataclass
class AccuracyMatrix:
    n_tasks: int
    rows: List[List[float]] = field(default_factory=list)

    def __post_init__(self):
        if self.n_tasks < 1:
            raise DataError("an accuracy matrix needs at least one task")
        rows, self.rows = self.rows, []
        for r in rows:
            self.add_row(r)

    def add_row(self, row: Sequence[float]) -> None:
        i = len(self.rows)
        if i >= self.n_tasks:
            raise DataError(f"accuracy matrix already has {self.n_tasks} rows")
        if len(row) != i + 1:
            raise DataError(f"row {i} must have {i + 1} entries, got {len(row)}")
        values = [float(v) for v in row]
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise DataError(f"row {i} has accuracies outside [0, 1]: {values}")
        self.rows.append(values)

    def __getitem__(self, ij: Tuple[int, int]) -> float:
        i, j = ij
        if j > i:
            raise IndexError(f"R[{i}][{j}] is above the diagonal")
        return self.rows[i][j]

    @property
    def completed(self) -> int:
        return len(self.rows)

    @property
    def is_complete(self) -> bool:
        return self.completed == self.n_tasks

    # --- persistence ---
    def to_frame(self) -> pd.DataFrame:
        cols = [f"acc_task_{j}" for j in range(self.n_tasks)]
        data = [row + [np.nan] * (self.n_tasks - len(row)) for row in self.rows]
        df = pd.DataFrame(data, columns=cols)
        df.insert(0, "after_task", list(range(len(self.rows))))
        return df

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, na_rep="")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "AccuracyMatrix":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Accuracy matrix not found: {path}")
        df = pd.read_csv(path)
        if "after_task" not in df.columns:
            raise DataError(f"{path}: missing 'after_task' column")
        cols = [c for c in df.columns if c.startswith("acc_task_")]
        matrix = cls(n_tasks=len(cols))
        for i, (_, rec) in enumerate(df.sort_values("after_task").iterrows()):
            row = [float(rec[f"acc_task_{j}"]) for j in range(i + 1)]
            if any(np.isnan(v) for v in row):
                raise DataError(f"{path}: row {i} has empty cells on or below the diagonal")
            matrix.add_row(row)
        return matrix


# ==========================================
# Scalar metrics
# ==========================================


def backward_forgetting(R: AccuracyMatrix, i: Optional[int] = None) -> float:
    """BWF_i: mean over j < i of R[j][j] - R[i][j]; defaults to the last completed task.

    Negative values mean backward transfer. A single trained task has no earlier tasks
    to forget and reports 0.
    """
    if i is None:
        i = R.completed - 1
    if i < 0 or i >= R.completed:
        raise DataError(f"task {i} has not been evaluated")
    if i == 0:
        return 0.0
    return float(np.mean([R[j, j] - R[i, j] for j in range(i)]))


def final_average_accuracy(R: AccuracyMatrix) -> float:
    if not R.is_complete:
        raise DataError(f"incomplete matrix: {R.completed}/{R.n_tasks} tasks evaluated")
    return float(np.mean(R.rows[-1]))


def accuracy_curve(R: AccuracyMatrix) -> List[float]:
    """Average accuracy over the seen tasks after each task."""
    return [float(np.mean(row)) for row in R.rows]


# ==========================================
# Per-class accuracy
# ==========================================


@dataclass
class PerClassReport:
    accuracy: Dict[int, float]  # ascending by accuracy, hardest classes first
    counts: Dict[int, int]
    excluded: List[int] = field(default_factory=list)  # classes without samples

    def overall(self) -> float:
        total = sum(self.counts.values())
        return sum(self.accuracy[c] * self.counts[c] for c in self.accuracy) / total if total else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "class_id": list(self.accuracy),
                "accuracy": list(self.accuracy.values()),
                "samples": [self.counts[c] for c in self.accuracy],
            }
        )


def per_class_report(predictions: Iterable[Tuple[int, int]],
                     classes: Optional[Iterable[int]] = None) -> PerClassReport:
    """Per-class fraction correct from (true class, predicted class) pairs."""
    correct: Dict[int, int] = defaultdict(int)
    counts: Dict[int, int] = defaultdict(int)
    for true_id, pred_id in predictions:
        counts[int(true_id)] += 1
        correct[int(true_id)] += int(int(true_id) == int(pred_id))
    if not counts:
        raise DataError("per-class report needs at least one prediction")

    acc = {c: correct[c] / counts[c] for c in counts}
    ordered = dict(sorted(acc.items(), key=lambda kv: (kv[1], kv[0])))
    excluded = sorted(set(classes or ()) - set(counts))
    return PerClassReport(accuracy=ordered, counts={c: counts[c] for c in ordered}, excluded=excluded)


# ==========================================
# Metrics report JSON
# ==========================================


def metrics_report(R: AccuracyMatrix, per_class: Optional[PerClassReport] = None) -> Dict[str, Any]:
    report: Dict[str, Any] = {
        "acc": final_average_accuracy(R),
        "bwf": backward_forgetting(R),
        "curve": accuracy_curve(R),
        "per_class": {str(c): a for c, a in per_class.accuracy.items()} if per_class else {},
    }
    if per_class and per_class.excluded:
        report["per_class_excluded"] = per_class.excluded
    return report


def save_metrics(report: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    return path


def format_percent(x: float) -> str:
    return f"{100.0 * x:.2f}%"
