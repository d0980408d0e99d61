"""Tables and plots over finished runs.

Everything here is rebuilt from the CSV / JSON artifacts of run folders, never from
checkpoints, so a report can be regenerated after checkpoints are deleted.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from lib.errors import DataError  # noqa: E402
from lib.experiment_store import RunFolder  # noqa: E402
from lib.logger import LOG  # noqa: E402
from lib.metrics import accuracy_curve, backward_forgetting, final_average_accuracy, format_percent  # noqa: E402


@dataclass
class RunSummary:
    run_id: str
    method: str
    dataset: str
    frames_per_video: str
    frame_capacity: str
    acc: float
    bwf: float
    curve: List[float]
    per_class: Optional[pd.DataFrame] = None

    @property
    def label(self) -> str:
        return f"{self.method} ({self.frames_per_video})" if self.frames_per_video != "-" else self.method


def summarize_run(folder: RunFolder) -> RunSummary:
    info = folder.read_run_manifest().get("summary", {})
    R = folder.load_matrix()
    return RunSummary(
        run_id=folder.run_id,
        method=str(info.get("method", folder.run_id)),
        dataset=str(info.get("dataset", "")),
        frames_per_video=str(info.get("frames_per_video", "-")),
        frame_capacity=str(info.get("frame_capacity", "-")),
        acc=final_average_accuracy(R),
        bwf=backward_forgetting(R),
        curve=accuracy_curve(R),
        per_class=folder.load_per_class(),
    )


def result_row(method: str, frames_per_video, frame_capacity, acc: float, bwf: float) -> str:
    """One results row: method, frames_per_video, frame_capacity, Acc%, BWF%."""
    return f"{method}, {frames_per_video}, {frame_capacity}, {format_percent(acc)}, {format_percent(bwf)}"


def comparison_table(summaries: Sequence[RunSummary]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "method": [s.method for s in summaries],
            "frames_per_video": [s.frames_per_video for s in summaries],
            "frame_capacity": [s.frame_capacity for s in summaries],
            "acc_pct": [round(100.0 * s.acc, 2) for s in summaries],
            "bwf_pct": [round(100.0 * s.bwf, 2) for s in summaries],
            "run_id": [s.run_id for s in summaries],
        }
    )


# ==========================================
# Plots
# ==========================================


def curves_frame(summaries: Sequence[RunSummary]) -> pd.DataFrame:
    rows = []
    for s in summaries:
        for t, acc in enumerate(s.curve):
            rows.append({"run_id": s.run_id, "method": s.method, "tasks_learned": t + 1, "avg_accuracy": acc})
    return pd.DataFrame(rows, columns=["run_id", "method", "tasks_learned", "avg_accuracy"])


def plot_accuracy_curves(summaries: Sequence[RunSummary], out_png: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7.0, 4.5), dpi=150)
    for s in summaries:
        ax.plot(range(1, len(s.curve) + 1), [100.0 * a for a in s.curve], marker="o", label=s.label)
    ax.set_xlabel("tasks learned")
    ax.set_ylabel("average accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.savefig(out_png, bbox_inches="tight")
    plt.close(fig)
    return out_png


def per_class_frame(first: RunSummary, second: RunSummary) -> pd.DataFrame:
    """Per-class accuracy of two runs side by side, ascending by the second run."""
    if first.per_class is None or second.per_class is None:
        raise DataError("per-class comparison needs per_class.csv in both runs")
    a = first.per_class.set_index("class_id")["accuracy"].rename(first.run_id)
    b = second.per_class.set_index("class_id")["accuracy"].rename(second.run_id)
    both = pd.concat([a, b], axis=1, join="inner")
    both = both.reset_index().sort_values([second.run_id, "class_id"], kind="mergesort")
    return both.reset_index(drop=True)


def plot_per_class(first: RunSummary, second: RunSummary, table: pd.DataFrame, out_png: Path) -> Path:
    n = len(table)
    fig, ax = plt.subplots(figsize=(7.0, max(3.0, 0.28 * n + 1.0)), dpi=150)
    pos = list(range(n))
    h = 0.4
    ax.barh([p - h / 2 for p in pos], 100.0 * table[first.run_id], height=h, color="#4c78a8", label=first.label)
    ax.barh([p + h / 2 for p in pos], 100.0 * table[second.run_id], height=h, color="#f58518", label=second.label)
    ax.set_yticks(pos)
    ax.set_yticklabels([str(c) for c in table["class_id"]])
    ax.set_xlabel("accuracy (%)")
    ax.set_ylabel("class")
    ax.set_xlim(0, 100)
    ax.legend(loc="lower right")
    fig.savefig(out_png, bbox_inches="tight")
    plt.close(fig)
    return out_png


# ==========================================
# Report
# ==========================================


def write_report(folders: Sequence[RunFolder], out_dir: Union[str, Path], plots: bool = True) -> Dict[str, Path]:
    if not folders:
        raise DataError("report needs at least one completed run")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = [summarize_run(f) for f in folders]
    written: Dict[str, Path] = {}

    table = comparison_table(summaries)
    written["table_csv"] = out_dir / "comparison.csv"
    table.to_csv(written["table_csv"], index=False)
    written["table_txt"] = out_dir / "comparison.txt"
    lines = ["method, frames_per_video, frame_capacity, Acc%, BWF%"]
    lines += [result_row(s.method, s.frames_per_video, s.frame_capacity, s.acc, s.bwf) for s in summaries]
    written["table_txt"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    written["curves_csv"] = out_dir / "accuracy_curves.csv"
    curves_frame(summaries).to_csv(written["curves_csv"], index=False)
    if plots:
        written["curves_png"] = plot_accuracy_curves(summaries, out_dir / "accuracy_curves.png")

    if len(summaries) >= 2 and summaries[0].per_class is not None and summaries[1].per_class is not None:
        pc = per_class_frame(summaries[0], summaries[1])
        written["per_class_csv"] = out_dir / "per_class.csv"
        pc.to_csv(written["per_class_csv"], index=False)
        if plots:
            written["per_class_png"] = plot_per_class(summaries[0], summaries[1], pc, out_dir / "per_class.png")

    LOG(f"Report written to {out_dir}: {', '.join(p.name for p in written.values())}")
    return written
