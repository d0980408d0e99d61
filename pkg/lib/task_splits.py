"""Class-incremental task sequences: generation, statistics and JSON export."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from lib.errors import SplitError
from lib.logger import LOG
from lib.manifest import DatasetManifest


@dataclass(frozen=True)
class Task:
    task_index: int
    class_ids: Tuple[int, ...]
    train_ids: Tuple[str, ...] = ()
    val_ids: Tuple[str, ...] = ()
    test_ids: Tuple[str, ...] = ()

    def ids(self, partition: str) -> Tuple[str, ...]:
        if partition == "train":
            return self.train_ids
        if partition == "val":
            return self.val_ids
        if partition == "test":
            return self.test_ids
        raise SplitError(f"unknown partition '{partition}'")


@dataclass(frozen=True)
class TaskSequence:
    seed: int
    tasks: Tuple[Task, ...]
    manifest_name: str = ""
    stats: Optional[Dict[str, Any]] = field(default=None, compare=False)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def all_class_ids(self) -> List[int]:
        return [c for t in self.tasks for c in t.class_ids]


def _task_sizes(num_classes: int, num_tasks: int) -> List[int]:
    # earlier tasks absorb the remainder, one extra class each
    base, extra = divmod(num_classes, num_tasks)
    return [base + 1 if i < extra else base for i in range(num_tasks)]


def generate_task_sequence(manifest: DatasetManifest, num_tasks: int, seed: int) -> TaskSequence:
    """Shuffle classes with a seeded permutation and cut them into balanced, disjoint tasks."""
    if num_tasks < 2:
        raise SplitError(f"num_tasks must be >= 2, got {num_tasks}")
    unlabeled = [r.video_id for r in manifest.records if r.class_id is None]
    if unlabeled:
        raise SplitError(
            f"{len(unlabeled)} records have no class (e.g. '{unlabeled[0]}'); label or trim the manifest first"
        )

    classes = manifest.class_ids()
    if len(classes) < num_tasks:
        raise SplitError(f"cannot split {len(classes)} classes into {num_tasks} tasks")

    rng = np.random.default_rng(seed)
    order = [int(c) for c in rng.permutation(np.asarray(classes, dtype=np.int64))]

    tasks: List[Task] = []
    start = 0
    for task_index, size in enumerate(_task_sizes(len(classes), num_tasks)):
        class_set = set(order[start:start + size])
        start += size
        parts: Dict[str, List[str]] = {"train": [], "val": [], "test": []}
        for rec in manifest.records:
            if rec.class_id in class_set:
                parts[rec.partition].append(rec.video_id)
        shuffled = {}
        for name in ("train", "val", "test"):
            ids = parts[name]
            shuffled[name] = tuple(ids[i] for i in rng.permutation(len(ids)))
        tasks.append(
            Task(
                task_index=task_index,
                class_ids=tuple(sorted(class_set)),
                train_ids=shuffled["train"],
                val_ids=shuffled["val"],
                test_ids=shuffled["test"],
            )
        )

    seq = TaskSequence(seed=seed, tasks=tuple(tasks), manifest_name=manifest.name)
    LOG(f"Generated {num_tasks}-task sequence for '{manifest.name}' (seed={seed})")
    return seq


def check_task_sequence(seq: TaskSequence, manifest: DatasetManifest) -> None:
    """Raise SplitError unless the sequence is class-disjoint and consistent with the manifest."""
    seen: Dict[int, int] = {}
    for task in seq.tasks:
        for c in task.class_ids:
            if c in seen:
                raise SplitError(f"class {c} appears in tasks {seen[c]} and {task.task_index}")
            seen[c] = task.task_index
        allowed = set(task.class_ids)
        for part in ("train", "val", "test"):
            for vid in task.ids(part):
                rec = manifest.by_id.get(vid)
                if rec is None:
                    raise SplitError(f"task {task.task_index}: video '{vid}' not in manifest '{manifest.name}'")
                if rec.class_id not in allowed:
                    raise SplitError(
                        f"task {task.task_index}: video '{vid}' has class {rec.class_id} outside the task"
                    )


# ==========================================
# Statistics
# ==========================================


def split_statistics(seq: TaskSequence, manifest: DatasetManifest) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    rows = []
    for task in seq.tasks:
        vids = list(task.train_ids) + list(task.val_ids) + list(task.test_ids)
        frames = [manifest.by_id[v].total_frames for v in vids]
        rows.append(
            {
                "task": task.task_index,
                "classes": len(task.class_ids),
                "train_videos": len(task.train_ids),
                "val_videos": len(task.val_ids),
                "test_videos": len(task.test_ids),
                "avg_frames": float(np.mean(frames)) if frames else 0.0,
            }
        )
    df = pd.DataFrame(rows)

    class_counts = sorted({int(c) for c in df["classes"]})
    summary = {
        "dataset": manifest.name,
        "trim_mode": manifest.trim_mode,
        "num_tasks": seq.num_tasks,
        "classes_per_task": class_counts[0] if len(class_counts) == 1 else f"{class_counts[0]}-{class_counts[-1]}",
        "videos_per_task": round(float(df["train_videos"].mean()), 1),
        "avg_frames_per_video": round(manifest.avg_frames(), 1),
    }
    return df, summary


# ==========================================
# JSON export
# ==========================================


def save_task_sequence(seq: TaskSequence, path: Union[str, Path], stats: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc: Dict[str, Any] = {
        "manifest": seq.manifest_name,
        "seed": seq.seed,
        "num_tasks": seq.num_tasks,
        "tasks": [
            {
                "task_index": t.task_index,
                "class_ids": list(t.class_ids),
                "train_ids": list(t.train_ids),
                "val_ids": list(t.val_ids),
                "test_ids": list(t.test_ids),
            }
            for t in seq.tasks
        ],
    }
    if stats is not None:
        doc["stats"] = stats
    with path.open("w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    return path


def load_task_sequence(path: Union[str, Path]) -> TaskSequence:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Task sequence not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as f:
            doc = json.load(f)
        tasks = tuple(
            Task(
                task_index=int(t["task_index"]),
                class_ids=tuple(int(c) for c in t["class_ids"]),
                train_ids=tuple(t.get("train_ids", [])),
                val_ids=tuple(t.get("val_ids", [])),
                test_ids=tuple(t.get("test_ids", [])),
            )
            for t in doc["tasks"]
        )
        return TaskSequence(
            seed=int(doc["seed"]), tasks=tasks, manifest_name=doc.get("manifest", ""), stats=doc.get("stats")
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise SplitError(f"malformed task sequence {path}: {e}") from None
