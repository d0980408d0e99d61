"""On-disk experiment store.

<root>/<run_id>/
    run_manifest.json      config, seeds and digests of the inputs
    config.json            the experiment document as run
    checkpoints/task_XX/   model, memory snapshot, importance, trainer state
    accuracy_matrix.csv    R[i][j]
    metrics.json           {acc, bwf, curve, per_class}
    memory_trace.csv       stored frames and wall clock per task
    per_class.csv          final per-class accuracy
    plots/                 emitted by the report command
"""

import hashlib
import json
import os
import shutil
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd
from dotenv import load_dotenv

from lib.errors import ConfigError, DataError, RunExistsError
from lib.logger import LOG
from lib.metrics import AccuracyMatrix, metrics_report, save_metrics

load_dotenv()

DEFAULT_STORE_ROOT = "./runs"


def store_root() -> Path:
    return Path(os.getenv("VIDEO_CIL_STORE", DEFAULT_STORE_ROOT))


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def make_run_id(method: str, dataset: str, num_tasks: int, frames_per_video: Union[int, str], seed: int) -> str:
    safe_dataset = "".join(ch if ch.isalnum() or ch in "-_" else "-" for ch in dataset)
    return f"{method.replace('+', '-')}_{safe_dataset}_t{num_tasks}_f{frames_per_video}_s{seed}"


@dataclass
class RunFolder:
    path: Path

    @property
    def run_id(self) -> str:
        return self.path.name

    @property
    def manifest_path(self) -> Path:
        return self.path / "run_manifest.json"

    @property
    def matrix_path(self) -> Path:
        return self.path / "accuracy_matrix.csv"

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.json"

    @property
    def trace_path(self) -> Path:
        return self.path / "memory_trace.csv"

    @property
    def per_class_path(self) -> Path:
        return self.path / "per_class.csv"

    @property
    def plots_dir(self) -> Path:
        return self.path / "plots"

    def checkpoint_dir(self, task_index: int) -> Path:
        return self.path / "checkpoints" / f"task_{task_index:02d}"

    def latest_checkpoint(self) -> Optional[Tuple[int, Path]]:
        root = self.path / "checkpoints"
        if not root.exists():
            return None
        done = sorted(
            p for p in root.iterdir() if p.is_dir() and p.name.startswith("task_") and (p / "trainer_state.json").exists()
        )
        if not done:
            return None
        return int(done[-1].name.split("_")[1]), done[-1]

    # --- writing ---
    def write_run_manifest(self, info: Dict[str, Any]) -> Path:
        with self.manifest_path.open("w", encoding="utf-8") as f:
            json.dump(info, f, indent=2)
            f.write("\n")
        return self.manifest_path

    def read_run_manifest(self) -> Dict[str, Any]:
        if not self.manifest_path.exists():
            raise DataError(f"run folder {self.path} has no run_manifest.json")
        with self.manifest_path.open("r", encoding="utf-8") as f:
            return json.load(f)

    def save_result(self, result) -> Dict[str, Any]:
        """Persist matrix, trace and per-class CSVs plus the metrics JSON; returns the metrics."""
        result.accuracy_matrix.to_csv(self.matrix_path)
        pd.DataFrame(
            {
                "task": list(range(len(result.memory_trace))),
                "stored_frames": result.memory_trace,
                "wall_clock_s": [round(s, 3) for s in result.wall_clock],
            }
        ).to_csv(self.trace_path, index=False)
        if result.per_class is not None:
            result.per_class.to_frame().to_csv(self.per_class_path, index=False)
        report = metrics_report(result.accuracy_matrix, result.per_class)
        save_metrics(report, self.metrics_path)
        LOG(f"Run {self.run_id}: artifacts written to {self.path}")
        return report

    # --- reading ---
    def load_matrix(self) -> AccuracyMatrix:
        if not self.matrix_path.exists():
            raise DataError(f"run {self.run_id} has no accuracy matrix (incomplete run?)")
        matrix = AccuracyMatrix.from_csv(self.matrix_path)
        if not matrix.is_complete:
            raise DataError(f"run {self.run_id} is incomplete: {matrix.completed}/{matrix.n_tasks} tasks")
        return matrix

    def load_per_class(self) -> Optional[pd.DataFrame]:
        return pd.read_csv(self.per_class_path) if self.per_class_path.exists() else None

    def load_trace(self) -> Optional[pd.DataFrame]:
        return pd.read_csv(self.trace_path) if self.trace_path.exists() else None


class ExperimentStore:
    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root) if root is not None else store_root()

    def run_path(self, run_id: str) -> Path:
        return self.root / run_id

    def exists(self, run_id: str) -> bool:
        return self.run_path(run_id).exists()

    def create_run(self, run_id: str, force: bool = False, resume: bool = False) -> RunFolder:
        path = self.run_path(run_id)
        if path.exists():
            if resume:
                return RunFolder(path)
            if not force:
                raise RunExistsError(f"run '{run_id}' already exists in {self.root}; use --force to overwrite")
            shutil.rmtree(path)
            LOG(f"Removed existing run folder {path}")
        elif resume:
            raise ConfigError(f"cannot resume: run '{run_id}' does not exist in {self.root}")
        path.mkdir(parents=True)
        return RunFolder(path)

    def open_run(self, run: Union[str, Path]) -> RunFolder:
        """A run by id (inside the store) or by folder path."""
        path = Path(run)
        if not path.exists():
            path = self.run_path(str(run))
        if not path.is_dir():
            raise DataError(f"run folder not found: {run}")
        return RunFolder(path)

    def list_runs(self) -> List[RunFolder]:
        if not self.root.exists():
            return []
        return [RunFolder(p) for p in sorted(self.root.iterdir()) if (p / "run_manifest.json").exists()]


def build_run_manifest(run_id: str, config_doc: Dict[str, Any], inputs: Dict[str, Union[str, Path]],
                       seeds: Dict[str, int], extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    info: Dict[str, Any] = {
        "run_id": run_id,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": config_doc,
        "seeds": seeds,
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in inputs.items()},
    }
    if extra:
        info.update(extra)
    return info
