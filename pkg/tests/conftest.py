from __future__ import annotations

import json
from pathlib import Path

import pytest

from lib.config import RunConfig
from lib.episodic_memory import MemoryBudget
from lib.synthetic_videos import generate_synthetic_dataset
from lib.task_splits import generate_task_sequence


@pytest.fixture
def tiny_dataset():
    """4 classes x 10 videos (6 train / 2 val / 2 test), 8 frames of 16x16."""
    return generate_synthetic_dataset(num_classes=4, videos_per_class=10, frames_per_video=8,
                                      frame_size=(16, 16), seed=0)


@pytest.fixture
def tiny_tasks(tiny_dataset):
    manifest, _ = tiny_dataset
    return generate_task_sequence(manifest, num_tasks=2, seed=0)


@pytest.fixture
def make_run_config():
    def _make(method: str, **overrides) -> RunConfig:
        params = dict(
            method=method,
            epochs_memory=1,
            epochs_reg=1,
            segments_n=4,
            batch_size=4,
            model_width=4,
            feature_dim=8,
            seed=0,
        )
        if method in ("ewc", "mas"):
            params["lambda_reg"] = 1.0
        if "+tc" in method or method in ("naive", "icarl", "bic"):
            params["budget"] = MemoryBudget(max_video_instances=8, frames_per_video=4)
        params.update(overrides)
        return RunConfig(**params)

    return _make


def write_jsonl(path: Path, lines) -> Path:
    path.write_text("".join(json.dumps(x) + "\n" for x in lines), encoding="utf-8")
    return path


@pytest.fixture
def untrimmed_manifest_file(tmp_path):
    header = {"name": "toy-untrimmed", "class_names": ["run", "jump", "swim"], "trim_mode": "untrimmed"}
    records = [
        {"video_id": "v1", "total_frames": 40, "partition": "train", "frame_source": "frames/v1",
         "segments": [{"start": 0, "end": 10, "class": 0}, {"start": 20, "end": 35, "class": 0}]},
        {"video_id": "v2", "total_frames": 30, "partition": "train", "frame_source": "frames/v2",
         "segments": [{"start": 0, "end": 10, "class": 1}, {"start": 12, "end": 30, "class": 2}]},
        {"video_id": "v3", "total_frames": 25, "partition": "val", "frame_source": "frames/v3",
         "segments": [{"start": 5, "end": 25, "class": 2}]},
        {"video_id": "v4", "total_frames": 50, "partition": "test", "frame_source": "frames/v4",
         "segments": [{"start": 0, "end": 12, "class": 1}]},
    ]
    return write_jsonl(tmp_path / "untrimmed.jsonl", [header] + records)


@pytest.fixture
def jsonl():
    return write_jsonl
