"""End-to-end method ordering on the synthetic benchmark.

10 classes in 5 tasks, 40 train videos per class, 16-frame videos, averaged over 3 seeds.
Run with ``pytest -m slow``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from lib.config import LAMBDA_REG_PRESETS, RunConfig
from lib.episodic_memory import MemoryBudget
from lib.harness import run_sequence
from lib.metrics import backward_forgetting, final_average_accuracy
from lib.synthetic_videos import generate_synthetic_dataset
from lib.task_splits import generate_task_sequence

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
# training.epochs_reg default, shared by every method
EPOCHS = 20


@lru_cache(maxsize=None)
def _benchmark(seed: int):
    manifest, source = generate_synthetic_dataset(
        num_classes=10, videos_per_class=56, frames_per_video=16, frame_size=(32, 32), seed=seed
    )
    return manifest, source, generate_task_sequence(manifest, num_tasks=5, seed=seed)


@lru_cache(maxsize=None)
def _scores(method: str, frames_per_video: int, seed: int):
    manifest, source, tasks = _benchmark(seed)
    budget = None
    if method not in ("finetune", "ewc", "mas"):
        budget = MemoryBudget(max_video_instances=200, frames_per_video=frames_per_video)
    lambda_reg = LAMBDA_REG_PRESETS[method]["default"] if method in LAMBDA_REG_PRESETS else None
    config = RunConfig(method=method, epochs_memory=EPOCHS, epochs_reg=EPOCHS, budget=budget, lambda_reg=lambda_reg, seed=seed)
    R = run_sequence(config, manifest, tasks, source).accuracy_matrix
    return final_average_accuracy(R), backward_forgetting(R)


def _mean(method: str, frames_per_video: int = 8):
    scores = np.array([_scores(method, frames_per_video, s) for s in SEEDS])
    return float(scores[:, 0].mean()), float(scores[:, 1].mean())


def test_replay_beats_finetuning_by_a_margin():
    acc_ft, _ = _mean("finetune")
    for method in ("naive", "icarl"):
        acc, _ = _mean(method)
        assert acc >= acc_ft + 0.10, method


def test_regularization_forgets_less_than_finetuning_but_trails_replay():
    acc_ft, bwf_ft = _mean("finetune")
    replay_acc = min(_mean("naive")[0], _mean("icarl")[0])
    for method in ("ewc", "mas"):
        acc, bwf = _mean(method)
        assert bwf < bwf_ft, method
        assert acc < replay_acc, method


def test_temporal_consistency_helps_with_downsampled_memory():
    acc, bwf = _mean("icarl", frames_per_video=4)
    acc_tc, bwf_tc = _mean("icarl+tc", frames_per_video=4)
    assert acc_tc >= acc + 0.05
    assert bwf_tc < bwf
