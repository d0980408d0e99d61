from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn as nn

from lib.config import METHODS
from lib.episodic_memory import MemoryBudget
from lib.errors import DataError
from lib.harness import FrameReader, SequenceTrainer, evaluate_task, run_sequence, segment_sample
from lib.manifest import DatasetManifest, SegmentAnnotation, VideoRecord
from lib.metrics import backward_forgetting
from lib.synthetic_videos import generate_synthetic_dataset
from lib.task_splits import Task, TaskSequence, generate_task_sequence

# ==========================================
# Segment sampling
# ==========================================


def test_eval_sampling_takes_segment_centers():
    assert segment_sample(16, 8, "eval") == [1, 3, 5, 7, 9, 11, 13, 15]


def test_train_sampling_stays_inside_segments():
    for seed in range(20):
        idx = segment_sample(37, 8, "train", seed)
        for i, frame in enumerate(idx):
            assert i * 37 // 8 <= frame < (i + 1) * 37 // 8
    assert segment_sample(37, 8, "train", 5) == segment_sample(37, 8, "train", 5)


def test_train_sampling_short_video():
    idx = segment_sample(3, 4, "train", 0)
    assert len(idx) == 4 and all(0 <= i < 3 for i in idx)


def test_unknown_sampling_mode():
    with pytest.raises(ValueError):
        segment_sample(8, 4, "test")


# ==========================================
# Evaluation with stub models
# ==========================================


class ValueFrames:
    """Every frame of a video is filled with 10 * class_id."""

    def read(self, record, indices):
        return np.full((len(indices), 8, 8), 10 * record.class_id, dtype=np.uint8)


class ReadsClassFromPixels(nn.Module):
    def __init__(self, num_classes):
        super().__init__()
        self.num_classes = num_classes

    def forward(self, clips):
        cls = torch.round(clips[:, 0, 0, 0] * 255.0 / 10.0).long()
        return nn.functional.one_hot(cls, self.num_classes).float()


class RandomLogits(nn.Module):
    def __init__(self, num_classes, seed=0):
        super().__init__()
        self.num_classes = num_classes
        self.gen = torch.Generator().manual_seed(seed)

    def forward(self, clips):
        return torch.randn(clips.shape[0], self.num_classes, generator=self.gen)


def _value_manifest(num_classes, per_class):
    records = tuple(
        VideoRecord(f"v{c}_{k}", 8, (SegmentAnnotation(0, 8, c),), c, "val")
        for c in range(num_classes)
        for k in range(per_class)
    )
    return DatasetManifest("values", tuple(str(c) for c in range(num_classes)), records)


def test_perfect_model_scores_one():
    manifest = _value_manifest(3, 4)
    reader = FrameReader(manifest, ValueFrames())
    ids = [r.video_id for r in manifest.records]
    assert evaluate_task(ReadsClassFromPixels(3), None, "finetune", ids, reader, [0, 1, 2], segments_n=4) == 1.0


def test_random_logits_are_at_chance():
    manifest = _value_manifest(4, 150)
    reader = FrameReader(manifest, ValueFrames())
    ids = [r.video_id for r in manifest.records]
    acc = evaluate_task(RandomLogits(4), None, "ewc", ids, reader, [0, 1, 2, 3], segments_n=2)
    sigma = (0.25 * 0.75 / len(ids)) ** 0.5
    assert abs(acc - 0.25) <= 3 * sigma


def test_evaluation_errors():
    manifest = _value_manifest(2, 2)
    reader = FrameReader(manifest, ValueFrames())
    with pytest.raises(DataError):
        evaluate_task(ReadsClassFromPixels(2), None, "finetune", [], reader, [0, 1])
    with pytest.raises(DataError, match="memory is empty"):
        evaluate_task(ReadsClassFromPixels(2), None, "icarl", ["v0_0"], reader, [0, 1])


# ==========================================
# Sequential runs on tiny synthetic data
# ==========================================


@pytest.mark.parametrize("method", METHODS)
def test_every_method_completes_a_sequence(method, tiny_dataset, tiny_tasks, make_run_config):
    manifest, source = tiny_dataset
    cfg = make_run_config(method)
    result = run_sequence(cfg, manifest, tiny_tasks, source)

    R = result.accuracy_matrix
    assert R.is_complete and R.n_tasks == 2
    assert all(0.0 <= a <= 1.0 for row in R.rows for a in row)
    assert len(result.wall_clock) == 2
    assert set(result.per_class_accuracy) <= set(manifest.class_ids())
    if cfg.uses_memory:
        assert all(0 < frames <= cfg.budget.frame_capacity for frames in result.memory_trace)
    else:
        assert result.memory_trace == [0, 0]


def test_single_task_sequence(tiny_dataset, make_run_config):
    manifest, source = tiny_dataset
    task = generate_task_sequence(manifest, 2, seed=0).tasks[0]
    seq = TaskSequence(seed=0, tasks=(task,))
    result = run_sequence(make_run_config("finetune"), manifest, seq, source)
    assert result.accuracy_matrix.n_tasks == 1
    assert backward_forgetting(result.accuracy_matrix) == 0.0


def test_empty_task_is_rejected(tiny_dataset, make_run_config):
    manifest, source = tiny_dataset
    seq = TaskSequence(seed=0, tasks=(Task(0, (0, 1)), Task(1, (2, 3))))
    with pytest.raises(DataError, match="empty"):
        run_sequence(make_run_config("finetune"), manifest, seq, source)


def test_runs_are_deterministic(tiny_dataset, tiny_tasks, make_run_config):
    manifest, source = tiny_dataset
    cfg = make_run_config("icarl+tc", segments_n=8)
    a = run_sequence(cfg, manifest, tiny_tasks, source)
    b = run_sequence(cfg, manifest, tiny_tasks, source)
    assert a.accuracy_matrix.rows == b.accuracy_matrix.rows
    assert a.memory_trace == b.memory_trace


def test_zero_consistency_weight_reproduces_the_base_method(tiny_dataset, tiny_tasks, make_run_config):
    manifest, source = tiny_dataset
    base = run_sequence(make_run_config("icarl", segments_n=8), manifest, tiny_tasks, source)
    tc = run_sequence(make_run_config("icarl+tc", segments_n=8, lambda_tc=0.0), manifest, tiny_tasks, source)
    assert tc.accuracy_matrix.rows == base.accuracy_matrix.rows


def test_bic_fits_one_layer_per_incremental_task(tiny_dataset, tiny_tasks, make_run_config):
    manifest, source = tiny_dataset
    trainer = SequenceTrainer(make_run_config("bic"), manifest, tiny_tasks, source)
    trainer.run()
    assert len(trainer.bias_layers) == 1
    new_heads = {trainer.head_of[c] for c in tiny_tasks.tasks[1].class_ids}
    assert trainer.bias_layers[0].new_class_ids == frozenset(new_heads)


@pytest.mark.parametrize("method, fpv", [("icarl", 4), ("naive", 8)])
def test_memory_budget_holds_over_five_tasks(method, fpv, make_run_config):
    manifest, source = generate_synthetic_dataset(num_classes=10, videos_per_class=10, frames_per_video=16,
                                                  frame_size=(16, 16), seed=1)
    seq = generate_task_sequence(manifest, 5, seed=1)
    budget = MemoryBudget(max_video_instances=20, frames_per_video=fpv)
    snapshots = []

    def record(trainer, t):
        snapshots.append((trainer.memory.total_frames, trainer.memory.class_counts()))

    cfg = make_run_config(method, budget=budget)
    SequenceTrainer(cfg, manifest, seq, source, on_task_end=record).run()

    assert len(snapshots) == 5
    for t, (frames, counts) in enumerate(snapshots):
        assert frames <= budget.frame_capacity
        assert len(counts) == 2 * (t + 1)
        assert max(counts.values()) - min(counts.values()) <= 1
        assert max(counts.values()) <= budget.quota(2 * (t + 1))


def test_huge_regularization_pins_important_parameters(tiny_dataset, tiny_tasks, make_run_config):
    manifest, source = tiny_dataset
    captured = {}

    def capture(trainer, t):
        if t == 0:
            captured["state"] = trainer.importance
        else:
            captured["params"] = {n: p.detach().clone() for n, p in trainer.model.named_parameters()}

    cfg = make_run_config("ewc", lambda_reg=1e12, epochs_reg=2)
    SequenceTrainer(cfg, manifest, tiny_tasks, source, on_task_end=capture).run()

    state, params = captured["state"], captured["params"]
    weighted, total = 0.0, 0.0
    for name, omega in state.omega.items():
        p = params[name][: omega.shape[0]]
        weighted += float((omega * (p - state.anchor[name]) ** 2).sum())
        total += float(omega.sum())
    assert total > 0
    assert weighted / total <= 1e-3


@pytest.mark.parametrize("method", ["icarl", "bic", "ewc"])
def test_resume_reproduces_uninterrupted_run(method, tmp_path, tiny_dataset, tiny_tasks, make_run_config):
    manifest, source = tiny_dataset
    cfg = make_run_config(method)

    def save(trainer, t):
        trainer.save_checkpoint(tmp_path / f"task_{t:02d}")

    full = SequenceTrainer(cfg, manifest, tiny_tasks, source, on_task_end=save).run()

    resumed = SequenceTrainer(cfg, manifest, tiny_tasks, source)
    start = resumed.restore_checkpoint(tmp_path / "task_00")
    assert start == 1
    result = resumed.run(start_task=start)
    assert result.accuracy_matrix.rows == full.accuracy_matrix.rows
    assert result.memory_trace == full.memory_trace


def test_frame_reader_caches_short_videos(tiny_dataset):
    manifest, source = tiny_dataset

    class Counting:
        calls = 0

        def read(self, record, indices):
            Counting.calls += 1
            return source.read(record, indices)

    reader = FrameReader(manifest, Counting())
    vid = manifest.records[0].video_id
    a = reader.clip(vid, 4, "eval")
    b = reader.clip(vid, 4, "train", seed=3)
    assert Counting.calls == 1
    assert a.shape == b.shape == (4, 16, 16)
    long_reader = FrameReader(manifest, Counting(), cache_max_frames=2)
    long_reader.clip(vid, 4, "eval")
    long_reader.clip(vid, 4, "eval")
    assert Counting.calls == 3
