from __future__ import annotations

import pytest

from lib.errors import SplitError
from lib.synthetic_videos import generate_synthetic_dataset
from lib.task_splits import (Task, TaskSequence, check_task_sequence, generate_task_sequence, load_task_sequence,
                             save_task_sequence, split_statistics)


@pytest.fixture
def twenty_classes():
    manifest, _ = generate_synthetic_dataset(num_classes=20, videos_per_class=4, frames_per_video=8,
                                             frame_size=(8, 8), seed=3)
    return manifest


def test_tasks_are_disjoint_and_cover_all_classes(twenty_classes):
    seq = generate_task_sequence(twenty_classes, num_tasks=10, seed=7)
    classes = seq.all_class_ids()
    assert sorted(classes) == list(range(20))
    assert len(set(classes)) == 20
    assert all(len(t.class_ids) == 2 for t in seq.tasks)
    check_task_sequence(seq, twenty_classes)


def test_remainder_goes_to_earlier_tasks(twenty_classes):
    seq = generate_task_sequence(twenty_classes, num_tasks=6, seed=0)
    assert [len(t.class_ids) for t in seq.tasks] == [4, 4, 3, 3, 3, 3]


def test_same_seed_same_sequence_other_seed_differs(twenty_classes):
    a = generate_task_sequence(twenty_classes, 10, seed=1)
    b = generate_task_sequence(twenty_classes, 10, seed=1)
    c = generate_task_sequence(twenty_classes, 10, seed=2)
    assert a == b
    assert a.all_class_ids() != c.all_class_ids()


def test_videos_follow_their_class_and_partition(twenty_classes):
    seq = generate_task_sequence(twenty_classes, 5, seed=0)
    for task in seq.tasks:
        for part in ("train", "val", "test"):
            for vid in task.ids(part):
                rec = twenty_classes.record(vid)
                assert rec.class_id in task.class_ids
                assert rec.partition == part


def test_too_many_tasks(twenty_classes):
    with pytest.raises(SplitError):
        generate_task_sequence(twenty_classes, num_tasks=21, seed=0)
    with pytest.raises(SplitError):
        generate_task_sequence(twenty_classes, num_tasks=1, seed=0)


def test_check_rejects_overlapping_classes(twenty_classes):
    bad = TaskSequence(seed=0, tasks=(Task(0, (0, 1)), Task(1, (1, 2))))
    with pytest.raises(SplitError, match="class 1"):
        check_task_sequence(bad, twenty_classes)


def test_statistics_block(twenty_classes):
    seq = generate_task_sequence(twenty_classes, 10, seed=0)
    table, summary = split_statistics(seq, twenty_classes)
    assert len(table) == 10
    assert summary["classes_per_task"] == 2
    assert summary["avg_frames_per_video"] == 8.0
    assert table["train_videos"].sum() + table["val_videos"].sum() + table["test_videos"].sum() == 80


def test_saved_file_is_byte_identical_for_same_seed(twenty_classes, tmp_path):
    paths = []
    for name in ("a.json", "b.json"):
        seq = generate_task_sequence(twenty_classes, 10, seed=5)
        _, summary = split_statistics(seq, twenty_classes)
        paths.append(save_task_sequence(seq, tmp_path / name, stats=summary))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    loaded = load_task_sequence(paths[0])
    assert loaded == generate_task_sequence(twenty_classes, 10, seed=5)
    assert loaded.stats["classes_per_task"] == 2


def test_malformed_split_file(tmp_path):
    path = tmp_path / "split.json"
    path.write_text('{"seed": 0}', encoding="utf-8")
    with pytest.raises(SplitError):
        load_task_sequence(path)


@pytest.mark.parametrize("num_classes,num_tasks,sizes", [
    (200, 20, [10] * 20),
    (101, 10, [11] + [10] * 9),
])
def test_task_sizes_for_large_class_counts(num_classes, num_tasks, sizes):
    manifest, _ = generate_synthetic_dataset(num_classes=num_classes, videos_per_class=1, frames_per_video=2,
                                             frame_size=(8, 8), seed=0)
    seq = generate_task_sequence(manifest, num_tasks=num_tasks, seed=0)
    assert [len(t.class_ids) for t in seq.tasks] == sizes
    assert sorted(seq.all_class_ids()) == list(range(num_classes))
    check_task_sequence(seq, manifest)
