from __future__ import annotations

import pytest

from lib.errors import ManifestError
from lib.manifest import (SegmentAnnotation, assign_untrimmed_labels, load_manifest, primary_label, trim_manifest,
                          write_manifest)

HEADER = {"name": "toy", "class_names": ["a", "b"], "trim_mode": "trimmed"}


def test_trimmed_manifest_roundtrip(tmp_path, jsonl):
    path = jsonl(tmp_path / "m.jsonl", [
        HEADER,
        {"video_id": "x", "total_frames": 12, "partition": "train", "class": 1, "frame_source": "f/x"},
        {"video_id": "y", "total_frames": 9, "partition": "val",
         "segments": [{"start": 0, "end": 9, "class": 0}], "frame_source": "f/y"},
    ])
    m = load_manifest(path)
    assert [r.class_id for r in m.records] == [1, 0]
    assert m.record("y").partition == "val"

    again = load_manifest(write_manifest(m, tmp_path / "copy.jsonl"))
    assert again == m


def test_missing_manifest_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.jsonl")


def test_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"name": "toy", "class_names": ["a"], "trim_mode": "trimmed"}\n'
        '{"video_id": "x", "total_frames": 4, "partition": "train", "class": 0}\n'
        "{not json\n",
        encoding="utf-8",
    )
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(path)


def test_segment_out_of_range_is_rejected(tmp_path, jsonl):
    path = jsonl(tmp_path / "m.jsonl", [
        {**HEADER, "trim_mode": "untrimmed"},
        {"video_id": "x", "total_frames": 10, "partition": "train", "segments": [{"start": 5, "end": 11, "class": 0}]},
    ])
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(path)


def test_unknown_record_key_is_rejected(tmp_path, jsonl):
    path = jsonl(tmp_path / "m.jsonl", [
        HEADER,
        {"video_id": "x", "total_frames": 10, "partition": "train", "class": 0, "fps": 30},
    ])
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(path)


def test_duplicate_ids_are_all_listed(tmp_path, jsonl):
    rec = {"video_id": "dup", "total_frames": 3, "partition": "train", "class": 0}
    path = jsonl(tmp_path / "m.jsonl", [HEADER, rec, rec, {**rec, "video_id": "ok"}, rec])
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    assert "'dup' (lines 2, 3, 5)" in str(err.value)


def test_primary_label_longest_support_and_ties():
    segs = (SegmentAnnotation(0, 4, 1), SegmentAnnotation(10, 12, 0), SegmentAnnotation(20, 23, 0))
    assert primary_label(segs) == 0  # 5 frames vs 4
    tie = (SegmentAnnotation(0, 5, 2), SegmentAnnotation(5, 10, 1))
    assert primary_label(tie) == 1


def test_untrimmed_multilabel_videos_are_discarded(untrimmed_manifest_file):
    result = assign_untrimmed_labels(load_manifest(untrimmed_manifest_file))
    assert result.discarded_ids == ("v2",)
    assert result.discarded_fraction == pytest.approx(0.25)
    labels = {r.video_id: r.class_id for r in result.manifest.records}
    assert labels == {"v1": 0, "v3": 2, "v4": 1}


def test_trim_one_record_per_segment(untrimmed_manifest_file):
    m = load_manifest(untrimmed_manifest_file)
    trimmed = trim_manifest(m)
    assert trimmed.trim_mode == "trimmed"
    assert len(trimmed.records) == sum(len(r.segments) for r in m.records)
    assert sum(r.total_frames for r in trimmed.records) == sum(r.labeled_frames for r in m.records)

    child = trimmed.record("v2#1")
    assert (child.class_id, child.total_frames, child.frame_offset) == (2, 18, 12)
    assert child.frame_source == "frames/v2"


def test_trimming_twice_is_an_error(untrimmed_manifest_file):
    trimmed = trim_manifest(load_manifest(untrimmed_manifest_file))
    with pytest.raises(ManifestError):
        trim_manifest(trimmed)


def test_labeling_twice_changes_nothing(untrimmed_manifest_file):
    once = assign_untrimmed_labels(load_manifest(untrimmed_manifest_file))
    twice = assign_untrimmed_labels(once.manifest)
    assert twice.manifest == once.manifest
    assert twice.discarded_count == 0


def test_discard_fraction_on_a_large_manifest(tmp_path, jsonl):
    header = {"name": "big-untrimmed", "class_names": ["a", "b", "c"], "trim_mode": "untrimmed"}
    records = []
    for i in range(1000):
        segments = [{"start": 0, "end": 10, "class": i % 3}]
        if i in (17, 604):
            segments.append({"start": 12, "end": 20, "class": (i + 1) % 3})
        records.append({"video_id": f"v{i:04d}", "total_frames": 24, "partition": "train",
                        "frame_source": f"frames/v{i:04d}", "segments": segments})
    result = assign_untrimmed_labels(load_manifest(jsonl(tmp_path / "big.jsonl", [header] + records)))
    assert result.discarded_ids == ("v0017", "v0604")
    assert result.total_before == 1000
    assert result.discarded_fraction == pytest.approx(0.002)
    assert len(result.manifest.records) == 998
