"""Video manifests: loading, validation, untrimmed labeling and trimming.

Manifest files are JSON Lines. The first line is a header::

    {"name": "toy", "class_names": ["a", "b"], "trim_mode": "untrimmed"}

and every following line is one video::

    {"video_id": "v1", "total_frames": 400, "partition": "train",
     "segments": [{"start": 10, "end": 50, "class": 0}], "frame_source": "frames/v1"}

Trimmed records may omit segments and carry ``"class"`` directly. Optional keys:
``frame_offset`` (first source frame of a trimmed child) and, in the header,
``generator`` (parameters of a synthetic dataset).
"""

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from lib.errors import ManifestError
from lib.logger import LOG

Partition = Literal["train", "val", "test"]
TrimMode = Literal["trimmed", "untrimmed"]


# ==========================================
# 1. Domain types
# ==========================================


@dataclass(frozen=True)
class SegmentAnnotation:
    start_frame: int  # inclusive
    end_frame: int  # exclusive
    class_id: int

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    total_frames: int
    segments: Tuple[SegmentAnnotation, ...] = ()
    class_id: Optional[int] = None
    partition: Partition = "train"
    frame_source: str = ""
    frame_offset: int = 0

    @property
    def labeled_frames(self) -> int:
        return sum(s.length for s in self.segments)

    def distinct_labels(self) -> List[int]:
        return sorted({s.class_id for s in self.segments})


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    class_names: Tuple[str, ...]
    records: Tuple[VideoRecord, ...]
    trim_mode: TrimMode = "trimmed"
    generator: Optional[Dict[str, Any]] = field(default=None, compare=False)

    @cached_property
    def by_id(self) -> Dict[str, VideoRecord]:
        return {r.video_id: r for r in self.records}

    def record(self, video_id: str) -> VideoRecord:
        try:
            return self.by_id[video_id]
        except KeyError:
            raise ManifestError(f"unknown video_id '{video_id}' in manifest '{self.name}'") from None

    def class_ids(self) -> List[int]:
        """Classes carried by at least one labeled record."""
        return sorted({r.class_id for r in self.records if r.class_id is not None})

    def avg_frames(self, partition: Optional[str] = None) -> float:
        recs = [r for r in self.records if partition is None or r.partition == partition]
        if not recs:
            return 0.0
        return sum(r.total_frames for r in recs) / len(recs)


@dataclass(frozen=True)
class LabelingResult:
    manifest: DatasetManifest
    discarded_ids: Tuple[str, ...]
    total_before: int

    @property
    def discarded_count(self) -> int:
        return len(self.discarded_ids)

    @property
    def discarded_fraction(self) -> float:
        return self.discarded_count / self.total_before if self.total_before else 0.0


# ==========================================
# 2. File format (pydantic line models)
# ==========================================


class _SegmentLine(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    start: int = Field(ge=0)
    end: int
    class_id: int = Field(alias="class", ge=0)


class _RecordLine(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    video_id: str = Field(min_length=1)
    total_frames: int = Field(ge=1)
    partition: Partition
    segments: List[_SegmentLine] = []
    frame_source: str = ""
    frame_offset: int = Field(default=0, ge=0)
    class_id: Optional[int] = Field(default=None, alias="class", ge=0)


class _HeaderLine(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    class_names: List[str] = Field(min_length=1)
    trim_mode: TrimMode
    generator: Optional[Dict[str, Any]] = None


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    loc = ".".join(str(p) for p in err.get("loc", ()))
    return f"{loc}: {err.get('msg')}" if loc else str(err.get("msg"))


def primary_label(segments: Tuple[SegmentAnnotation, ...]) -> int:
    """Class with the longest total temporal support; lowest class id on ties."""
    if not segments:
        raise ManifestError("cannot assign a primary label to a record without segments")
    support: Counter = Counter()
    for s in segments:
        support[s.class_id] += s.length
    return min(support, key=lambda c: (-support[c], c))


def _validate_record(rec: VideoRecord, header: _HeaderLine, line_no: Optional[int]) -> None:
    n_classes = len(header.class_names)
    for s in rec.segments:
        if s.start_frame >= s.end_frame or s.end_frame > rec.total_frames:
            raise ManifestError(
                f"record '{rec.video_id}': segment [{s.start_frame}, {s.end_frame}) out of range "
                f"for {rec.total_frames} frames",
                line_no,
            )
        if s.class_id >= n_classes:
            raise ManifestError(f"record '{rec.video_id}': class {s.class_id} >= {n_classes} classes", line_no)
    if rec.class_id is not None and rec.class_id >= n_classes:
        raise ManifestError(f"record '{rec.video_id}': class {rec.class_id} >= {n_classes} classes", line_no)

    if header.trim_mode == "trimmed":
        if rec.segments:
            whole = len(rec.segments) == 1 and rec.segments[0].start_frame == 0 \
                and rec.segments[0].end_frame == rec.total_frames
            if not whole:
                raise ManifestError(
                    f"record '{rec.video_id}': trimmed records need exactly one segment covering the video",
                    line_no,
                )
        elif rec.class_id is None:
            raise ManifestError(f"record '{rec.video_id}': trimmed record without segments needs a class", line_no)
    elif not rec.segments:
        raise ManifestError(f"record '{rec.video_id}': untrimmed record without segments", line_no)

    if rec.class_id is not None and rec.segments and len(rec.distinct_labels()) == 1:
        if rec.class_id != primary_label(rec.segments):
            raise ManifestError(
                f"record '{rec.video_id}': class {rec.class_id} disagrees with its segment label", line_no
            )


def _record_from_line(line: _RecordLine, trim_mode: str) -> VideoRecord:
    segments = tuple(SegmentAnnotation(s.start, s.end, s.class_id) for s in line.segments)
    class_id = line.class_id
    if class_id is None and trim_mode == "trimmed" and segments:
        class_id = segments[0].class_id
    return VideoRecord(
        video_id=line.video_id,
        total_frames=line.total_frames,
        segments=segments,
        class_id=class_id,
        partition=line.partition,
        frame_source=line.frame_source,
        frame_offset=line.frame_offset,
    )


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Read and validate a JSON Lines manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")

    header: Optional[_HeaderLine] = None
    records: List[VideoRecord] = []
    first_seen: Dict[str, int] = {}
    duplicates: Dict[str, List[int]] = {}

    with path.open("r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON ({e.msg})", line_no) from None

            try:
                if header is None:
                    header = _HeaderLine.model_validate(obj)
                    continue
                rec = _record_from_line(_RecordLine.model_validate(obj), header.trim_mode)
            except ValidationError as e:
                raise ManifestError(_first_error(e), line_no) from None

            if rec.video_id in first_seen:
                duplicates.setdefault(rec.video_id, [first_seen[rec.video_id]]).append(line_no)
                continue
            first_seen[rec.video_id] = line_no
            _validate_record(rec, header, line_no)
            records.append(rec)

    if header is None:
        raise ManifestError(f"empty manifest: {path}")
    if duplicates:
        listing = ", ".join(f"'{vid}' (lines {', '.join(map(str, lines))})" for vid, lines in duplicates.items())
        raise ManifestError(f"duplicate video_id: {listing}")

    LOG(f"Loaded manifest '{header.name}' with {len(records)} records ({header.trim_mode})")
    return DatasetManifest(
        name=header.name,
        class_names=tuple(header.class_names),
        records=tuple(records),
        trim_mode=header.trim_mode,
        generator=header.generator,
    )


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header: Dict[str, Any] = {
        "name": manifest.name,
        "class_names": list(manifest.class_names),
        "trim_mode": manifest.trim_mode,
    }
    if manifest.generator is not None:
        header["generator"] = manifest.generator
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for r in manifest.records:
            item: Dict[str, Any] = {
                "video_id": r.video_id,
                "total_frames": r.total_frames,
                "partition": r.partition,
                "segments": [{"start": s.start_frame, "end": s.end_frame, "class": s.class_id} for s in r.segments],
                "frame_source": r.frame_source,
            }
            if r.frame_offset:
                item["frame_offset"] = r.frame_offset
            if r.class_id is not None and not r.segments:
                item["class"] = r.class_id
            elif r.class_id is not None and manifest.trim_mode == "untrimmed":
                item["class"] = r.class_id
            f.write(json.dumps(item) + "\n")
    return path


# ==========================================
# 3. Untrimmed labeling and trimming
# ==========================================


def assign_untrimmed_labels(manifest: DatasetManifest) -> LabelingResult:
    """Label whole untrimmed videos with their primary class.

    Videos whose segments carry two or more distinct classes are discarded; the rest
    get the class with the longest total segment duration, applied to every frame.
    Because of the discard rule the longest-support choice only ever sees one class.
    """
    if manifest.trim_mode != "untrimmed":
        raise ManifestError(f"manifest '{manifest.name}' is not untrimmed")

    kept: List[VideoRecord] = []
    discarded: List[str] = []
    for rec in manifest.records:
        if not rec.segments:
            raise ManifestError(f"record '{rec.video_id}' has no segments; cannot assign a primary label")
        if len(rec.distinct_labels()) >= 2:
            discarded.append(rec.video_id)
            continue
        kept.append(replace(rec, class_id=primary_label(rec.segments)))

    result = LabelingResult(
        manifest=replace(manifest, records=tuple(kept)),
        discarded_ids=tuple(discarded),
        total_before=len(manifest.records),
    )
    LOG(
        f"Untrimmed labeling: discarded {result.discarded_count}/{result.total_before} "
        f"({result.discarded_fraction:.4%}) multi-label videos"
    )
    return result


def trim_manifest(manifest: DatasetManifest) -> DatasetManifest:
    """Turn every labeled segment into an independent trimmed video."""
    if manifest.trim_mode != "untrimmed":
        raise ManifestError(f"manifest '{manifest.name}' is already trimmed")

    out: List[VideoRecord] = []
    for rec in manifest.records:
        if not rec.segments:
            raise ManifestError(f"record '{rec.video_id}' has no segments to trim")
        for ordinal, seg in enumerate(rec.segments):
            out.append(
                VideoRecord(
                    video_id=f"{rec.video_id}#{ordinal}",
                    total_frames=seg.length,
                    segments=(SegmentAnnotation(0, seg.length, seg.class_id),),
                    class_id=seg.class_id,
                    partition=rec.partition,
                    frame_source=rec.frame_source,
                    frame_offset=rec.frame_offset + seg.start_frame,
                )
            )
    return replace(manifest, records=tuple(out), trim_mode="trimmed")
