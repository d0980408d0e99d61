"""Frame-budgeted episodic memory for replay-based continual learning.

Capacity is counted in stored frames, not in videos. Videos are temporally
down-sampled (uniform bin centers) when they enter memory; the dropped frames are
gone for good.
"""

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from lib.errors import DataError, MemoryBudgetError
from lib.frame_sources import FrameSource
from lib.logger import LOG, LOG_WARN
from lib.manifest import DatasetManifest

ALL = "all"
FramesPerVideo = Union[int, Literal["all"]]

_BLOB_MAGIC = b"VCMF"


# ==========================================
# 1. Budget and sampling arithmetic
# ==========================================


def frame_capacity(max_video_instances: int, frames_per_video: FramesPerVideo,
                   avg_frames_full: Optional[float] = None) -> int:
    """Memory frame capacity: instances x frames per video, or instances x average length for ALL."""
    if max_video_instances <= 0:
        raise ValueError("max_video_instances must be positive")
    if frames_per_video == ALL:
        if avg_frames_full is None or avg_frames_full <= 0:
            raise ValueError("avg_frames_full is required when storing ALL frames")
        return int(round(max_video_instances * avg_frames_full))
    if int(frames_per_video) < 1:
        raise ValueError("frames_per_video must be >= 1")
    return max_video_instances * int(frames_per_video)


def uniform_subsample(total_frames: int, k: int) -> List[int]:
    """Centers of k equal temporal bins: floor((i + 0.5) * total_frames / k)."""
    if total_frames < 1 or k < 1:
        raise ValueError(f"uniform_subsample needs total_frames >= 1 and k >= 1, got ({total_frames}, {k})")
    return [min((2 * i + 1) * total_frames // (2 * k), total_frames - 1) for i in range(k)]


@dataclass(frozen=True)
class MemoryBudget:
    max_video_instances: int
    frames_per_video: FramesPerVideo = 8
    full_capacity: Optional[int] = None  # frame capacity when storing ALL frames

    def __post_init__(self):
        if self.max_video_instances < 1:
            raise ValueError("max_video_instances must be >= 1")
        if self.frames_per_video != ALL and int(self.frames_per_video) < 1:
            raise ValueError("frames_per_video must be >= 1 or 'all'")
        if self.frames_per_video == ALL and not self.full_capacity:
            raise ValueError("a full-resolution budget needs full_capacity")

    @classmethod
    def build(cls, max_video_instances: int, frames_per_video: FramesPerVideo,
              avg_frames_full: Optional[float] = None) -> "MemoryBudget":
        full = frame_capacity(max_video_instances, ALL, avg_frames_full) if frames_per_video == ALL else None
        return cls(max_video_instances, frames_per_video, full)

    @property
    def downsampled(self) -> bool:
        return self.frames_per_video != ALL

    @property
    def frame_capacity(self) -> int:
        if self.frames_per_video == ALL:
            return int(self.full_capacity)
        return frame_capacity(self.max_video_instances, self.frames_per_video)

    def quota(self, classes_seen: int) -> int:
        # floor division; leftover slots stay unused
        return self.max_video_instances // classes_seen if classes_seen > 0 else 0


# ==========================================
# 2. Entries and the memory itself
# ==========================================


@dataclass(frozen=True)
class MemoryEntry:
    video_id: str
    class_id: int
    selection_rank: int  # 0 = most representative
    frame_indices: Tuple[int, ...] = ()
    stored_frames: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def n_frames(self) -> int:
        return 0 if self.stored_frames is None else int(self.stored_frames.shape[0])


@dataclass(frozen=True)
class EpisodicMemory:
    budget: MemoryBudget
    entries: Dict[int, Tuple[MemoryEntry, ...]] = field(default_factory=dict)
    classes_seen: int = 0

    def __post_init__(self):
        total = self.total_frames
        if total > self.budget.frame_capacity:
            raise MemoryBudgetError(f"memory holds {total} frames > capacity {self.budget.frame_capacity}")

    @property
    def total_frames(self) -> int:
        return sum(e.n_frames for es in self.entries.values() for e in es)

    def __len__(self) -> int:
        return sum(len(es) for es in self.entries.values())

    def class_counts(self) -> Dict[int, int]:
        return {c: len(es) for c, es in sorted(self.entries.items())}

    def all_entries(self) -> List[MemoryEntry]:
        return [e for c in sorted(self.entries) for e in self.entries[c]]


def rebalance(memory: EpisodicMemory, classes_seen_after_task: int) -> EpisodicMemory:
    """Shrink every class to floor(max_video_instances / classes seen) lowest-rank entries."""
    if classes_seen_after_task < memory.classes_seen:
        raise DataError(
            f"classes seen cannot decrease ({memory.classes_seen} -> {classes_seen_after_task})"
        )
    quota = memory.budget.quota(classes_seen_after_task)
    kept = {
        c: tuple(sorted(es, key=lambda e: e.selection_rank)[:quota])
        for c, es in memory.entries.items()
    }
    out = EpisodicMemory(memory.budget, kept, classes_seen_after_task)
    LOG(f"Memory rebalanced: quota {quota}/class, {len(out)} videos, {out.total_frames} frames")
    return out


def insert_exemplars(memory: EpisodicMemory, selected: Sequence[MemoryEntry],
                     manifest: DatasetManifest, source: FrameSource) -> EpisodicMemory:
    """Down-sample and store selected videos, never exceeding the frame capacity.

    Entries are admitted round-robin by selection rank across classes; once the next
    entry would overflow the budget it is skipped.
    """
    budget = memory.budget
    entries: Dict[int, List[MemoryEntry]] = {c: list(es) for c, es in memory.entries.items()}
    used = memory.total_frames
    skipped = 0

    for entry in sorted(selected, key=lambda e: (e.selection_rank, e.class_id)):
        if any(e.video_id == entry.video_id for e in entries.get(entry.class_id, ())):
            continue
        rec = manifest.record(entry.video_id)
        if budget.downsampled:
            indices = uniform_subsample(rec.total_frames, int(budget.frames_per_video))
        else:
            indices = list(range(rec.total_frames))
        if used + len(indices) > budget.frame_capacity:
            skipped += 1
            continue
        frames = np.ascontiguousarray(source.read(rec, indices), dtype=np.uint8)
        entries.setdefault(entry.class_id, []).append(
            replace(entry, frame_indices=tuple(indices), stored_frames=frames)
        )
        used += len(indices)

    if skipped:
        LOG_WARN(f"Memory frame capacity reached: {skipped} selected videos not stored")
    ordered = {c: tuple(sorted(es, key=lambda e: e.selection_rank)) for c, es in sorted(entries.items())}
    return EpisodicMemory(budget, ordered, memory.classes_seen)


# ==========================================
# 3. Exemplar selection
# ==========================================


def select_exemplars_random(candidates: Sequence[Tuple[str, int]], per_class_quota: int,
                            seed: int) -> List[MemoryEntry]:
    """Seeded uniform sample without replacement per class; rank = draw order."""
    if per_class_quota < 0:
        raise ValueError("per_class_quota must be >= 0")
    by_class: Dict[int, List[str]] = defaultdict(list)
    for video_id, class_id in candidates:
        by_class[int(class_id)].append(video_id)

    out: List[MemoryEntry] = []
    for class_id in sorted(by_class):
        vids = by_class[class_id]
        rng = np.random.default_rng([seed, class_id])
        draw = rng.permutation(len(vids))[:per_class_quota]
        out.extend(MemoryEntry(vids[i], class_id, rank) for rank, i in enumerate(draw))
    return out


def select_exemplars_herding(feature_vectors: np.ndarray, per_class_quota: int) -> List[int]:
    """Greedy herding: keep the running exemplar mean closest to the class mean.

    Ties go to the lowest candidate index. Returns candidate indices in pick order.
    """
    feats = np.asarray(feature_vectors, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise DataError("herding needs a non-empty (n, d) candidate feature matrix")
    if per_class_quota < 1:
        raise ValueError("per_class_quota must be >= 1")

    n = feats.shape[0]
    mu = feats.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    picked: List[int] = []
    for step in range(1, min(per_class_quota, n) + 1):
        dist = np.linalg.norm(mu[None, :] - (running[None, :] + feats) / step, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))  # first minimum -> lowest index
        picked.append(i)
        available[i] = False
        running += feats[i]
    return picked


# ==========================================
# 4. Replay
# ==========================================


def replay_batches(memory: EpisodicMemory, batch_size: int,
                   seed: int) -> Iterator[Tuple[List[np.ndarray], np.ndarray]]:
    """One seeded shuffled epoch over the memory as (stored frame stacks, class ids)."""
    entries = memory.all_entries()
    if not entries:
        return
    order = np.random.default_rng(seed).permutation(len(entries))
    for start in range(0, len(order), batch_size):
        chunk = [entries[i] for i in order[start:start + batch_size]]
        yield [e.stored_frames for e in chunk], np.array([e.class_id for e in chunk], dtype=np.int64)


# ==========================================
# 5. Snapshot (index JSON + frame blob)
# ==========================================
# frames.bin layout, little-endian:
#   b"VCMF", uint32 entry count,
#   then per entry: uint32 k, uint32 h, uint32 w, k*h*w uint8 frames (row-major)


def save_memory_snapshot(memory: EpisodicMemory, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = memory.all_entries()
    index = {
        "budget": {
            "max_video_instances": memory.budget.max_video_instances,
            "frames_per_video": memory.budget.frames_per_video,
            "full_capacity": memory.budget.full_capacity,
            "frame_capacity": memory.budget.frame_capacity,
        },
        "classes_seen": memory.classes_seen,
        "entries": [
            {
                "video_id": e.video_id,
                "class_id": e.class_id,
                "selection_rank": e.selection_rank,
                "frame_indices": list(e.frame_indices),
            }
            for e in entries
        ],
    }
    with (out_dir / "index.json").open("w", encoding="utf-8") as f:
        json.dump(index, f, indent=2)

    with (out_dir / "frames.bin").open("wb") as f:
        f.write(_BLOB_MAGIC + struct.pack("<I", len(entries)))
        for e in entries:
            frames = np.ascontiguousarray(e.stored_frames, dtype=np.uint8)
            k, h, w = frames.shape
            f.write(struct.pack("<III", k, h, w))
            f.write(frames.tobytes(order="C"))
    return out_dir


def load_memory_snapshot(in_dir: Union[str, Path]) -> EpisodicMemory:
    in_dir = Path(in_dir)
    with (in_dir / "index.json").open("r", encoding="utf-8") as f:
        index = json.load(f)
    blob = (in_dir / "frames.bin").read_bytes()
    if blob[:4] != _BLOB_MAGIC:
        raise DataError(f"{in_dir / 'frames.bin'} is not a memory frame blob")
    (count,) = struct.unpack_from("<I", blob, 4)
    if count != len(index["entries"]):
        raise DataError(f"memory snapshot mismatch: {count} frame stacks vs {len(index['entries'])} entries")

    offset = 8
    entries: Dict[int, List[MemoryEntry]] = defaultdict(list)
    for meta in index["entries"]:
        k, h, w = struct.unpack_from("<III", blob, offset)
        offset += 12
        frames = np.frombuffer(blob, dtype=np.uint8, count=k * h * w, offset=offset).reshape(k, h, w).copy()
        offset += k * h * w
        entries[int(meta["class_id"])].append(
            MemoryEntry(
                video_id=meta["video_id"],
                class_id=int(meta["class_id"]),
                selection_rank=int(meta["selection_rank"]),
                frame_indices=tuple(meta["frame_indices"]),
                stored_frames=frames,
            )
        )

    b = index["budget"]
    budget = MemoryBudget(b["max_video_instances"], b["frames_per_video"], b.get("full_capacity"))
    return EpisodicMemory(budget, {c: tuple(es) for c, es in sorted(entries.items())}, int(index["classes_seen"]))
