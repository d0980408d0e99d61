"""Synthetic moving-blob videos for desk-scale continual-learning runs.

Every class is a motion pattern of one bright Gaussian blob over a noisy background:
direction, speed and a sideways oscillation differ per class. The blob starts at a
random position and wraps around the frame edges, so a single frame only shows "a blob
somewhere" and classification needs several frames.

Frames are rendered on demand from (seed, video number, frame index), which makes any
subset of frames bit-identical to the same frames of a full render.
"""

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from lib.errors import DataError
from lib.manifest import DatasetManifest, SegmentAnnotation, VideoRecord

MIN_FRAME_SIDE = 8
BACKGROUND_LEVEL = 40.0
BLOB_PEAK = 180.0
OSCILLATION_PERIOD = 8.0  # frames


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    videos_per_class: int
    frames_per_video: int
    frame_size: Tuple[int, int] = (32, 32)
    seed: int = 0
    # temporal-dependence knobs
    motion_speed: float = 1.5  # pixels per frame
    noise_std: float = 20.0
    blob_radius: Optional[float] = None
    oscillation: float = 2.0  # pixels

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "SyntheticSpec":
        d = dict(d)
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise DataError(f"unknown synthetic generator keys: {unknown}")
        d["frame_size"] = tuple(d.get("frame_size", (32, 32)))
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        return d

    @property
    def radius(self) -> float:
        if self.blob_radius is not None:
            return float(self.blob_radius)
        return max(1.5, min(self.frame_size) / 12.0)


def class_motion(spec: SyntheticSpec, class_id: int) -> Tuple[float, float, float]:
    """(direction angle, speed, oscillation amplitude) of a class."""
    angle = 2.0 * math.pi * class_id / spec.num_classes + 0.3
    speed = spec.motion_speed * (1.0 + 0.5 * (class_id % 2))
    amp = spec.oscillation if class_id % 3 == 2 else 0.0
    return angle, speed, amp


class SyntheticVideoSource:
    """Frame source for records whose frame_source is ``synthetic:<video number>``."""

    def __init__(self, spec: SyntheticSpec):
        h, w = spec.frame_size
        if h < MIN_FRAME_SIDE or w < MIN_FRAME_SIDE:
            raise DataError(f"frame_size {spec.frame_size} too small to render the pattern (< 8x8)")
        self.spec = spec
        self._yy, self._xx = np.mgrid[0:h, 0:w].astype(np.float64)
        self._latent: Dict[int, Tuple[float, float, float, float]] = {}

    def _video_latent(self, number: int) -> Tuple[float, float, float, float]:
        # start y, start x, oscillation phase, speed jitter
        if number not in self._latent:
            rng = np.random.default_rng([self.spec.seed, number])
            h, w = self.spec.frame_size
            self._latent[number] = (
                float(rng.uniform(0, h)),
                float(rng.uniform(0, w)),
                float(rng.uniform(0, 2 * math.pi)),
                float(rng.uniform(0.9, 1.1)),
            )
        return self._latent[number]

    def blob_position(self, number: int, class_id: int, t: int) -> Tuple[float, float]:
        h, w = self.spec.frame_size
        y0, x0, phase, jitter = self._video_latent(number)
        angle, speed, amp = class_motion(self.spec, class_id)
        along = speed * jitter * t
        side = amp * math.sin(2 * math.pi * t / OSCILLATION_PERIOD + phase)
        y = y0 + along * math.sin(angle) + side * math.cos(angle)
        x = x0 + along * math.cos(angle) - side * math.sin(angle)
        return y % h, x % w

    def render_frame(self, number: int, class_id: int, t: int) -> np.ndarray:
        h, w = self.spec.frame_size
        cy, cx = self.blob_position(number, class_id, t)
        # toroidal distance so the blob wraps around the edges
        dy = np.abs(self._yy - cy)
        dy = np.minimum(dy, h - dy)
        dx = np.abs(self._xx - cx)
        dx = np.minimum(dx, w - dx)
        r = self.spec.radius
        blob = BLOB_PEAK * np.exp(-(dy ** 2 + dx ** 2) / (2 * r * r))
        noise = np.random.default_rng([self.spec.seed, number, t]).normal(0.0, self.spec.noise_std, (h, w))
        frame = np.rint(BACKGROUND_LEVEL + blob + noise)
        return np.clip(frame, 0, 255).astype(np.uint8)

    def read(self, record: VideoRecord, indices: Sequence[int]) -> np.ndarray:
        number = parse_synthetic_key(record.frame_source)
        if record.class_id is None:
            raise DataError(f"synthetic record '{record.video_id}' has no class")
        frames = [self.render_frame(number, record.class_id, record.frame_offset + int(i)) for i in indices]
        return np.stack(frames, axis=0)


def parse_synthetic_key(frame_source: str) -> int:
    prefix, _, number = frame_source.partition(":")
    if prefix != "synthetic" or not number.isdigit():
        raise DataError(f"not a synthetic frame source: '{frame_source}'")
    return int(number)


def _partition_counts(n: int) -> Tuple[int, int, int]:
    # 70/15/15 per class
    n_val = int(math.floor(0.15 * n + 0.5))
    n_test = n_val
    if n - n_val - n_test < 1:
        return n, 0, 0
    return n - n_val - n_test, n_val, n_test


def generate_synthetic_dataset(
    num_classes: int,
    videos_per_class: int,
    frames_per_video: int,
    frame_size: Tuple[int, int] = (32, 32),
    seed: int = 0,
    **knobs: Any,
) -> Tuple[DatasetManifest, SyntheticVideoSource]:
    """Build a trimmed manifest of moving-blob videos plus the frame source that renders them."""
    if min(num_classes, videos_per_class, frames_per_video) < 1:
        raise DataError("num_classes, videos_per_class and frames_per_video must be >= 1")
    spec = SyntheticSpec(
        num_classes=num_classes,
        videos_per_class=videos_per_class,
        frames_per_video=frames_per_video,
        frame_size=tuple(frame_size),
        seed=seed,
        **knobs,
    )
    source = SyntheticVideoSource(spec)
    return synthetic_manifest(spec), source


def synthetic_manifest(spec: SyntheticSpec) -> DatasetManifest:
    n_train, n_val, _ = _partition_counts(spec.videos_per_class)
    records: List[VideoRecord] = []
    for c in range(spec.num_classes):
        for k in range(spec.videos_per_class):
            number = c * spec.videos_per_class + k
            partition = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
            records.append(
                VideoRecord(
                    video_id=f"class_{c:02d}_{k:04d}",
                    total_frames=spec.frames_per_video,
                    segments=(SegmentAnnotation(0, spec.frames_per_video, c),),
                    class_id=c,
                    partition=partition,
                    frame_source=f"synthetic:{number}",
                )
            )
    return DatasetManifest(
        name=f"synthetic-{spec.num_classes}c-s{spec.seed}",
        class_names=tuple(f"class_{c:02d}" for c in range(spec.num_classes)),
        records=tuple(records),
        trim_mode="trimmed",
        generator=spec.to_dict(),
    )


def export_frames(manifest: DatasetManifest, source: SyntheticVideoSource, out_dir: Union[str, Path]) -> int:
    """Write every video as a directory of PNG frames; returns the number of frames written."""
    out_dir = Path(out_dir)
    written = 0
    for rec in manifest.records:
        vdir = out_dir / rec.video_id
        vdir.mkdir(parents=True, exist_ok=True)
        frames = source.read(rec, range(rec.total_frames))
        for i, frame in enumerate(frames):
            cv2.imwrite(str(vdir / f"frame_{i:05d}.png"), frame)
            written += 1
    return written


# ==========================================
# Oracle features (generator tuning)
# ==========================================


def blob_centroid(frame: np.ndarray) -> Tuple[int, int]:
    f = frame.astype(np.float64)
    # 3x3 box sum on the torus: np.roll wraps, matching how the blob wraps around the edges
    smooth = sum(np.roll(np.roll(f, dy, axis=0), dx, axis=1) for dy in (-1, 0, 1) for dx in (-1, 0, 1))
    y, x = np.unravel_index(int(np.argmax(smooth)), smooth.shape)
    return int(y), int(x)


def single_frame_features(frame: np.ndarray) -> np.ndarray:
    h, w = frame.shape
    y, x = blob_centroid(frame)
    return np.array([y / h, x / w, frame.mean() / 255.0])


def motion_features(frames: np.ndarray) -> np.ndarray:
    """Mean wrapped centroid displacement between consecutive frames."""
    h, w = frames.shape[1:]
    cents = np.array([blob_centroid(f) for f in frames], dtype=np.float64)
    if len(cents) < 2:
        return np.zeros(2)
    d = np.diff(cents, axis=0)
    d[:, 0] = (d[:, 0] + h / 2) % h - h / 2
    d[:, 1] = (d[:, 1] + w / 2) % w - w / 2
    return d.mean(axis=0)
