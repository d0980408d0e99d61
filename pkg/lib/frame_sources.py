"""Resolve a manifest's frame_source locators into 8-bit grayscale frame stacks."""

from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import cv2
import numpy as np

from lib.errors import DataError
from lib.manifest import DatasetManifest, VideoRecord
from lib.synthetic_videos import SyntheticSpec, SyntheticVideoSource


class FrameSource(Protocol):
    def read(self, record: VideoRecord, indices: Sequence[int]) -> np.ndarray:
        """Frames at record-relative indices as a (k, h, w) uint8 array."""
        ...


class DirectoryFrameSource:
    """Pre-extracted frames: ``<frame_source>/frame_00000.png`` ... relative to a base directory."""

    def __init__(self, base_dir: Union[str, Path] = "."):
        self.base_dir = Path(base_dir)

    def _frame_path(self, record: VideoRecord, index: int) -> Path:
        root = Path(record.frame_source)
        if not root.is_absolute():
            root = self.base_dir / root
        return root / f"frame_{record.frame_offset + index:05d}.png"

    def read(self, record: VideoRecord, indices: Sequence[int]) -> np.ndarray:
        frames = []
        for i in indices:
            path = self._frame_path(record, int(i))
            img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise DataError(f"cannot read frame {path} of '{record.video_id}'")
            frames.append(img)
        try:
            return np.stack(frames, axis=0)
        except ValueError:
            raise DataError(f"frames of '{record.video_id}' have inconsistent sizes") from None


def open_frame_source(manifest: DatasetManifest, base_dir: Optional[Union[str, Path]] = None) -> FrameSource:
    if manifest.generator is not None:
        return SyntheticVideoSource(SyntheticSpec.from_dict(manifest.generator))
    return DirectoryFrameSource(base_dir or ".")
