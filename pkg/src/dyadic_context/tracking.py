"""Face-box geometry: IoU, target identification, greedy IoU tracking, gap filling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_GAP = 25  # one second at 25 fps


class NoTargetError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    frame: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.frame < 0:
            raise ValueError(f"negative frame index {self.frame}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    @property
    def coords(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class DetectionStream:
    """Per-frame detections of one video; ``frames[i]`` lists boxes of frame ``i``."""

    frames: list[list[BoundingBox]]
    frame_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        w, h = self.frame_size
        for i, boxes in enumerate(self.frames):
            for b in boxes:
                if b.frame != i:
                    raise ValueError(f"box {b} stored under frame {i}")
                if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
                    raise ValueError(f"box {b} outside frame extent {self.frame_size}")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def detections(self) -> list[BoundingBox]:
        """All boxes in frame order, then list order within a frame."""
        return [b for boxes in self.frames for b in boxes]

    def detection_ratio(self) -> float:
        if not self.frames:
            return 0.0
        return sum(1 for boxes in self.frames if boxes) / len(self.frames)

    @classmethod
    def from_boxes(cls, boxes, frame_count: int, frame_size: tuple[int, int]) -> "DetectionStream":
        frames: list[list[BoundingBox]] = [[] for _ in range(frame_count)]
        for b in boxes:
            if not 0 <= b.frame < frame_count:
                raise ValueError(f"frame {b.frame} outside [0, {frame_count})")
            frames[b.frame].append(b)
        return cls(frames, frame_size)


@dataclass
class Track:
    boxes: list[BoundingBox] = field(default_factory=list)

    def __post_init__(self):
        frames = [b.frame for b in self.boxes]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("track frames must be strictly increasing")

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def frames(self) -> list[int]:
        return [b.frame for b in self.boxes]

    def nearest(self, frame: int) -> BoundingBox:
        """Box at ``frame`` or, if uncovered, the temporally closest one (earlier wins ties)."""
        if not self.boxes:
            raise NoTargetError("empty track")
        frames = np.asarray(self.frames)
        pos = int(np.searchsorted(frames, frame))
        if pos < len(frames) and frames[pos] == frame:
            return self.boxes[pos]
        candidates = [i for i in (pos - 1, pos) if 0 <= i < len(frames)]
        best = min(candidates, key=lambda i: (abs(frames[i] - frame), frames[i]))
        return self.boxes[best]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _iou_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    ix = np.clip(np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0]), 0, None)
    iy = np.clip(np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1]), 0, None)
    inter = ix * iy
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def interpolate_gaps(stream: DetectionStream | None, track: Track, max_gap: int = MAX_GAP) -> Track:
    """Fill gaps of ``g`` frames (``1 < g < max_gap``) with linearly interpolated boxes.

    Existing boxes are kept verbatim; longer gaps stay open.
    """
    boxes = track.boxes
    if len(boxes) < 2:
        return Track(list(boxes))
    out: list[BoundingBox] = []
    for a, b in zip(boxes, boxes[1:]):
        out.append(a)
        gap = b.frame - a.frame
        if 1 < gap < max_gap:
            ca, cb = a.coords, b.coords
            for k in range(1, gap):
                c = ca + (cb - ca) * (k / gap)
                out.append(BoundingBox(a.frame + k, *map(float, c)))
    out.append(boxes[-1])
    return Track(out)


def identify_target(stream: DetectionStream, threshold: float = 0.2) -> BoundingBox:
    """Return the first detection whose mean IoU against detections in other frames
    exceeds ``threshold``; falls back to the detection with the highest mean IoU."""
    dets = stream.detections()
    if not dets:
        raise NoTargetError("detection stream has no detections")
    coords = np.array([d.coords for d in dets])
    frames = np.array([d.frame for d in dets])
    best_idx, best_score = 0, -1.0
    for i, d in enumerate(dets):
        other = frames != d.frame
        score = float(_iou_many(coords[i], coords[other]).mean()) if other.any() else 0.0
        if score > threshold:
            return d
        if score > best_score:
            best_idx, best_score = i, score
    return dets[best_idx]


def _follow(stream: DetectionStream, start: BoundingBox, frame_range) -> list[BoundingBox]:
    last = start
    picked = []
    for f in frame_range:
        cands = stream.frames[f]
        if not cands:
            continue
        scores = [iou(last, c) for c in cands]
        j = int(np.argmax(scores))
        if scores[j] > 0:
            last = cands[j]
            picked.append(last)
    return picked


def track_target(stream: DetectionStream, seed: BoundingBox, max_gap: int = MAX_GAP) -> Track:
    """Greedy IoU association forward and backward from ``seed``, then gap filling."""
    if seed not in stream.frames[seed.frame]:
        raise ValueError(f"seed {seed} is not a detection of the stream")
    forward = _follow(stream, seed, range(seed.frame + 1, stream.frame_count))
    backward = _follow(stream, seed, range(seed.frame - 1, -1, -1))
    track = Track(list(reversed(backward)) + [seed] + forward)
    return interpolate_gaps(stream, track, max_gap)


# -- text format: ``frame x1 y1 x2 y2`` per line ----------------------------------

def read_detections(path, frame_size: tuple[int, int], frame_count: int | None = None) -> DetectionStream:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'frame x1 y1 x2 y2'")
        boxes.append(BoundingBox(int(parts[0]), *map(float, parts[1:])))
    if any(b.frame < a.frame for a, b in zip(boxes, boxes[1:])):
        raise ValueError(f"{path}: detections not sorted by frame")
    if frame_count is None:
        frame_count = boxes[-1].frame + 1 if boxes else 0
    return DetectionStream.from_boxes(boxes, frame_count, frame_size)


def write_boxes(path, boxes) -> None:
    lines = [f"{b.frame} {b.x1:.10g} {b.y1:.10g} {b.x2:.10g} {b.y2:.10g}" for b in boxes]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
