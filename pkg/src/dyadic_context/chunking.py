"""Time-synchronised video/audio chunks.

A chunk spans 64 source frames, keeps every second frame (32 frames), and is
resized to 112x112.  The matching audio window is 132300 samples at 44.1 kHz
anchored at the chunk's first frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tracking import NoTargetError, Track

CHUNK_FRAMES = 32
FRAME_STRIDE = 2
SOURCE_SPAN = CHUNK_FRAMES * FRAME_STRIDE
CHUNK_SIZE = 112
AUDIO_RATE = 44100
AUDIO_SAMPLES = 132300
DEFAULT_FPS = 25.0


class ChunkError(ValueError):
    pass


@dataclass
class VideoStream:
    """Frames as an ``(L, H, W, 3)`` array with values in [0, 255]."""

    frames: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ChunkError(f"video must be (L,H,W,3), got {self.frames.shape}")
        if self.frames.size and (self.frames.min() < 0 or self.frames.max() > 255):
            raise ChunkError("pixel values outside [0, 255]")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def frame(self, i: int) -> np.ndarray:
        return self.frames[i]


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("need three channel means and stds")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std must be positive, got {self.std}")


# Stand-in values; the backbone's true pretraining statistics are not bundled.
DEFAULT_STATS = NormalizationStats((0.43216, 0.394666, 0.37645), (0.22803, 0.22145, 0.216989))


@dataclass
class ChunkBundle:
    face: np.ndarray
    local: np.ndarray
    extended: np.ndarray
    audio: np.ndarray
    chunk_index: int
    source_frame_range: range


def plan_chunks(frame_count: int) -> list[range]:
    """Disjoint 64-frame source ranges; the trailing remainder is dropped."""
    if frame_count < SOURCE_SPAN:
        raise ChunkError(f"video too short: {frame_count} frames < {SOURCE_SPAN}")
    return [range(k * SOURCE_SPAN, (k + 1) * SOURCE_SPAN) for k in range(frame_count // SOURCE_SPAN)]


def selected_frames(source_range: range) -> list[int]:
    return list(source_range[::FRAME_STRIDE])


def resize_bilinear(image: np.ndarray, box=None, size: int = CHUNK_SIZE) -> np.ndarray:
    """Resample ``image`` (H, W, C) or the ``box`` = (x1, y1, x2, y2) region of it
    onto a ``size`` x ``size`` grid with half-pixel-centred bilinear sampling."""
    h, w = image.shape[:2]
    x1, y1, x2, y2 = (0.0, 0.0, float(w), float(h)) if box is None else map(float, box)
    xs = x1 + (np.arange(size) + 0.5) * (x2 - x1) / size - 0.5
    ys = y1 + (np.arange(size) + 0.5) * (y2 - y1) / size - 0.5
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1i = np.minimum(x0 + 1, w - 1)
    y1i = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1i] * fx
    bottom = image[y1i][:, x0] * (1 - fx) + image[y1i][:, x1i] * fx
    return top * (1 - fy) + bottom * fy


def extract_chunk(video: VideoStream, source_range: range, crop: Track | None = None) -> np.ndarray:
    """(32, 112, 112, 3) chunk from ``source_range``; cropped to ``crop`` when given."""
    if crop is not None and len(crop) == 0:
        raise NoTargetError("face track is empty")
    if source_range.stop > video.frame_count:
        raise ChunkError(f"range {source_range} exceeds {video.frame_count} frames")
    out = np.empty((CHUNK_FRAMES, CHUNK_SIZE, CHUNK_SIZE, 3))
    for k, f in enumerate(selected_frames(source_range)):
        box = None
        if crop is not None:
            b = crop.nearest(f)
            box = (b.x1, b.y1, b.x2, b.y2)
        out[k] = resize_bilinear(video.frame(f), box)
    return out


def extract_audio(samples: np.ndarray, chunk_index: int, fps: float = DEFAULT_FPS,
                  rate: int = AUDIO_RATE) -> np.ndarray:
    """132300-sample window starting at the chunk's first frame; zero-padded at the end."""
    samples = np.asarray(samples, dtype=np.float64)
    start = int(math.floor(chunk_index * SOURCE_SPAN / fps * rate + 0.5))
    out = np.zeros(AUDIO_SAMPLES)
    piece = samples[start:start + AUDIO_SAMPLES]
    out[:piece.size] = piece
    return out


def normalize_pixels(chunk: np.ndarray, stats: NormalizationStats = DEFAULT_STATS) -> np.ndarray:
    return (np.asarray(chunk) / 255.0 - np.asarray(stats.mean)) / np.asarray(stats.std)


def denormalize_pixels(chunk: np.ndarray, stats: NormalizationStats = DEFAULT_STATS) -> np.ndarray:
    return (np.asarray(chunk) * np.asarray(stats.std) + np.asarray(stats.mean)) * 255.0


def subsample_uniform(chunks: list, target: int = 120) -> list:
    """Keep about ``target`` evenly spaced chunks, preserving order."""
    n = len(chunks)
    if n <= target:
        return list(chunks)
    idx = sorted({int(math.floor(i * n / target + 0.5)) for i in range(target)})
    return [chunks[i] for i in idx if i < n]


# -- raw file formats --------------------------------------------------------------
# tensor: 4 x uint32 LE dims, then float64 LE row-major
# audio:  uint32 LE sample rate, uint32 LE sample count, then float64 LE samples

def write_raw_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f8")
    if array.ndim != 4:
        raise ValueError(f"raw tensors are 4-D, got {array.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def read_raw_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims = struct.unpack_from("<4I", raw)
    data = np.frombuffer(raw, dtype="<f8", offset=16)
    if data.size != int(np.prod(dims)):
        raise ChunkError(f"{path}: header {dims} does not match payload of {data.size} values")
    return data.reshape(dims).astype(np.float64)


def write_audio(path, samples: np.ndarray, rate: int = AUDIO_RATE) -> None:
    samples = np.asarray(samples, dtype="<f8").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2I", rate, samples.size))
        fh.write(samples.tobytes())


def read_audio(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    rate, count = struct.unpack_from("<2I", raw)
    data = np.frombuffer(raw, dtype="<f8", offset=8)
    if data.size != count:
        raise ChunkError(f"{path}: expected {count} samples, found {data.size}")
    return data.astype(np.float64), rate
