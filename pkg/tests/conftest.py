from __future__ import annotations

import numpy as np
import pytest

from dyadic_context.backbones import FEATURE_CHANNELS, FEATURE_FRAMES
from dyadic_context.metadata import EXTENDED_DIM, LOCAL_DIM, MetadataVectors
from dyadic_context.model import REDUCED_GEOMETRY, ChunkFeatures, DyadicTransformer, ModelConfig
from dyadic_context.tracking import BoundingBox, DetectionStream


def central_difference(f, x: np.ndarray, index, h: float = 1e-5) -> float:
    """d f / d x[index] by central differences, restoring ``x`` afterwards."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def random_features(rng: np.random.Generator, spatial: int = REDUCED_GEOMETRY) -> ChunkFeatures:
    shape = (FEATURE_FRAMES, spatial, spatial, FEATURE_CHANNELS)
    return ChunkFeatures(
        face=np.abs(rng.normal(0.3, 0.3, shape)),
        local=np.abs(rng.normal(0.3, 0.3, shape)),
        extended=np.abs(rng.normal(0.3, 0.3, shape)),
        audio=rng.normal(0.0, 0.5, FEATURE_CHANNELS),
    )


def random_meta(rng: np.random.Generator) -> MetadataVectors:
    return MetadataVectors(rng.random(LOCAL_DIM), rng.random(EXTENDED_DIM))


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def small_model_factory():
    def make(scenario: str = "LEam", seed: int = 0) -> DyadicTransformer:
        return DyadicTransformer(ModelConfig(spatial=REDUCED_GEOMETRY, seed=seed).with_scenario(scenario))
    return make


def planted_stream(seed: int, frame_count: int = 200, frame_size=(320, 240),
                   detect_rate: float = 0.9, n_distractors: int = 6):
    """One seated target drifting slightly plus short-lived distractor faces.

    Returns the stream and the target's ground-truth box per frame (or None when missed).
    """
    rng = np.random.default_rng(seed)
    w, h = frame_size
    size = rng.uniform(50, 70)
    cx, cy = rng.uniform(size, w - size), rng.uniform(size, h - size)
    frames: list[list[BoundingBox]] = [[] for _ in range(frame_count)]
    truth: list[BoundingBox | None] = [None] * frame_count
    for f in range(frame_count):
        jx, jy = rng.normal(0, 1.5, 2)
        box = BoundingBox(f, cx + jx - size / 2, cy + jy - size / 2, cx + jx + size / 2, cy + jy + size / 2)
        if rng.random() < detect_rate:
            frames[f].append(box)
            truth[f] = box
    for _ in range(n_distractors):
        start = int(rng.integers(0, frame_count - 10))
        length = int(rng.integers(2, 8))
        ds = rng.uniform(25, 45)
        x0, y0 = rng.uniform(0, w - ds), rng.uniform(0, h - ds)
        vx = rng.normal(0, 6)
        for f in range(start, min(start + length, frame_count)):
            x = float(np.clip(x0 + vx * (f - start), 0, w - ds))
            frames[f].insert(int(rng.integers(0, len(frames[f]) + 1)), BoundingBox(f, x, y0, x + ds, y0 + ds))
    return DetectionStream(frames, frame_size), truth
