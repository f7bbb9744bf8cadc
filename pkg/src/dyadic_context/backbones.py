"""Feature extractors behind fixed shape contracts, with seeded stand-in implementations.

Visual: (32, 112, 112, 3) -> (16, S, S, 128), S = 28 at full geometry.
Audio:  (132300,) -> (128,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .chunking import AUDIO_RATE, AUDIO_SAMPLES, CHUNK_FRAMES, CHUNK_SIZE
from .tensor import Parameter, ShapeError, Tensor

FEATURE_FRAMES = 16
FEATURE_CHANNELS = 128
AUDIO_FEATURES = 128
AUDIO_WINDOW = 1024
LOG_FLOOR = 1e-6
# affine map of log energies into roughly [-1, 1]; silence sits near -0.4
LOG_OFFSET = 10.0
LOG_SCALE = 0.1


class VisualBackbone:
    """Temporal pair averaging, spatial average pooling, frozen 3->128 lift + ReLU."""

    def __init__(self, seed: int, spatial: int = 28, name: str = "theta_C"):
        if CHUNK_SIZE % spatial:
            raise ValueError(f"spatial extent {spatial} must divide {CHUNK_SIZE}")
        rng = np.random.default_rng(seed)
        self.spatial = spatial
        self.weight = Parameter(rng.uniform(-1, 1, (3, FEATURE_CHANNELS)) / np.sqrt(3), f"{name}.weight", frozen=True)
        self.bias = Parameter(rng.uniform(0, 0.1, FEATURE_CHANNELS), f"{name}.bias", frozen=True)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def pooled(self, chunk) -> Tensor:
        x = T.tensor(chunk)
        if x.shape != (CHUNK_FRAMES, CHUNK_SIZE, CHUNK_SIZE, 3):
            raise ShapeError(f"visual backbone expects (32,112,112,3), got {x.shape}")
        p = CHUNK_SIZE // self.spatial
        x = x.reshape(FEATURE_FRAMES, 2, CHUNK_SIZE, CHUNK_SIZE, 3).mean(axis=1)
        return x.reshape(FEATURE_FRAMES, self.spatial, p, self.spatial, p, 3).mean(axis=(2, 4))

    def __call__(self, chunk) -> Tensor:
        return T.relu(T.matmul(self.pooled(chunk), self.weight) + self.bias)


def _filter_bank(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    freqs = np.geomspace(50.0, 8000.0, AUDIO_FEATURES)
    phases = rng.uniform(0, 2 * np.pi, AUDIO_FEATURES)
    t = np.arange(AUDIO_WINDOW) / AUDIO_RATE
    window = np.hanning(AUDIO_WINDOW)[:, None]
    return window * np.cos(2 * np.pi * freqs[None, :] * t[:, None] + phases[None, :]) / np.sqrt(AUDIO_WINDOW)


class AudioBackbone:
    """Rescaled log band energies from 128 Hann-windowed cosine filters over 1024-sample frames."""

    def __init__(self, seed: int, name: str = "theta_A"):
        self.bank = Parameter(_filter_bank(seed), f"{name}.bank", frozen=True)

    def parameters(self) -> list[Parameter]:
        return [self.bank]

    def __call__(self, audio) -> Tensor:
        x = T.tensor(audio)
        if x.shape != (AUDIO_SAMPLES,):
            raise ShapeError(f"audio backbone expects ({AUDIO_SAMPLES},), got {x.shape}")
        n = AUDIO_SAMPLES // AUDIO_WINDOW
        frames = x[: n * AUDIO_WINDOW].reshape(n, AUDIO_WINDOW)
        resp = T.matmul(frames, self.bank)
        energy = (resp * resp).mean(axis=0)
        return (T.log(energy + LOG_FLOOR) + LOG_OFFSET) * LOG_SCALE


@dataclass
class Backbones:
    """Face network plus one context network shared by the local and extended streams."""

    face: VisualBackbone
    context: VisualBackbone
    audio: AudioBackbone

    @classmethod
    def from_seed(cls, seed: int, spatial: int = 28) -> "Backbones":
        return cls(VisualBackbone(seed, spatial, "theta_F"),
                   VisualBackbone(seed + 1, spatial, "theta_C"),
                   AudioBackbone(seed + 2, "theta_A"))

    @property
    def local(self) -> VisualBackbone:
        return self.context

    @property
    def extended(self) -> VisualBackbone:
        return self.context

    def parameters(self) -> list[Parameter]:
        return self.face.parameters() + self.context.parameters() + self.audio.parameters()


def freeze(backbone) -> None:
    for p in backbone.parameters():
        p.frozen = True


def unfreeze(backbone) -> None:
    for p in backbone.parameters():
        p.frozen = False


def stub_visual_forward(chunk, backbone: VisualBackbone) -> Tensor:
    return backbone(chunk)


def stub_audio_forward(audio, backbone: AudioBackbone) -> Tensor:
    return backbone(audio)
