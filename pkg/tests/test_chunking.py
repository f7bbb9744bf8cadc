import math

import numpy as np
import pytest

from dyadic_context.chunking import (AUDIO_SAMPLES, ChunkError, NormalizationStats, VideoStream,
                                     denormalize_pixels, extract_audio, extract_chunk, normalize_pixels,
                                     plan_chunks, read_audio, read_raw_tensor, resize_bilinear,
                                     selected_frames, subsample_uniform, write_audio, write_raw_tensor)
from dyadic_context.tracking import BoundingBox, NoTargetError, Track


def bilinear_oracle(image, box, size):
    """Pixel-by-pixel sampling at half-pixel centres, edges clamped."""
    h, w = image.shape[:2]
    x1, y1, x2, y2 = box
    out = np.zeros((size, size, image.shape[2]))
    for r in range(size):
        y = min(max(y1 + (r + 0.5) * (y2 - y1) / size - 0.5, 0.0), h - 1.0)
        for c in range(size):
            x = min(max(x1 + (c + 0.5) * (x2 - x1) / size - 0.5, 0.0), w - 1.0)
            i, j = int(math.floor(y)), int(math.floor(x))
            i2, j2 = min(i + 1, h - 1), min(j + 1, w - 1)
            dy, dx = y - i, x - j
            out[r, c] = ((1 - dy) * ((1 - dx) * image[i, j] + dx * image[i, j2])
                         + dy * ((1 - dx) * image[i2, j] + dx * image[i2, j2]))
    return out


def test_plan_chunks_examples():
    assert len(plan_chunks(6400)) == 100
    (only,) = plan_chunks(64)
    assert selected_frames(only) == list(range(0, 64, 2))
    with pytest.raises(ChunkError):
        plan_chunks(63)


def test_plan_chunks_disjoint_and_ordered():
    ranges = plan_chunks(1000)
    covered = [f for r in ranges for f in r]
    assert covered == list(range(64 * len(ranges)))


def test_constant_video_gives_constant_chunk():
    video = VideoStream(np.full((64, 30, 40, 3), 77.0))
    chunk = extract_chunk(video, plan_chunks(64)[0])
    assert chunk.shape == (32, 112, 112, 3)
    np.testing.assert_allclose(chunk, 77.0, atol=1e-12)


def test_full_frame_at_native_size_is_identity(rng):
    frames = rng.uniform(0, 255, (64, 112, 112, 3))
    chunk = extract_chunk(VideoStream(frames), range(0, 64))
    np.testing.assert_allclose(chunk, frames[::2], atol=1e-9)


def test_centered_crop_matches_oracle():
    yy, xx = np.mgrid[0:60, 0:80]
    image = np.stack([xx * 2.0, yy * 3.0, (xx + yy) * 1.0], axis=-1)
    box = (20.0, 15.0, 60.0, 45.0)
    np.testing.assert_allclose(resize_bilinear(image, box, 24), bilinear_oracle(image, box, 24), atol=1e-6)


def test_random_crop_matches_oracle(rng):
    image = rng.uniform(0, 255, (37, 53, 3))
    box = (3.3, 7.9, 41.2, 30.05)
    np.testing.assert_allclose(resize_bilinear(image, box, 17), bilinear_oracle(image, box, 17), atol=1e-9)


def test_crop_uses_nearest_track_box():
    frames = np.zeros((64, 40, 40, 3))
    frames[:, 0:21, 0:21] = 200.0
    track = Track([BoundingBox(10, 0, 0, 20, 20)])
    chunk = extract_chunk(VideoStream(frames), range(0, 64), track)
    assert np.all(chunk == 200.0)
    with pytest.raises(NoTargetError):
        extract_chunk(VideoStream(frames), range(0, 64), Track([]))


def test_extract_audio_windows():
    buf = np.arange(400000, dtype=np.float64)
    np.testing.assert_array_equal(extract_audio(buf, 0), buf[:AUDIO_SAMPLES])
    start = round(64 / 25 * 44100)
    assert start == 112896
    assert extract_audio(buf, 1)[0] == 112896.0
    short = extract_audio(np.ones(44100), 0)
    assert short.shape == (AUDIO_SAMPLES,)
    assert short[:44100].sum() == 44100 and not short[44100:].any()


def test_audio_never_precedes_video_by_half_sample():
    for fps in (25.0, 29.97, 30.0):
        for k in range(50):
            start = int(extract_audio(np.arange(k * 200000 + AUDIO_SAMPLES, dtype=float), k, fps)[0])
            assert start - k * 64 / fps * 44100 >= -0.5


def test_normalize_examples(rng):
    stats = NormalizationStats((0.2, 0.4, 0.6), (1.0, 1.0, 1.0))
    np.testing.assert_allclose(normalize_pixels(np.array([[51.0, 102.0, 153.0]]), stats), 0.0, atol=1e-12)
    unit = NormalizationStats((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    np.testing.assert_allclose(normalize_pixels(np.full((2, 3), 255.0), unit), 1.0)
    chunk = rng.uniform(0, 255, (4, 5, 5, 3))
    np.testing.assert_allclose(denormalize_pixels(normalize_pixels(chunk)), chunk, atol=1e-9)
    with pytest.raises(ValueError):
        NormalizationStats((0, 0, 0), (1.0, 0.0, 1.0))


def test_subsample_uniform_examples():
    assert subsample_uniform(list(range(120))) == list(range(120))
    assert subsample_uniform(list(range(240))) == list(range(0, 240, 2))
    assert subsample_uniform(list(range(5))) == list(range(5))
    picked = subsample_uniform(list(range(1000)), 120)
    assert picked == sorted(picked) and 100 <= len(picked) <= 120


def test_video_stream_validation():
    with pytest.raises(ChunkError):
        VideoStream(np.zeros((2, 4, 4)))
    with pytest.raises(ChunkError):
        VideoStream(np.full((1, 2, 2, 3), 300.0))


def test_raw_formats_round_trip(tmp_path, rng):
    arr = rng.normal(size=(2, 3, 4, 3))
    write_raw_tensor(tmp_path / "v.bin", arr)
    raw = (tmp_path / "v.bin").read_bytes()
    assert np.frombuffer(raw[:16], dtype="<u4").tolist() == [2, 3, 4, 3]
    np.testing.assert_array_equal(read_raw_tensor(tmp_path / "v.bin"), arr)
    (tmp_path / "cut.bin").write_bytes(raw[:-8])
    with pytest.raises(ChunkError):
        read_raw_tensor(tmp_path / "cut.bin")
    samples = rng.normal(size=1000)
    write_audio(tmp_path / "a.bin", samples, 16000)
    back, rate = read_audio(tmp_path / "a.bin")
    assert rate == 16000
    np.testing.assert_array_equal(back, samples)
