import numpy as np
import pytest

from dyadic_context import tensor as T
from dyadic_context.backbones import (LOG_FLOOR, LOG_OFFSET, LOG_SCALE, AudioBackbone, Backbones, VisualBackbone,
                                      freeze, stub_audio_forward, stub_visual_forward, unfreeze)
from dyadic_context.chunking import AUDIO_SAMPLES
from dyadic_context.tensor import Parameter, ShapeError
from dyadic_context.training import Adam


def test_visual_shape_contract(rng):
    net = VisualBackbone(seed=3)
    out = stub_visual_forward(rng.normal(size=(32, 112, 112, 3)), net)
    assert out.shape == (16, 28, 28, 128)
    assert VisualBackbone(seed=3, spatial=4)(np.zeros((32, 112, 112, 3))).shape == (16, 4, 4, 128)
    with pytest.raises(ShapeError):
        net(np.zeros((16, 112, 112, 3)))
    with pytest.raises(ValueError):
        VisualBackbone(seed=0, spatial=5)


def test_visual_zero_input_gives_bias_pattern():
    net = VisualBackbone(seed=1)
    out = net(np.zeros((32, 112, 112, 3))).data
    expected = np.maximum(net.bias.data, 0.0)
    assert np.all(out == expected)


def test_visual_temporal_average(rng):
    net = VisualBackbone(seed=1)
    chunk = rng.normal(size=(32, 112, 112, 3))
    pooled = net.pooled(chunk).data
    oracle = (chunk[4] + chunk[5]) / 2.0
    np.testing.assert_allclose(pooled[2, 0, 0], oracle[0:4, 0:4].mean(axis=(0, 1)), atol=1e-12)
    np.testing.assert_allclose(pooled[2, 27, 13], oracle[108:112, 52:56].mean(axis=(0, 1)), atol=1e-12)


def test_visual_deterministic(rng):
    chunk = rng.normal(size=(32, 112, 112, 3))
    a = VisualBackbone(seed=9)(chunk).data
    b = VisualBackbone(seed=9)(chunk).data
    assert a.tobytes() == b.tobytes() and np.all(np.isfinite(a))


def test_audio_contract_and_silence(rng):
    net = AudioBackbone(seed=0)
    assert stub_audio_forward(rng.normal(size=AUDIO_SAMPLES), net).shape == (128,)
    silent = net(np.zeros(AUDIO_SAMPLES)).data
    assert np.allclose(silent, (np.log(LOG_FLOOR) + LOG_OFFSET) * LOG_SCALE)
    with pytest.raises(ShapeError):
        net(np.zeros(1000))


def test_audio_monotone_in_amplitude(rng):
    net = AudioBackbone(seed=0)
    x = rng.normal(size=AUDIO_SAMPLES) * 0.1
    assert np.all(net(2 * x).data > net(x).data)


def test_local_and_extended_share_parameters():
    bb = Backbones.from_seed(5, spatial=4)
    assert bb.local is bb.extended
    assert bb.local.weight is bb.extended.weight
    chunk = np.full((32, 112, 112, 3), 0.5)
    before = bb.extended(chunk).data.copy()
    bb.local.weight.data = bb.local.weight.data * 2.0
    assert not np.array_equal(bb.extended(chunk).data, before)
    assert bb.face.weight is not bb.context.weight


def test_freeze_blocks_adam_updates(rng):
    bb = Backbones.from_seed(1, spatial=4)
    head = Parameter(rng.normal(size=(128, 1)), "head")
    params = bb.context.parameters() + [head]
    chunk = rng.normal(size=(32, 112, 112, 3))

    def step():
        for p in params:
            p.requires_grad = True
        loss = T.matmul(bb.context(chunk), head).mean()
        opt = Adam(params, lr=1e-2)
        opt.zero_grad()
        loss.backward()
        opt.step()

    frozen_before = [p.data.copy() for p in bb.context.parameters()]
    head_before = head.data.copy()
    step()
    assert all(np.array_equal(a, p.data) for a, p in zip(frozen_before, bb.context.parameters()))
    assert not np.array_equal(head_before, head.data)

    unfreeze(bb.context)
    step()
    assert not np.array_equal(frozen_before[0], bb.context.weight.data)
    freeze(bb.context)
    assert all(p.frozen for p in bb.context.parameters())
