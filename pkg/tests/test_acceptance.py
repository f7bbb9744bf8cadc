"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

from dyadic_context import tensor as T
from dyadic_context.backbones import Backbones
from dyadic_context.chunking import AUDIO_SAMPLES, ChunkBundle
from dyadic_context.cli import main
from dyadic_context.harness import ablation_suite, desk_config, evaluate_subjects, mean_value_baseline
from dyadic_context.metadata import TRAITS, encode_extended, encode_individual, encode_local
from dyadic_context.model import DyadicTransformer, ModelConfig, predict_batch
from dyadic_context.splits import (SplitConfig, greedy_optimize, ks_statistic, pearson,
                                   subject_independent)
from dyadic_context.tensor import no_grad
from dyadic_context.tracking import MAX_GAP, BoundingBox, Track, identify_target, interpolate_gaps
from dyadic_context.training import Sample, TrainConfig, evaluate_mse, mse_loss, select_checkpoint, train

from conftest import central_difference, planted_stream, random_features, random_meta, rel_error
from test_harness import TINY
from test_metadata import GOLDEN_EXTENDED, GOLDEN_LOCAL, OTHER, OTHER_STATE, TARGET, TARGET_STATE
from test_splits import ecdf_oracle, pearson_oracle, replicated_components


def verdict(number, ok, detail):
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_01_shape_ledger():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    model = DyadicTransformer(ModelConfig(seed=0).with_scenario("LEam"))
    chunk = lambda: rng.uniform(0, 255, (32, 112, 112, 3))  # noqa: E731
    bundle = ChunkBundle(chunk(), chunk(), chunk(), rng.normal(0, 0.1, AUDIO_SAMPLES), 0, range(64))
    trace = {}
    with no_grad():
        model.predict_chunk(bundle, random_meta(rng), Backbones.from_seed(7), trace=trace)
    elapsed = time.perf_counter() - start
    expected = {
        "Z'_F": (16, 28, 28, 128), "Z'_L": (16, 28, 28, 128), "Z'_E": (16, 28, 28, 128),
        "P": (16, 28, 28, 20),
        "Z_F": (16, 28, 28, 148), "Z_L": (16, 28, 28, 148), "Z_E": (16, 28, 28, 148),
        "W_L": (16, 28, 28, 248), "W_E": (16, 28, 28, 267),
        "f": (128,), "w_Q": (148,), "q_i": [(128,)] * 3, "y": (5,),
    }
    wrong = {k: trace.get(k) for k, v in expected.items() if trace.get(k) != v}
    verdict(1, not wrong and elapsed < 10.0, f"mismatches={wrong} runtime={elapsed:.2f}s")


def test_criterion_02_gradients_match_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    model = DyadicTransformer(ModelConfig(spatial=4, seed=3).with_scenario("LEam"))
    # zero biases put the encoding MLP's origin rows exactly on the ReLU kink; check at a generic point
    for p in model.parameters():
        p.data = p.data + rng.normal(0, 1e-2, p.shape)
    feats, meta, label = random_features(rng), random_meta(rng), rng.normal(size=(1, 5))

    def loss():
        return mse_loss(predict_batch(model, [(feats, meta)]), label)

    loss().backward()

    def scalar():
        with no_grad():
            return loss().item()

    worst, groups = 0.0, 0
    for name, p in model.named_parameters().items():
        flat = rng.choice(p.data.size, size=min(20, p.data.size), replace=False)
        coords = [np.unravel_index(i, p.shape) for i in flat]
        analytic = np.array([p.grad[c] for c in coords])
        numeric = np.array([central_difference(scalar, p.data, c, h=1e-5) for c in coords])
        worst = max(worst, rel_error(analytic, numeric))
        groups += 1
    elapsed = time.perf_counter() - start
    verdict(2, worst < 1e-3 and elapsed < 120.0,
            f"groups={groups} worst_rel_error={worst:.2e} runtime={elapsed:.1f}s")


def test_criterion_03_attention_invariants(rng):
    unit = DyadicTransformer(ModelConfig(spatial=4, seed=0).with_scenario("L")).layers[0].local
    worst_sum = worst_hull = worst_perm = 0.0
    for trial in range(20):
        n = int(rng.integers(1, 40))
        q = T.tensor(rng.normal(size=128))
        k = T.tensor(rng.normal(size=(n, 128)))
        v = T.tensor(rng.normal(size=(n, 128)))
        heads, weights, values = unit.attend(q, k, v)
        for h, (w, vh) in enumerate(zip(weights, values)):
            worst_sum = max(worst_sum, abs(w.data.sum() - 1.0))
            out = heads.data[h * 64:(h + 1) * 64]
            below = vh.data.min(axis=0) - out
            above = out - vh.data.max(axis=0)
            worst_hull = max(worst_hull, float(np.max(below)), float(np.max(above)))
        perm = rng.permutation(n)
        a = unit(q, k, v).data
        b = unit(q, T.tensor(k.data[perm]), T.tensor(v.data[perm])).data
        worst_perm = max(worst_perm, float(np.max(np.abs(a - b))))
    ok = worst_sum <= 1e-9 and worst_hull <= 1e-12 and worst_perm <= 1e-12
    verdict(3, ok, f"sum_err={worst_sum:.1e} hull_excess={worst_hull:.1e} perm_diff={worst_perm:.1e}")


def test_criterion_04_training_sanity(rng):
    data = [Sample(random_features(rng), random_meta(rng), rng.normal(size=5), f"P{i}", f"S{i}") for i in range(4)]
    model = DyadicTransformer(ModelConfig(spatial=4, seed=0).with_scenario("LEam"))
    cfg = TrainConfig(batch_size=4, max_steps=500, lr=1e-3, validations_per_epoch=1, seed=0)
    train(model, data, data[:1], cfg)
    final = evaluate_mse(model, data)
    picked = select_checkpoint([3, 1, 3, 0.9, 3])
    verdict(4, final < 0.05 and picked == 2, f"train_mse={final:.2e} selected_index={picked} (expected 2)")


def test_criterion_05_baseline_identity():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        train_y = rng.normal(size=(int(rng.integers(1, 40)), 5)) * rng.uniform(0.1, 3)
        test_y = rng.normal(size=(int(rng.integers(1, 20)), 5)) + rng.normal(size=5)
        samples = [Sample(None, None, y, f"p{i}", "S") for i, y in enumerate(test_y)]
        report = evaluate_subjects(mean_value_baseline(train_y), samples, "Talk", "B")
        algebraic = ((test_y - train_y.mean(axis=0)) ** 2).mean(axis=0)
        worst = max(worst, float(np.max(np.abs([report.mse[t] for t in TRAITS] - algebraic))))
    verdict(5, worst <= 1e-12, f"max_abs_diff={worst:.1e} over 50 label sets")


def test_criterion_06_desk_ablation_ordering():
    start = time.perf_counter()
    cfg = desk_config()
    assert cfg.synthetic.metadata_effect == 1.0 and cfg.synthetic.audio_effect == 1.0
    reports = {r.scenario: r.average for r in ablation_suite(cfg, scenarios=("B", "L", "Lm", "LE", "LEam"))}
    elapsed = time.perf_counter() - start
    ok = reports["Lm"] < reports["L"] and reports["LEam"] <= reports["LE"] and elapsed < 900
    summary = " ".join(f"{k}={v:.3f}" for k, v in reports.items())
    verdict(6, ok, f"{summary} runtime={elapsed:.0f}s (synthetic corpus; published absolute MSEs not reproducible)")


def test_criterion_07_tracking_oracle():
    hits = 0
    for seed in range(50):
        stream, truth = planted_stream(seed)
        found = identify_target(stream)
        hits += found is not None and truth[found.frame] == found
    wrong_counts = []
    for gap in range(1, 41):
        t = interpolate_gaps(None, Track([BoundingBox(0, 0, 0, 4, 4), BoundingBox(gap, 8, 8, 12, 12)]))
        expected = gap - 1 if 2 <= gap <= 24 else 0
        if len(t) - 2 != expected:
            wrong_counts.append(gap)
    verdict(7, hits >= 48 and not wrong_counts and MAX_GAP == 25,
            f"targets found {hits}/50, interpolation mismatches at gaps {wrong_counts}")


def test_criterion_08_statistics_oracles():
    rng = np.random.default_rng(8)
    worst_ks = worst_r = 0.0
    for _ in range(200):
        m, n = rng.integers(1, 12, 2)
        a, b = np.round(rng.normal(size=m), 1), np.round(rng.normal(size=n), 1)
        worst_ks = max(worst_ks, abs(ks_statistic(a, b) - ecdf_oracle(a, b)))
        k = int(rng.integers(2, 12))
        x, y = rng.normal(size=k), rng.normal(size=k)
        worst_r = max(worst_r, abs(pearson(x, y) - pearson_oracle(x, y)))

    records = replicated_components()
    violations = []
    start = {r.session_id: ("train", "val", "test")[k % 3] for k, r in enumerate(records)}
    result = greedy_optimize(records, SplitConfig(), seed=0, initial=start,
                             on_accept=lambda labels, _: violations.append(not subject_independent(labels, records)))
    counts = tuple(len(result.sessions(s)) for s in ("train", "val", "test", "removed"))
    ok = worst_ks < 1e-12 and worst_r < 1e-12 and counts == (8, 1, 1, 0) and not any(violations)
    verdict(8, ok, f"ks_err={worst_ks:.1e} r_err={worst_r:.1e} split={counts} "
                   f"iterations={len(violations)} violations={sum(violations)}")


def test_criterion_09_ablate_is_deterministic(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    outputs = []
    for run in ("a", "b"):
        assert main(["ablate", "--config", str(cfg), "--out-dir", str(tmp_path / run)]) == 0
        outputs.append((tmp_path / run / "ablation.csv").read_bytes())
    verdict(9, outputs[0] == outputs[1] and len(outputs[0]) > 0, f"{len(outputs[0])} bytes per report")


def test_criterion_10_metadata_golden_vectors():
    local = encode_local(TARGET, TARGET_STATE).tolist()
    extended = encode_extended(OTHER, OTHER_STATE).tolist()
    footnotes = encode_individual(TARGET, TARGET_STATE)[-1] == 0.0 and local[-1] == 0.0
    ok = local == GOLDEN_LOCAL and extended == GOLDEN_EXTENDED and footnotes
    verdict(10, ok, f"local {len(local)}-d, extended {len(extended)}-d, fatigue/difficulty rules={footnotes}")


@pytest.fixture(autouse=True)
def _show_verdicts(capsys):
    yield
    out = capsys.readouterr().out
    with capsys.disabled():
        for line in out.splitlines():
            if line.startswith("criterion"):
                print("\n  " + line, end="")
