import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from dyadic_context.cli import main
from dyadic_context.corpus import SyntheticSpec, generate_synthetic, load_corpus, write_corpus
from dyadic_context.harness import (REPORT_COLUMNS, ExperimentConfig, ExperimentError, MetricsReport,
                                    ablation_table, desk_config, evaluate_subjects, mean_value_baseline,
                                    partition, prepare_data)
from dyadic_context.metadata import TRAITS
from dyadic_context.model import aggregate_subject
from dyadic_context.training import Sample

TINY = {
    "synthetic": {"n_participants": 24, "n_sessions": 12, "frame_count": 128},
    "model": {"spatial": 4},
    "train": {"max_steps": 3, "lr": 1e-3},
    "split": {"target_ratios": [0.6, 0.2, 0.2]},
    "max_chunks": 2,
}


def label_sample(pid, label, sid="S"):
    return Sample(None, None, np.asarray(label, dtype=np.float64), pid, sid)


def test_baseline_identity_small():
    base = mean_value_baseline([[-1.0] * 5, [1.0] * 5])
    assert base().tolist() == [0.0] * 5
    report = evaluate_subjects(base, [label_sample("t", [1.0] * 5)], "Talk", "B")
    assert report.mse == dict.fromkeys(TRAITS, 1.0) and report.average == 1.0
    with pytest.raises(ExperimentError):
        mean_value_baseline([])


def test_baseline_matches_second_moment(rng):
    train = rng.normal(size=(30, 5))
    test = rng.normal(size=(9, 5))
    report = evaluate_subjects(mean_value_baseline(train), [label_sample(f"p{i}", y) for i, y in enumerate(test)],
                               "Talk", "B")
    expected = ((test - train.mean(axis=0)) ** 2).mean(axis=0)
    assert np.max(np.abs(np.array([report.mse[t] for t in TRAITS]) - expected)) < 1e-12


def test_evaluation_aggregates_chunks_per_participant():
    samples = [label_sample("a", [0.0] * 5), label_sample("a", [0.0] * 5), label_sample("a", [0.0] * 5)]
    preds = iter([np.full(5, 0.1), np.full(5, 0.3), np.full(5, 0.2)])
    report = evaluate_subjects(lambda s: next(preds), samples, "Talk", "L")
    assert report.mse["O"] == pytest.approx(float(aggregate_subject([np.full(5, 0.2)])[0] ** 2))
    with pytest.raises(ExperimentError):
        evaluate_subjects(lambda s: np.zeros(5), [], "Talk", "L")


def _metadata_r2(effect, n=300):
    spec = SyntheticSpec(n_participants=n, n_sessions=n // 2, metadata_effect=effect, tasks=("Talk",))
    profiles = list(generate_synthetic(spec, seed=2).profiles.values())
    x = np.array([[1.0, p.age, p.gender == "M"] + [p.culture_region == c for c in range(5)] for p in profiles],
                 dtype=np.float64)
    y = np.array([p.personality for p in profiles])
    resid = y - x @ np.linalg.lstsq(x, y, rcond=None)[0]
    return 1.0 - resid.var(axis=0) / y.var(axis=0)


def test_metadata_effect_controls_label_dependence():
    assert np.all(_metadata_r2(0.0) < 0.1)
    assert np.mean(_metadata_r2(1.0)) > 0.3


def test_synthetic_corpus_is_byte_identical(tmp_path):
    spec = SyntheticSpec(n_participants=6, n_sessions=3, frame_count=64, tasks=("Talk",))
    a = write_corpus(generate_synthetic(spec, seed=4), tmp_path / "a")
    b = write_corpus(generate_synthetic(spec, seed=4), tmp_path / "b")
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files_a == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files_a)
    manifest = json.loads((a / "manifest.json").read_text())
    referenced = {"manifest.json", "labels.csv"}
    for s in manifest["sessions"]:
        for t in s["tasks"]:
            referenced |= set(t["video"]) | set(t["detections"]) | {t["audio"]}
    assert referenced == {str(f) for f in files_a}


def test_disk_corpus_round_trip(tmp_path):
    spec = SyntheticSpec(n_participants=4, n_sessions=2, frame_count=64, tasks=("Talk",))
    mem = generate_synthetic(spec, seed=1)
    disk = load_corpus(write_corpus(mem, tmp_path))
    sid = mem.sessions[0].session_id
    assert disk.video(sid, "Talk", 1).frames.tobytes() == mem.video(sid, "Talk", 1).frames.tobytes()
    np.testing.assert_array_equal(disk.audio(sid, "Talk"), mem.audio(sid, "Talk"))
    disk_boxes, mem_boxes = (c.detections(sid, "Talk", 0).detections() for c in (disk, mem))
    assert [b.frame for b in disk_boxes] == [b.frame for b in mem_boxes]
    assert np.allclose([b.coords for b in disk_boxes], [b.coords for b in mem_boxes], atol=1e-6)
    assert {k: tuple(v) for k, v in disk.labels().items()} == {k: tuple(v) for k, v in mem.labels().items()}
    assert [r.session_id for r in disk.split_records()] == [r.session_id for r in mem.split_records()]


def test_partition_and_empty_split_error():
    samples = [label_sample("a", [0] * 5, "S1"), label_sample("b", [0] * 5, "S2")]
    parts = partition(samples, {"S1": "train", "S2": "removed"})
    assert [len(parts[s]) for s in ("train", "val", "test")] == [1, 0, 0]
    cfg = ExperimentConfig.from_dict(TINY)
    with pytest.raises(ExperimentError, match="no samples"):
        prepare_data(cfg, samples=samples, splits={"S1": "train", "S2": "val"}, corpus=object())


def test_config_round_trip():
    cfg = desk_config()
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert replace(cfg, scenario="B").scenario == "B"
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="LLL")


def test_report_columns_and_table():
    reports = [MetricsReport("Talk", s, dict(zip(TRAITS, np.arange(5.0) + k))) for k, s in enumerate(("B", "L"))]
    assert REPORT_COLUMNS == ("O", "C", "E", "A", "N", "Avg")
    rows = list(csv.reader(ablation_table(reports).splitlines()))
    assert rows[0] == ["scenario"] + [f"Talk_{c}" for c in REPORT_COLUMNS]
    assert rows[2] == ["L", "1.000000", "2.000000", "3.000000", "4.000000", "5.000000", "3.000000"]


def test_cli_errors_exit_with_code_2(tmp_path, capsys):
    assert main(["eval", "--corpus-dir", str(tmp_path / "nowhere")]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["train"]) == 2


def test_cli_ablate_writes_every_scenario(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["ablate", "--config", str(cfg), "--out-dir", str(tmp_path / "out")]) == 0
    rows = list(csv.reader(open(tmp_path / "out" / "ablation.csv")))
    assert [r[0] for r in rows[1:]] == ["B", "L", "Lm", "LE", "LEm", "LEa", "LEam"]
    assert all(len(r) == 7 for r in rows)


def test_cli_split_track_chunk(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    common = ["--config", str(cfg)]
    assert main(["split", *common, "--out-dir", str(tmp_path / "split")]) == 0
    counts = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert counts["train"] + counts["val"] + counts["test"] + counts["removed"] == 12
    assert (tmp_path / "split" / "splits.csv").exists()

    corpus = write_corpus(generate_synthetic(ExperimentConfig.from_dict(TINY).synthetic, 0), tmp_path / "corpus")
    manifest = json.loads((corpus / "manifest.json").read_text())
    session = manifest["sessions"][0]
    det = corpus / session["tasks"][0]["detections"][0]
    w, h = manifest["frame_size"][1], manifest["frame_size"][0]
    assert main(["track", str(det), "--frame-size", str(w), str(h), "--frame-count", "128",
                 "-o", str(tmp_path / "track.csv")]) == 0
    assert (tmp_path / "track.csv").exists()
    assert main(["chunk", *common, "--corpus-dir", str(corpus), "--session", session["session_id"],
                 "--max-chunks", "1", "--out-dir", str(tmp_path / "chunks")]) == 0
    assert len(list((tmp_path / "chunks").glob("*.bin"))) == 4
