"""Experiment driver: features, splits, scenario training/evaluation, baseline, ablation table."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbones import Backbones
from .chunking import (DEFAULT_STATS, ChunkBundle, NormalizationStats, extract_audio, extract_chunk,
                       plan_chunks, subsample_uniform)
from .corpus import Corpus, SyntheticSpec, generate_synthetic, load_corpus
from .metadata import TRAITS, encode_dyad
from .model import SCENARIOS, DyadicTransformer, ModelConfig, aggregate_subject, extract_features
from .splits import SplitConfig, greedy_optimize, read_assignment
from .tensor import no_grad
from .tracking import identify_target, track_target
from .training import Sample, TrainConfig, train

log = logging.getLogger(__name__)

REPORT_COLUMNS = TRAITS + ("Avg",)


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "Talk"
    scenario: str = "LEam"
    seed: int = 0
    backbone_seed: int = 1234
    corpus_dir: str | None = None
    splits_path: str | None = None
    out_dir: str | None = None
    max_chunks: int = 120
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    stats: NormalizationStats = DEFAULT_STATS

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["synthetic"] = asdict(self.synthetic)
        d["model"] = self.model.to_dict()
        d["train"] = asdict(self.train)
        d["split"] = asdict(self.split)
        d["stats"] = asdict(self.stats)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "synthetic" in d:
            syn = dict(d["synthetic"])
            for key in ("tasks", "frame_size"):
                if key in syn:
                    syn[key] = tuple(syn[key])
            d["synthetic"] = SyntheticSpec(**syn)
        if "model" in d:
            d["model"] = ModelConfig.from_dict({**ModelConfig().to_dict(), **d["model"]})
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "split" in d:
            sp = dict(d["split"])
            for key in ("target_ratios", "age_edges"):
                if key in sp:
                    sp[key] = tuple(sp[key])
            d["split"] = SplitConfig(**sp)
        if "stats" in d:
            d["stats"] = NormalizationStats(tuple(d["stats"]["mean"]), tuple(d["stats"]["std"]))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_config(**overrides) -> ExperimentConfig:
    """Reduced-geometry settings that finish the full ablation on a laptop CPU."""
    cfg = ExperimentConfig(
        synthetic=SyntheticSpec(n_participants=80, n_sessions=40),
        model=ModelConfig(spatial=4, seed=0),
        train=TrainConfig(epochs=4, lr=1e-3, seed=0),
        # equal weights let the correlation terms starve the training split on 40 sessions
        split=SplitConfig(target_ratios=(0.6, 0.2, 0.2), weights={**SplitConfig().weights, "retention": 10.0}),
        max_chunks=120,
    )
    return replace(cfg, **overrides)


@dataclass
class MetricsReport:
    task: str
    scenario: str
    mse: dict[str, float]

    @property
    def average(self) -> float:
        return float(np.mean([self.mse[t] for t in TRAITS]))

    def row(self) -> list[float]:
        return [self.mse[t] for t in TRAITS] + [self.average]


# -- data preparation -----------------------------------------------------------------

def face_track(corpus: Corpus, sid: str, task: str, seat: int):
    stream = corpus.detections(sid, task, seat)
    return track_target(stream, identify_target(stream))


def build_samples(corpus: Corpus, task: str, backbones: Backbones,
                  stats: NormalizationStats = DEFAULT_STATS, max_chunks: int = 120) -> list[Sample]:
    """Backbone features of every (session, target seat, chunk), with metadata and labels."""
    samples = []
    for s in corpus.sessions:
        audio = corpus.audio(s.session_id, task)
        videos = [corpus.video(s.session_id, task, seat) for seat in (0, 1)]
        for seat in (0, 1):
            other = 1 - seat
            pid, oid = s.participants[seat], s.participants[other]
            track = face_track(corpus, s.session_id, task, seat)
            meta = encode_dyad(corpus.profiles[pid], s.state(pid, task),
                               corpus.profiles[oid], s.state(oid, task))
            label = np.asarray(corpus.profiles[pid].personality, dtype=np.float64)
            ranges = plan_chunks(min(videos[seat].frame_count, videos[other].frame_count))
            for k, rng_ in subsample_uniform(list(enumerate(ranges)), max_chunks):
                bundle = ChunkBundle(
                    extract_chunk(videos[seat], rng_, track),
                    extract_chunk(videos[seat], rng_),
                    extract_chunk(videos[other], rng_),
                    extract_audio(audio, k, corpus.fps),
                    k, rng_)
                feats = extract_features(bundle, backbones, None, stats)
                samples.append(Sample(feats, meta, label, pid, s.session_id))
    return samples


def resolve_splits(cfg: ExperimentConfig, corpus: Corpus) -> dict[str, str]:
    if cfg.splits_path:
        path = Path(cfg.splits_path)
        if not path.exists():
            raise ExperimentError(f"missing split file {path}")
        labels = read_assignment(path)
        missing = {s.session_id for s in corpus.sessions} - set(labels)
        if missing:
            raise ExperimentError(f"split file lacks sessions {sorted(missing)}")
        return labels
    result = greedy_optimize(corpus.split_records(cfg.split.age_edges), cfg.split, seed=cfg.seed)
    for msg in result.diagnostics:
        log.warning("split: %s", msg)
    return result.labels


def partition(samples: Sequence[Sample], labels: dict[str, str]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    for smp in samples:
        lab = labels[smp.session_id]
        if lab in out:
            out[lab].append(smp)
    return out


# -- evaluation ------------------------------------------------------------------------

@dataclass
class MeanValueBaseline:
    means: np.ndarray

    def __call__(self, *_args) -> np.ndarray:
        return self.means.copy()


def mean_value_baseline(train_labels) -> MeanValueBaseline:
    labels = np.atleast_2d(np.asarray(train_labels, dtype=np.float64))
    if labels.size == 0:
        raise ExperimentError("no training labels for the baseline")
    return MeanValueBaseline(labels.mean(axis=0))


def participant_labels(samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    return {s.participant_id: s.label for s in samples}


def evaluate_subjects(predict: Callable[[Sample], np.ndarray], samples: Sequence[Sample],
                      task: str, scenario: str) -> MetricsReport:
    """Median-aggregate chunk predictions per participant, then per-trait MSE."""
    if not samples:
        raise ExperimentError("empty test set")
    per: dict[str, list[np.ndarray]] = {}
    for s in samples:
        per.setdefault(s.participant_id, []).append(predict(s))
    labels = participant_labels(samples)
    errs = np.stack([(aggregate_subject(preds) - labels[pid]) ** 2 for pid, preds in per.items()])
    return MetricsReport(task, scenario, dict(zip(TRAITS, map(float, errs.mean(axis=0)))))


def prepare_data(cfg: ExperimentConfig, corpus: Corpus | None = None,
                 samples: Sequence[Sample] | None = None,
                 splits: dict[str, str] | None = None) -> dict[str, list[Sample]]:
    """Corpus, split and backbone features for ``cfg.task``, partitioned by split."""
    if corpus is None:
        corpus = load_corpus(cfg.corpus_dir) if cfg.corpus_dir else generate_synthetic(cfg.synthetic, cfg.seed)
    if splits is None:
        splits = resolve_splits(cfg, corpus)
    if samples is None:
        backbones = Backbones.from_seed(cfg.backbone_seed, cfg.model.spatial)
        samples = build_samples(corpus, cfg.task, backbones, cfg.stats, cfg.max_chunks)
    parts = partition(samples, splits)
    for name, subset in parts.items():
        if not subset:
            raise ExperimentError(f"split '{name}' has no samples")
    return parts


def run_dir_for(cfg: ExperimentConfig) -> Path | None:
    return Path(cfg.out_dir) / f"{cfg.task}_{cfg.scenario}" if cfg.out_dir else None


def train_scenario(cfg: ExperimentConfig, parts: dict[str, list[Sample]]) -> DyadicTransformer:
    """Train one scenario model and load its selected checkpoint."""
    model = DyadicTransformer(cfg.model.with_scenario(cfg.scenario))
    result = train(model, parts["train"], parts["val"], cfg.train, run_dir_for(cfg))
    model.load_state_dict(result.best_state)
    return model


def evaluate_model(model: DyadicTransformer, samples: Sequence[Sample], task: str) -> MetricsReport:
    def predict(s: Sample) -> np.ndarray:
        with no_grad():
            return model.forward(s.features, s.meta).data

    return evaluate_subjects(predict, samples, task, model.cfg.scenario.name)


def write_metrics(path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(
        {"task": report.task, "scenario": report.scenario, **report.mse, "Avg": report.average}, indent=2))


def run_scenario(cfg: ExperimentConfig, corpus: Corpus | None = None,
                 samples: Sequence[Sample] | None = None,
                 splits: dict[str, str] | None = None) -> MetricsReport:
    """Train (or fit the baseline) for one scenario/task and report test MSE per trait."""
    parts = prepare_data(cfg, corpus, samples, splits)
    if cfg.scenario == "B":
        baseline = mean_value_baseline(list(participant_labels(parts["train"]).values()))
        return evaluate_subjects(baseline, parts["test"], cfg.task, "B")
    model = train_scenario(cfg, parts)
    report = evaluate_model(model, parts["test"], cfg.task)
    run_dir = run_dir_for(cfg)
    if run_dir is not None:
        write_metrics(run_dir / "metrics.json", report)
    return report


def ablation_suite(base: ExperimentConfig, tasks: Sequence[str] = ("Talk",),
                   scenarios: Sequence[str] = SCENARIOS) -> list[MetricsReport]:
    """Every scenario for every task on one corpus and one split."""
    corpus = load_corpus(base.corpus_dir) if base.corpus_dir else generate_synthetic(
        replace(base.synthetic, tasks=tuple(tasks)), base.seed)
    splits = resolve_splits(base, corpus)
    backbones = Backbones.from_seed(base.backbone_seed, base.model.spatial)
    reports = []
    for task in tasks:
        samples = build_samples(corpus, task, backbones, base.stats, base.max_chunks)
        for scen in scenarios:
            cfg = replace(base, task=task, scenario=scen)
            reports.append(run_scenario(cfg, corpus, samples, splits))
            log.info("%s %s avg=%.4f", task, scen, reports[-1].average)
    return reports


def ablation_table(reports: Sequence[MetricsReport]) -> str:
    """Scenario rows x (task, trait) columns, as CSV text."""
    tasks = list(dict.fromkeys(r.task for r in reports))
    scenarios = list(dict.fromkeys(r.scenario for r in reports))
    lookup = {(r.task, r.scenario): r for r in reports}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario"] + [f"{t}_{c}" for t in tasks for c in REPORT_COLUMNS])
    for scen in scenarios:
        row = [scen]
        for t in tasks:
            row += [f"{v:.6f}" for v in lookup[(t, scen)].row()]
        w.writerow(row)
    return buf.getvalue()


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Fixed-width text rendering for terminals."""
    lines = [f"{'task':<8}{'scen':<6}" + "".join(f"{c:>8}" for c in REPORT_COLUMNS)]
    for r in reports:
        lines.append(f"{r.task:<8}{r.scenario:<6}" + "".join(f"{v:8.3f}" for v in r.row()))
    return "\n".join(lines)
