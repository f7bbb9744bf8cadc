"""Command-line entry points: gen-synthetic, split, track, chunk, train, eval, ablate.

Every subcommand takes an optional ``--config`` JSON file holding an
``ExperimentConfig``; explicit flags override the file.  Errors exit with
status 2 and a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .backbones import Backbones
from .chunking import (ChunkBundle, extract_audio, extract_chunk, normalize_pixels, plan_chunks,
                       write_audio, write_raw_tensor)
from .corpus import CorpusError, generate_synthetic, load_corpus, write_corpus
from .harness import (ExperimentConfig, ExperimentError, ablation_suite, ablation_table, evaluate_model,
                      face_track, format_table, mean_value_baseline, participant_labels, evaluate_subjects,
                      prepare_data, run_dir_for, train_scenario, write_metrics)
from .model import DyadicTransformer, load_checkpoint
from .splits import greedy_optimize, write_assignment, write_balance_report
from .tracking import identify_target, read_detections, track_target, write_boxes

log = logging.getLogger("dyadic_context")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for key in ("seed", "task", "scenario", "out_dir", "corpus_dir", "splits_path"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return replace(cfg, **overrides)


def _corpus(cfg: ExperimentConfig):
    return load_corpus(cfg.corpus_dir) if cfg.corpus_dir else generate_synthetic(cfg.synthetic, cfg.seed)


def _out_dir(cfg: ExperimentConfig) -> Path:
    if not cfg.out_dir:
        raise ExperimentError("--out-dir is required")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synthetic(args) -> None:
    cfg = _config(args)
    out = write_corpus(generate_synthetic(cfg.synthetic, cfg.seed), _out_dir(cfg))
    print(out / "manifest.json")


def cmd_split(args) -> None:
    cfg = _config(args)
    out = _out_dir(cfg)
    records = _corpus(cfg).split_records(cfg.split.age_edges)
    result = greedy_optimize(records, cfg.split, seed=cfg.seed)
    write_assignment(out / "splits.csv", result)
    write_balance_report(out, result.labels, records, cfg.split)
    for msg in result.diagnostics:
        print(f"warning: {msg}", file=sys.stderr)
    counts = {s: len(result.sessions(s)) for s in ("train", "val", "test", "removed")}
    print(json.dumps({"cost": result.costs.total, **counts}))


def cmd_track(args) -> None:
    stream = read_detections(args.detections, tuple(args.frame_size), args.frame_count)
    track = track_target(stream, identify_target(stream))
    write_boxes(args.output, track.boxes)
    print(f"{len(track)} boxes, detection ratio {stream.detection_ratio():.3f}")


def cmd_chunk(args) -> None:
    cfg = _config(args)
    out = _out_dir(cfg)
    corpus = _corpus(cfg)
    session = corpus.session(args.session)
    seat, other = args.seat, 1 - args.seat
    video, ext = corpus.video(session.session_id, cfg.task, seat), corpus.video(session.session_id, cfg.task, other)
    track = face_track(corpus, session.session_id, cfg.task, seat)
    audio = corpus.audio(session.session_id, cfg.task)
    ranges = plan_chunks(min(video.frame_count, ext.frame_count))[: args.max_chunks]
    for k, rng_ in enumerate(ranges):
        bundle = ChunkBundle(extract_chunk(video, rng_, track), extract_chunk(video, rng_),
                             extract_chunk(ext, rng_), extract_audio(audio, k, corpus.fps), k, rng_)
        stem = f"{session.session_id}_{cfg.task}_seat{seat}_chunk{k:04d}"
        for name in ("face", "local", "extended"):
            write_raw_tensor(out / f"{stem}_{name}.bin", normalize_pixels(getattr(bundle, name), cfg.stats))
        write_audio(out / f"{stem}_audio.bin", bundle.audio)
    print(f"{len(ranges)} chunks written to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    _out_dir(cfg)
    if cfg.scenario == "B":
        raise ExperimentError("scenario B has no trainable model; use 'eval'")
    train_scenario(cfg, prepare_data(cfg))
    print(run_dir_for(cfg) / "best.npz")


def cmd_eval(args) -> None:
    cfg = _config(args)
    parts = prepare_data(cfg)
    if cfg.scenario == "B":
        report = evaluate_subjects(mean_value_baseline(list(participant_labels(parts["train"]).values())),
                                   parts["test"], cfg.task, "B")
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else (run_dir_for(cfg) or Path(".")) / "best.npz"
        if not ckpt.exists():
            raise ExperimentError(f"missing checkpoint {ckpt}")
        model_cfg, state = load_checkpoint(ckpt)
        model = DyadicTransformer(model_cfg)
        model.load_state_dict(state)
        report = evaluate_model(model, parts["test"], cfg.task)
    if cfg.out_dir:
        out = _out_dir(cfg) / f"{cfg.task}_{report.scenario}"
        out.mkdir(exist_ok=True)
        write_metrics(out / "metrics.json", report)
    print(format_table([report]))


def cmd_ablate(args) -> None:
    cfg = _config(args)
    out = _out_dir(cfg)
    reports = ablation_suite(cfg, tasks=args.tasks or [cfg.task])
    (out / "ablation.csv").write_text(ablation_table(reports))
    print(format_table(reports))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyadic-context", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--task")
        p.add_argument("--scenario")
        p.add_argument("--out-dir")
        p.add_argument("--corpus-dir", help="on-disk corpus; a synthetic one is generated otherwise")
        p.add_argument("--splits", dest="splits_path", help="session,split CSV from 'split'")
        p.set_defaults(func=func)
        return p

    add("gen-synthetic", cmd_gen_synthetic, "write a synthetic corpus to --out-dir")
    add("split", cmd_split, "optimise a train/val/test session split")
    p = add("track", cmd_track, "identify and track the target face in a detection file")
    p.add_argument("detections")
    p.add_argument("--frame-size", type=int, nargs=2, metavar=("W", "H"), required=True)
    p.add_argument("--frame-count", type=int)
    p.add_argument("-o", "--output", required=True)
    p = add("chunk", cmd_chunk, "cut one seat of one session into normalised chunk tensors")
    p.add_argument("--session", required=True)
    p.add_argument("--seat", type=int, choices=(0, 1), default=0)
    p.add_argument("--max-chunks", type=int)
    add("train", cmd_train, "train one scenario and keep the selected checkpoint")
    p = add("eval", cmd_eval, "test-set MSE per trait for a checkpoint (or baseline B)")
    p.add_argument("--checkpoint")
    p = add("ablate", cmd_ablate, "all scenarios for the given tasks; writes ablation.csv")
    p.add_argument("--tasks", nargs="+")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ExperimentError, CorpusError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
