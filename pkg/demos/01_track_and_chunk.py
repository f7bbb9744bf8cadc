"""From raw session media to model inputs for one participant.

A synthetic session stands in for real recordings. We find the seated
participant among transient faces, follow them through the video, cut the
stream into 64-frame chunks and look at what the frozen backbones make of
the first one.
"""
import numpy as np

from dyadic_context.backbones import Backbones
from dyadic_context.chunking import ChunkBundle, extract_audio, extract_chunk, plan_chunks
from dyadic_context.corpus import SyntheticSpec, generate_synthetic
from dyadic_context.model import extract_features
from dyadic_context.tracking import identify_target, track_target

corpus = generate_synthetic(SyntheticSpec(n_participants=4, n_sessions=2, tasks=("Talk",)), seed=0)
session = corpus.sessions[0]
sid = session.session_id

# Detections include short-lived distractors; the target is the face that stays put.
stream = corpus.detections(sid, "Talk", 0)
target = identify_target(stream)
track = track_target(stream, target)
print(f"{len(stream.detections())} detections over {stream.frame_count} frames, "
      f"detection ratio {stream.detection_ratio():.2f}")
print(f"target first seen at frame {target.frame}; track covers {len(track)} frames")

video = corpus.video(sid, "Talk", 0)
other = corpus.video(sid, "Talk", 1)
ranges = plan_chunks(video.frame_count)
print(f"{video.frame_count} frames -> {len(ranges)} chunks of 64 frames, 32 kept per chunk")

first = ranges[0]
bundle = ChunkBundle(
    face=extract_chunk(video, first, track),
    local=extract_chunk(video, first),
    extended=extract_chunk(other, first),
    audio=extract_audio(corpus.audio(sid, "Talk"), 0, corpus.fps),
    chunk_index=0,
    source_frame_range=first,
)
print("face crop", bundle.face.shape, "audio window", bundle.audio.shape)

feats = extract_features(bundle, Backbones.from_seed(1234, spatial=4))
for name in ("face", "local", "extended", "audio"):
    arr = getattr(feats, name)
    print(f"{name:>8}: shape {arr.shape}, mean {np.mean(arr):+.3f}")
