"""Dyadic session corpora: the synthetic generator and the on-disk manifest format.

On disk a corpus is::

    manifest.json            participants, sessions, per-task media paths
    labels.csv               participant_id,O,C,E,A,N  (z-scores)
    video/<sid>_<task>_<seat>.bin   raw tensor (L,H,W,3)
    detections/<sid>_<task>_<seat>.txt
    audio/<sid>_<task>.bin   raw audio, 44.1 kHz
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .chunking import AUDIO_RATE, DEFAULT_FPS, VideoStream, read_audio, read_raw_tensor, write_audio, write_raw_tensor
from .metadata import MOODS, TRAITS, ParticipantProfile, SessionState
from .splits import ParticipantStats, SessionRecord, age_group
from .tracking import BoundingBox, DetectionStream, read_detections, write_boxes

TASKS = ("Talk", "Lego", "Animals", "Ghost")
TASKS_WITH_DIFFICULTY = ("Lego", "Animals", "Ghost")


class CorpusError(ValueError):
    pass


@dataclass
class TaskInfo:
    task: str
    order: int
    difficulty: int
    video: tuple[str, str] = ("", "")
    detections: tuple[str, str] = ("", "")
    audio: str = ""


@dataclass
class SessionInfo:
    session_id: str
    participants: tuple[str, str]
    relationship_known: str
    states: dict[str, dict]  # participant id -> {session_index, pre_mood, pre_fatigue}
    tasks: list[TaskInfo]

    def task(self, name: str) -> TaskInfo:
        for t in self.tasks:
            if t.task == name:
                return t
        raise CorpusError(f"session {self.session_id} has no task {name!r}")

    def state(self, pid: str, task: str) -> SessionState:
        st = self.states[pid]
        t = self.task(task)
        return SessionState(st["session_index"], st["pre_mood"], st["pre_fatigue"],
                            t.order, t.difficulty, self.relationship_known)


class Corpus:
    """Participants, sessions and lazily loaded media."""

    def __init__(self, profiles: dict[str, ParticipantProfile], sessions: list[SessionInfo],
                 fps: float = DEFAULT_FPS, frame_size: tuple[int, int] = (32, 48)):
        self.profiles = profiles
        self.sessions = sessions
        self.fps = fps
        self.frame_size = frame_size

    def session(self, sid: str) -> SessionInfo:
        for s in self.sessions:
            if s.session_id == sid:
                return s
        raise CorpusError(f"unknown session {sid!r}")

    def labels(self) -> dict[str, np.ndarray]:
        return {pid: np.asarray(p.personality, dtype=np.float64) for pid, p in self.profiles.items()}

    def video(self, sid: str, task: str, seat: int) -> VideoStream:
        raise NotImplementedError

    def detections(self, sid: str, task: str, seat: int) -> DetectionStream:
        raise NotImplementedError

    def audio(self, sid: str, task: str) -> np.ndarray:
        raise NotImplementedError

    def split_records(self, age_edges=(25.0, 35.0, 50.0)) -> list[SessionRecord]:
        out = []
        for s in self.sessions:
            stats = tuple(
                ParticipantStats(pid, self.profiles[pid].age, int(self.profiles[pid].gender == "M"),
                                 tuple(float(v) for v in self.profiles[pid].personality))
                for pid in s.participants)
            genders = "".join(sorted(self.profiles[p].gender for p in s.participants))
            ages = "".join(sorted(str(age_group(self.profiles[p].age, age_edges)) for p in s.participants))
            out.append(SessionRecord(s.session_id, stats, f"{genders}-{ages}-{s.relationship_known}"))
        return out


# -- synthetic generation ------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_participants: int = 40
    n_sessions: int = 30
    tasks: tuple[str, ...] = ("Talk",)
    frame_count: int = 128
    frame_size: tuple[int, int] = (32, 48)  # (H, W)
    metadata_effect: float = 1.0
    audio_effect: float = 1.0
    video_effect: float = 0.5
    noise: float = 1.0
    detection_rate: float = 0.9
    distractor_rate: float = 0.05

    def __post_init__(self):
        for name in ("metadata_effect", "audio_effect", "video_effect", "noise"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.n_participants < 2 or self.n_sessions < 1:
            raise ValueError("need at least 2 participants and 1 session")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")


SEAT_BACKGROUND = (np.array([60.0, 90.0, 140.0]), np.array([140.0, 90.0, 60.0]))
SEAT_TONE_HZ = (300.0, 1200.0)
FACE_BASE = np.array([170.0, 130.0, 110.0])


def _stable_features(age: float, gender: str, culture: int) -> np.ndarray:
    onehot = np.zeros(6)
    onehot[culture] = 1.0
    return np.concatenate([[(age - 17.0) / 58.0, float(gender == "M")], onehot])


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


class SyntheticCorpus(Corpus):
    """Deterministic corpus whose labels are planted in metadata, face appearance and voice.

    Each participant's OCEAN vector mixes a component predictable from the
    stable metadata (age, gender, culture), a face-brightness latent and a
    voice-loudness latent, plus noise, each scaled by its effect size.
    """

    def __init__(self, spec: SyntheticSpec, seed: int):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng([seed, 0])
        n = spec.n_participants
        ages = rng.integers(17, 76, n).astype(float)
        genders = rng.choice(["F", "M"], n)
        cultures = rng.integers(0, 6, n)
        self.face_latent = rng.standard_normal(n)
        self.voice_latent = rng.standard_normal(n)
        mix = rng.standard_normal((5, 8))
        meta_signal = _standardize(_standardize(np.stack([
            _stable_features(a, g, c) for a, g, c in zip(ages, genders, cultures)])) @ mix.T)
        signs_v = rng.choice([-1.0, 1.0], 5)
        signs_a = rng.choice([-1.0, 1.0], 5)
        noise = rng.standard_normal((n, 5))
        raw = (spec.metadata_effect * meta_signal
               + spec.video_effect * np.outer(self.face_latent, signs_v)
               + spec.audio_effect * np.outer(self.voice_latent, signs_a)
               + spec.noise * noise)
        scale = np.sqrt(spec.metadata_effect ** 2 + spec.video_effect ** 2 + spec.audio_effect ** 2
                        + spec.noise ** 2) or 1.0
        labels = raw / scale
        pids = [f"P{i:03d}" for i in range(n)]
        self.index = {pid: i for i, pid in enumerate(pids)}
        profiles = {
            pid: ParticipantProfile(pid, float(ages[i]), str(genders[i]), int(cultures[i]),
                                    tuple(float(v) for v in labels[i]))
            for i, pid in enumerate(pids)}

        # every participant gets at least one session, remaining sessions pair at random
        order = list(rng.permutation(n))
        pairs = [(order[i], order[i + 1]) for i in range(0, n - 1, 2)]
        while len(pairs) < spec.n_sessions:
            a, b = rng.choice(n, 2, replace=False)
            pairs.append((int(a), int(b)))
        pairs = pairs[:spec.n_sessions]
        counts: dict[str, int] = {}
        sessions = []
        for k, (a, b) in enumerate(pairs):
            sid = f"S{k:03d}"
            members = (pids[a], pids[b])
            states = {}
            for pid in members:
                counts[pid] = min(counts.get(pid, 0) + 1, 5)
                fatigue = None if rng.random() < 0.1 else float(rng.integers(0, 11))
                states[pid] = {"session_index": counts[pid],
                               "pre_mood": [float(v) for v in rng.integers(1, 6, len(MOODS))],
                               "pre_fatigue": fatigue}
            task_order = rng.permutation(len(TASKS)) + 1
            tasks = []
            for t_idx, task in enumerate(TASKS):
                if task not in spec.tasks:
                    continue
                diff = int(rng.integers(1, 4)) if task in TASKS_WITH_DIFFICULTY else 0
                stem = f"{sid}_{task}"
                tasks.append(TaskInfo(task, int(task_order[t_idx]), diff,
                                      (f"video/{stem}_0.bin", f"video/{stem}_1.bin"),
                                      (f"detections/{stem}_0.txt", f"detections/{stem}_1.txt"),
                                      f"audio/{stem}.bin"))
            rel = "Y" if rng.random() < 0.3 else "N"
            sessions.append(SessionInfo(sid, members, rel, states, tasks))
        super().__init__(profiles, sessions, DEFAULT_FPS, tuple(spec.frame_size))

    def _rng(self, sid: str, task: str, seat: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 1, int(sid[1:]), TASKS.index(task), seat, stream])

    def _face_track(self, sid: str, task: str, seat: int) -> list[tuple[float, float, float, float]]:
        h, w = self.spec.frame_size
        rng = self._rng(sid, task, seat, 0)
        size = min(h, w) * 0.45
        cx = w * (0.35 if seat == 0 else 0.65)
        cy = h * 0.45
        boxes = []
        for _ in range(self.spec.frame_count):
            jx, jy = rng.normal(0, 0.4, 2)
            x1 = float(np.clip(cx - size / 2 + jx, 0, w - size))
            y1 = float(np.clip(cy - size / 2 + jy, 0, h - size))
            boxes.append((x1, y1, x1 + size, y1 + size))
        return boxes

    def _distractors(self, sid: str, task: str, seat: int) -> dict[int, tuple[float, float, float, float]]:
        h, w = self.spec.frame_size
        rng = self._rng(sid, task, seat, 1)
        size = min(h, w) * 0.3
        out = {}
        for f in range(self.spec.frame_count):
            if rng.random() < self.spec.distractor_rate:
                x1 = float(rng.uniform(0, w - size))
                y1 = float(rng.uniform(0, h - size))
                out[f] = (x1, y1, x1 + size, y1 + size)
        return out

    def video(self, sid: str, task: str, seat: int) -> VideoStream:
        s = self.session(sid)
        pid = s.participants[seat]
        h, w = self.spec.frame_size
        rng = self._rng(sid, task, seat, 2)
        face = np.clip(FACE_BASE + 35.0 * np.tanh(self.face_latent[self.index[pid]]), 0, 255)
        frames = np.empty((self.spec.frame_count, h, w, 3))
        frames[:] = SEAT_BACKGROUND[seat]
        frames += rng.normal(0, 4.0, frames.shape)
        yy, xx = np.mgrid[0:h, 0:w]
        distractors = self._distractors(sid, task, seat)
        for f, (x1, y1, x2, y2) in enumerate(self._face_track(sid, task, seat)):
            mask = (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
            frames[f][mask] = face + rng.normal(0, 3.0, (int(mask.sum()), 3))
            if f in distractors:
                dx1, dy1, dx2, dy2 = distractors[f]
                dmask = (xx >= dx1) & (xx < dx2) & (yy >= dy1) & (yy < dy2)
                frames[f][dmask] = FACE_BASE
        return VideoStream(np.clip(frames, 0, 255), self.fps)

    def detections(self, sid: str, task: str, seat: int) -> DetectionStream:
        h, w = self.spec.frame_size
        rng = self._rng(sid, task, seat, 3)
        distractors = self._distractors(sid, task, seat)
        boxes = []
        for f, box in enumerate(self._face_track(sid, task, seat)):
            if rng.random() < self.spec.detection_rate:
                boxes.append(BoundingBox(f, *box))
            if f in distractors:
                boxes.append(BoundingBox(f, *distractors[f]))
        return DetectionStream.from_boxes(boxes, self.spec.frame_count, (w, h))

    def audio(self, sid: str, task: str) -> np.ndarray:
        s = self.session(sid)
        rng = self._rng(sid, task, 0, 4)
        n = int(round(self.spec.frame_count / self.fps * AUDIO_RATE))
        t = np.arange(n) / AUDIO_RATE
        out = rng.normal(0, 0.01, n)
        for seat, pid in enumerate(s.participants):
            amp = 0.1 * np.exp(0.5 * self.voice_latent[self.index[pid]])
            out += amp * np.sin(2 * np.pi * SEAT_TONE_HZ[seat] * t)
        return out


def generate_synthetic(spec: SyntheticSpec | None = None, seed: int = 0) -> SyntheticCorpus:
    return SyntheticCorpus(spec or SyntheticSpec(), seed)


# -- disk format -----------------------------------------------------------------------

class DiskCorpus(Corpus):
    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise CorpusError(f"missing manifest {manifest_path}")
        m = json.loads(manifest_path.read_text())
        labels = {}
        labels_path = self.root / m.get("labels", "labels.csv")
        if labels_path.exists():
            with open(labels_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    labels[row["participant_id"]] = tuple(float(row[t]) for t in TRAITS)
        profiles = {
            p["participant_id"]: ParticipantProfile(p["participant_id"], p["age"], p["gender"],
                                                    p["culture_region"], labels.get(p["participant_id"], (0.0,) * 5))
            for p in m["participants"]}
        sessions = [
            SessionInfo(s["session_id"], tuple(s["participants"]), s["relationship_known"], s["states"],
                        [TaskInfo(t["task"], t["order"], t["difficulty"], tuple(t["video"]),
                                  tuple(t["detections"]), t["audio"]) for t in s["tasks"]])
            for s in m["sessions"]]
        super().__init__(profiles, sessions, m.get("fps", DEFAULT_FPS), tuple(m["frame_size"]))

    def _path(self, rel: str) -> Path:
        path = self.root / rel
        if not path.exists():
            raise CorpusError(f"missing media file {path}")
        return path

    def video(self, sid, task, seat):
        return VideoStream(read_raw_tensor(self._path(self.session(sid).task(task).video[seat])), self.fps)

    def detections(self, sid, task, seat):
        info = self.session(sid).task(task)
        n_frames = read_raw_tensor_header(self._path(info.video[seat]))[0]
        h, w = self.frame_size
        return read_detections(self._path(info.detections[seat]), (w, h), n_frames)

    def audio(self, sid, task):
        samples, rate = read_audio(self._path(self.session(sid).task(task).audio))
        if rate != AUDIO_RATE:
            raise CorpusError(f"audio for {sid}/{task} sampled at {rate} Hz, expected {AUDIO_RATE}")
        return samples


def read_raw_tensor_header(path) -> tuple[int, int, int, int]:
    with open(path, "rb") as fh:
        return struct.unpack("<4I", fh.read(16))


def load_corpus(root) -> DiskCorpus:
    return DiskCorpus(root)


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Materialise every media file plus ``manifest.json`` and ``labels.csv``."""
    out = Path(out_dir)
    for sub in ("video", "detections", "audio"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for s in corpus.sessions:
        for t in s.tasks:
            for seat in (0, 1):
                write_raw_tensor(out / t.video[seat], corpus.video(s.session_id, t.task, seat).frames)
                write_boxes(out / t.detections[seat], corpus.detections(s.session_id, t.task, seat).detections())
            write_audio(out / t.audio, corpus.audio(s.session_id, t.task))
    manifest = {
        "fps": corpus.fps,
        "frame_size": list(corpus.frame_size),
        "labels": "labels.csv",
        "participants": [
            {"participant_id": p.participant_id, "age": p.age, "gender": p.gender,
             "culture_region": p.culture_region} for p in corpus.profiles.values()],
        "sessions": [
            {"session_id": s.session_id, "participants": list(s.participants),
             "relationship_known": s.relationship_known, "states": s.states,
             "tasks": [{**asdict(t), "video": list(t.video), "detections": list(t.detections)} for t in s.tasks]}
            for s in corpus.sessions],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", *TRAITS])
        for pid, p in corpus.profiles.items():
            w.writerow([pid, *(repr(float(v)) for v in p.personality)])
    return out
