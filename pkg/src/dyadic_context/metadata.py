"""Local (20-d) and extended (19-d) metadata vectors.

Layouts::

    individual (18) = [age, gender, culture one-hot (6), session index,
                       mood (8: good, bad, happy, sad, friendly, unfriendly,
                       tense, relaxed), fatigue]
    local (20)      = individual(target) ++ [task order, task difficulty]
    extended (19)   = individual(interlocutor) ++ [relationship known]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

AGE_RANGE = (17.0, 75.0)
N_CULTURES = 6
MOODS = ("good", "bad", "happy", "sad", "friendly", "unfriendly", "tense", "relaxed")
TRAITS = ("O", "C", "E", "A", "N")
INDIVIDUAL_DIM = 18
LOCAL_DIM = 20
EXTENDED_DIM = 19


class MetadataError(ValueError):
    pass


@dataclass
class ParticipantProfile:
    participant_id: str
    age: float
    gender: str
    culture_region: int
    personality: tuple[float, ...] = field(default=(0.0,) * 5)

    def __post_init__(self):
        if self.gender not in ("F", "M"):
            raise MetadataError(f"gender must be 'F' or 'M', got {self.gender!r}")
        if not 0 <= int(self.culture_region) < N_CULTURES:
            raise MetadataError(f"culture_region must be in [0, {N_CULTURES}), got {self.culture_region}")
        if len(self.personality) != 5:
            raise MetadataError("personality needs five OCEAN scores")


@dataclass
class SessionState:
    session_index: int
    pre_mood: Sequence[float]
    pre_fatigue: float | None = None
    task_order: int = 1
    task_difficulty: int = 0  # 0 when the task has no difficulty level
    relationship_known: str = "N"

    def __post_init__(self):
        if not 1 <= self.session_index <= 5:
            raise MetadataError(f"session_index must be in 1..5, got {self.session_index}")
        if len(self.pre_mood) != len(MOODS):
            raise MetadataError(f"pre_mood needs {len(MOODS)} ratings")
        if any(not 1 <= v <= 5 for v in self.pre_mood):
            raise MetadataError(f"mood ratings must be in [1, 5], got {list(self.pre_mood)}")
        if self.pre_fatigue is not None and not 0 <= self.pre_fatigue <= 10:
            raise MetadataError(f"fatigue must be in [0, 10], got {self.pre_fatigue}")
        if not 0 <= self.task_difficulty <= 3:
            raise MetadataError(f"task_difficulty must be in 0..3, got {self.task_difficulty}")
        if self.relationship_known not in ("N", "Y"):
            raise MetadataError(f"relationship_known must be 'N' or 'Y', got {self.relationship_known!r}")


@dataclass
class MetadataVectors:
    local: np.ndarray
    extended: np.ndarray


def encode_individual(profile: ParticipantProfile, state: SessionState) -> np.ndarray:
    lo, hi = AGE_RANGE
    age = min(max((profile.age - lo) / (hi - lo), 0.0), 1.0)
    culture = np.zeros(N_CULTURES)
    culture[int(profile.culture_region)] = 1.0
    mood = (np.asarray(state.pre_mood, dtype=np.float64) - 1.0) / 4.0
    fatigue = 0.0 if state.pre_fatigue is None else state.pre_fatigue / 10.0
    return np.concatenate([
        [age, 1.0 if profile.gender == "M" else 0.0],
        culture,
        [(state.session_index - 1) / 4.0],
        mood,
        [fatigue],
    ])


def encode_local(profile: ParticipantProfile, state: SessionState) -> np.ndarray:
    if not 1 <= state.task_order <= 4:
        raise MetadataError(f"task_order must be in 1..4, got {state.task_order}")
    session = [(state.task_order - 1) / 3.0, state.task_difficulty / 3.0]
    return np.concatenate([encode_individual(profile, state), session])


def encode_extended(interlocutor: ParticipantProfile, state: SessionState) -> np.ndarray:
    dyadic = [1.0 if state.relationship_known == "Y" else 0.0]
    return np.concatenate([encode_individual(interlocutor, state), dyadic])


def encode_dyad(target: ParticipantProfile, target_state: SessionState,
                other: ParticipantProfile, other_state: SessionState) -> MetadataVectors:
    """Both vectors for one target; each participant's own session state feeds its block."""
    return MetadataVectors(encode_local(target, target_state), encode_extended(other, other_state))
