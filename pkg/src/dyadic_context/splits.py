"""Subject-independent train/val/test splits built by greedy cost minimisation.

Costs (weighted sum, all >= 0):
  ks           per-trait two-sample KS distance between split pairs, plus 1
               for every pair/trait that is significant at ``alpha``
  correlation  sum of |r_split - r_global| over pairs of
               (gender, age, O, C, E, A, N)
  uniformity   L1 distance of the val/test age-group and gender histograms
               from uniform
  groups       L1 distance of the val/test session-group histograms from uniform
  retention    removed-session count + sum |split ratio - target ratio|
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .metadata import TRAITS

SPLITS = ("train", "val", "test")
LABELS = SPLITS + ("removed",)
VARIABLES = ("gender", "age") + TRAITS


class SplitError(ValueError):
    pass


class UndefinedCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class ParticipantStats:
    participant_id: str
    age: float
    gender: int  # F=0, M=1
    traits: tuple[float, float, float, float, float]

    def value(self, variable: str) -> float:
        if variable == "gender":
            return float(self.gender)
        if variable == "age":
            return float(self.age)
        return float(self.traits[TRAITS.index(variable)])


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    participants: tuple[ParticipantStats, ParticipantStats]
    group: str

    def __post_init__(self):
        a, b = self.participants
        if a.participant_id == b.participant_id:
            raise SplitError(f"session {self.session_id} pairs a participant with themself")

    @property
    def participant_ids(self) -> tuple[str, str]:
        return tuple(p.participant_id for p in self.participants)


@dataclass
class SplitConfig:
    weights: dict[str, float] = field(default_factory=lambda: {
        "ks": 1.0, "correlation": 1.0, "uniformity": 1.0, "groups": 1.0, "retention": 1.0})
    alpha: float = 0.05
    target_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    age_edges: tuple[float, ...] = (25.0, 35.0, 50.0)


@dataclass
class SplitCosts:
    ks: float
    correlation: float
    uniformity: float
    groups: float
    retention: float
    total: float

    def components(self) -> dict[str, float]:
        return {"ks": self.ks, "correlation": self.correlation, "uniformity": self.uniformity,
                "groups": self.groups, "retention": self.retention}


@dataclass
class SplitAssignment:
    labels: dict[str, str]
    costs: SplitCosts | None = None
    history: list[float] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    def sessions(self, split: str) -> list[str]:
        return [s for s, lab in self.labels.items() if lab == split]

    @property
    def feasible(self) -> bool:
        return not self.diagnostics


# -- statistics -----------------------------------------------------------------

def ks_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    """sup_x |ECDF_a(x) - ECDF_b(x)|."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise SplitError("ks_statistic needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_critical(m: int, n: int, alpha: float = 0.05) -> float:
    """Asymptotic two-sample critical value c(alpha) * sqrt((m + n) / (m n))."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((m + n) / (m * n))


def ks_significant(a, b, alpha: float = 0.05) -> bool:
    return ks_statistic(a, b) > ks_critical(len(a), len(b), alpha)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise UndefinedCorrelation("pearson needs two equal-length samples of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# -- costs ------------------------------------------------------------------------

def _participants(records: Sequence[SessionRecord], labels: Mapping[str, str]) -> dict[str, dict[str, ParticipantStats]]:
    out: dict[str, dict[str, ParticipantStats]] = {s: {} for s in SPLITS}
    for r in records:
        lab = labels[r.session_id]
        if lab in out:
            for p in r.participants:
                out[lab][p.participant_id] = p
    return out


def _l1_from_uniform(counts: Sequence[float]) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts / counts.sum()
    return float(np.abs(p - 1.0 / p.size).sum())


def age_group(age: float, edges: Sequence[float]) -> int:
    return int(np.searchsorted(np.asarray(edges), age, side="right"))


def _correlations(people: Sequence[ParticipantStats]) -> dict[tuple[str, str], float]:
    out = {}
    cols = {v: [p.value(v) for p in people] for v in VARIABLES}
    for u, v in itertools.combinations(VARIABLES, 2):
        try:
            out[(u, v)] = pearson(cols[u], cols[v])
        except UndefinedCorrelation:
            continue
    return out


def split_cost(labels: Mapping[str, str], records: Sequence[SessionRecord],
               config: SplitConfig | None = None) -> SplitCosts:
    cfg = config or SplitConfig()
    people = _participants(records, labels)

    ks = 0.0
    for a, b in itertools.combinations(SPLITS, 2):
        pa, pb = list(people[a].values()), list(people[b].values())
        if not pa or not pb:
            continue
        crit = ks_critical(len(pa), len(pb), cfg.alpha)
        for k in range(5):
            d = ks_statistic([p.traits[k] for p in pa], [p.traits[k] for p in pb])
            ks += d + (1.0 if d > crit else 0.0)

    everyone = {p.participant_id: p for r in records for p in r.participants}
    global_r = _correlations(list(everyone.values()))
    corr = 0.0
    for s in SPLITS:
        local_r = _correlations(list(people[s].values()))
        for key, r in local_r.items():
            if key in global_r:
                corr += abs(r - global_r[key])

    n_age = len(cfg.age_edges) + 1
    groups_all = sorted({r.group for r in records})
    uniform = groups = 0.0
    for s in ("val", "test"):
        ps = list(people[s].values())
        if ps:
            ages = np.bincount([age_group(p.age, cfg.age_edges) for p in ps], minlength=n_age)
            genders = np.bincount([p.gender for p in ps], minlength=2)
            uniform += _l1_from_uniform(ages) + _l1_from_uniform(genders)
        sess = [r.group for r in records if labels[r.session_id] == s]
        if sess:
            groups += _l1_from_uniform([sess.count(g) for g in groups_all])

    removed = sum(1 for r in records if labels[r.session_id] == "removed")
    kept = len(records) - removed
    ratio_dev = 0.0
    for s, target in zip(SPLITS, cfg.target_ratios):
        n = sum(1 for r in records if labels[r.session_id] == s)
        ratio_dev += abs((n / kept if kept else 0.0) - target)
    retention = removed + ratio_dev

    w = cfg.weights
    total = (w["ks"] * ks + w["correlation"] * corr + w["uniformity"] * uniform
             + w["groups"] * groups + w["retention"] * retention)
    return SplitCosts(ks, corr, uniform, groups, retention, total)


# -- feasibility ------------------------------------------------------------------

def subject_independent(labels: Mapping[str, str], records: Sequence[SessionRecord]) -> bool:
    seen: dict[str, str] = {}
    for r in records:
        lab = labels[r.session_id]
        if lab == "removed":
            continue
        for pid in r.participant_ids:
            if seen.setdefault(pid, lab) != lab:
                return False
    return True


def connected_components(records: Sequence[SessionRecord]) -> list[list[str]]:
    """Groups of session ids linked through shared participants, in first-seen order."""
    parent: dict[str, str] = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for r in records:
        a, b = r.participant_ids
        parent[find(a)] = find(b)
    comps: dict[str, list[str]] = {}
    for r in records:
        comps.setdefault(find(r.participant_ids[0]), []).append(r.session_id)
    return list(comps.values())


def _move_allowed(session: SessionRecord, target: str, labels: Mapping[str, str],
                  by_participant: Mapping[str, list[str]]) -> bool:
    if target == "removed":
        return True
    for pid in session.participant_ids:
        for other in by_participant[pid]:
            if other != session.session_id and labels[other] not in ("removed", target):
                return False
    return True


def initial_assignment(records: Sequence[SessionRecord], config: SplitConfig, seed: int) -> dict[str, str]:
    """Whole connected components to splits, largest first, filling the largest ratio deficit."""
    rng = np.random.default_rng(seed)
    comps = connected_components(records)
    perm = rng.permutation(len(comps))
    comps = [comps[i] for i in perm]
    comps.sort(key=len, reverse=True)
    n = len(records)
    counts = dict.fromkeys(SPLITS, 0)
    labels: dict[str, str] = {}
    for comp in comps:
        deficits = [t * n - counts[s] for s, t in zip(SPLITS, config.target_ratios)]
        split = SPLITS[int(np.argmax(deficits))]
        for sid in comp:
            labels[sid] = split
        counts[split] += len(comp)
    return labels


def greedy_optimize(records: Sequence[SessionRecord], config: SplitConfig | None = None, seed: int = 0,
                    max_iters: int = 200, initial: Mapping[str, str] | None = None,
                    on_accept: Callable[[dict[str, str], SplitCosts], None] | None = None) -> SplitAssignment:
    """Best-improvement local search over single-session moves that keep subject independence."""
    cfg = config or SplitConfig()
    if len(records) < 3:
        raise SplitError(f"need at least 3 sessions, got {len(records)}")
    ids = [r.session_id for r in records]
    if len(set(ids)) != len(ids):
        raise SplitError("duplicate session ids")
    by_participant: dict[str, list[str]] = {}
    for r in records:
        for pid in r.participant_ids:
            by_participant.setdefault(pid, []).append(r.session_id)

    if initial is None:
        labels = initial_assignment(records, cfg, seed)
    else:
        labels = {sid: initial[sid] for sid in ids}
        if not subject_independent(labels, records):
            raise SplitError("initial assignment shares a participant across splits")
    cost = split_cost(labels, records, cfg)
    history = [cost.total]
    rng = np.random.default_rng(seed + 1)
    tiebreak = {sid: i for i, sid in enumerate(rng.permutation(ids))}

    for _ in range(max_iters):
        def remaining(sid):
            rec = next(r for r in records if r.session_id == sid)
            return max(sum(1 for o in by_participant[p] if labels[o] != "removed") for p in rec.participant_ids)

        queue = sorted(records, key=lambda r: (-remaining(r.session_id), tiebreak[r.session_id]))
        best = None
        for rec in queue:
            for target in LABELS:
                if target == labels[rec.session_id] or not _move_allowed(rec, target, labels, by_participant):
                    continue
                if sum(1 for v in labels.values() if v == labels[rec.session_id]) == 1 \
                        and labels[rec.session_id] != "removed":
                    continue  # never empty a split the start state filled
                trial = dict(labels)
                trial[rec.session_id] = target
                c = split_cost(trial, records, cfg)
                if c.total < (best[2].total if best else cost.total) - 1e-12:
                    best = (rec.session_id, target, c)
        if best is None:
            break
        labels[best[0]] = best[1]
        cost = best[2]
        history.append(cost.total)
        if on_accept is not None:
            on_accept(dict(labels), cost)

    result = SplitAssignment(labels, cost, history)
    if len(connected_components(records)) < 3:
        result.diagnostics.append(
            "participant co-occurrence graph has fewer than 3 connected components; "
            "val/test cannot all be populated without sharing participants")
    for s in ("val", "test"):
        if not result.sessions(s):
            result.diagnostics.append(f"split '{s}' is empty")
    return result


# -- files ------------------------------------------------------------------------

def write_assignment(path, assignment: SplitAssignment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "split"])
        for sid, lab in assignment.labels.items():
            w.writerow([sid, lab])


def read_assignment(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = {}
    for row in rows:
        if row["split"] not in LABELS:
            raise SplitError(f"{path}: unknown split {row['split']!r}")
        labels[row["session_id"]] = row["split"]
    return labels


def write_balance_report(out_dir, labels: Mapping[str, str], records: Sequence[SessionRecord],
                         config: SplitConfig | None = None) -> None:
    """KS and correlation tables per split as CSV."""
    cfg = config or SplitConfig()
    out_dir = Path(out_dir)
    people = _participants(records, labels)
    with open(out_dir / "balance_ks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split_a", "split_b", "trait", "D", "critical", "significant"])
        for a, b in itertools.combinations(SPLITS, 2):
            pa, pb = list(people[a].values()), list(people[b].values())
            if not pa or not pb:
                continue
            crit = ks_critical(len(pa), len(pb), cfg.alpha)
            for k, trait in enumerate(TRAITS):
                d = ks_statistic([p.traits[k] for p in pa], [p.traits[k] for p in pb])
                w.writerow([a, b, trait, f"{d:.6f}", f"{crit:.6f}", int(d > crit)])
    everyone = {p.participant_id: p for r in records for p in r.participants}
    with open(out_dir / "balance_correlation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "var_a", "var_b", "r"])
        for name, group in [("all", everyone)] + [(s, people[s]) for s in SPLITS]:
            for (u, v), r in _correlations(list(group.values())).items():
                w.writerow([name, u, v, f"{r:.6f}"])
