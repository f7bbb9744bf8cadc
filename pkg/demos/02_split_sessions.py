"""Building a subject-independent train/val/test split.

Participants take part in several sessions, so sessions cannot be assigned
independently. The greedy optimizer moves one session at a time and only
accepts moves that keep every participant inside a single split.
"""
from collections import Counter

from dyadic_context.corpus import SyntheticSpec, generate_synthetic
from dyadic_context.splits import SplitConfig, connected_components, greedy_optimize, subject_independent

corpus = generate_synthetic(SyntheticSpec(n_participants=60, n_sessions=40, tasks=("Talk",)), seed=3)
records = corpus.split_records()
comps = connected_components(records)
print(f"{len(records)} sessions form {len(comps)} groups linked by shared participants")
print("largest groups:", sorted(map(len, comps), reverse=True)[:5])

accepted = []
result = greedy_optimize(records, SplitConfig(), seed=0,
                         on_accept=lambda labels, cost: accepted.append(subject_independent(labels, records)))
print(f"{len(accepted)} accepted moves, all subject independent: {all(accepted)}")
print("cost went from", round(result.history[0], 3), "to", round(result.history[-1], 3))
print("components:", {k: round(v, 3) for k, v in vars(result.costs).items()})
print("sessions per split:", dict(Counter(result.labels.values())))
for msg in result.diagnostics:
    print("note:", msg)
