"""Adam, MSE and the training loop with smoothed checkpoint selection."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .metadata import MetadataVectors
from .model import ChunkFeatures, DyadicTransformer, predict_batch, save_checkpoint
from .tensor import Parameter, ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class Sample:
    features: ChunkFeatures
    meta: MetadataVectors
    label: np.ndarray
    participant_id: str = ""
    session_id: str = ""


@dataclass
class TrainConfig:
    batch_size: int = 2
    epochs: int = 1
    validations_per_epoch: int = 30
    seed: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None  # overrides ``epochs`` when set

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def mse_loss(pred, target) -> Tensor:
    """Mean of squared errors over every entry."""
    pred = T.tensor(pred)
    target = T.tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def adam_step(params: Sequence[Parameter], state: OptimizerState) -> None:
    """One bias-corrected Adam update of every non-frozen parameter that has a gradient."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if p.frozen or p.grad is None:
            continue
        g = p.grad
        if g.shape != p.shape:
            raise ShapeError(f"{p.name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if m.shape != p.shape:
            raise ShapeError(f"{p.name}: optimizer state {m.shape} vs parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("Adam needs uniquely named parameters")
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def smoothed_scores(values: Sequence[float]) -> list[float]:
    """Mean of each score with its previous and next neighbours (2-point at the ends)."""
    vals = list(values)
    out = []
    for k in range(len(vals)):
        window = vals[max(k - 1, 0):k + 2]
        out.append(sum(window) / len(window))
    return out


def select_checkpoint(values: Sequence[float]) -> int:
    """Index minimising the smoothed validation score; earliest on ties."""
    if not values:
        raise ValueError("empty validation curve")
    scores = smoothed_scores(values)
    return int(np.argmin(scores))


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    curve: list[tuple[int, float]]
    best_index: int
    train_losses: list[float]

    @property
    def best_step(self) -> int:
        return self.curve[self.best_index][0]


def evaluate_mse(model: DyadicTransformer, samples: Sequence[Sample]) -> float:
    with T.no_grad():
        preds = np.stack([model.forward(s.features, s.meta).data for s in samples])
    labels = np.stack([s.label for s in samples])
    return float(np.mean((preds - labels) ** 2))


def train(model: DyadicTransformer, train_set: Sequence[Sample], val_set: Sequence[Sample],
          cfg: TrainConfig, run_dir: str | Path | None = None) -> TrainResult:
    """Mini-batch Adam with periodic validation; returns the smoothed-best checkpoint."""
    if not train_set:
        raise ValueError("empty training set")
    if not val_set:
        raise ValueError("empty validation set")
    rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else steps_per_epoch * cfg.epochs
    cadence = max(1, math.ceil(steps_per_epoch / cfg.validations_per_epoch))
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2))
        (run_dir / "model_config.json").write_text(json.dumps(model.cfg.to_dict(), indent=2))

    curve: list[tuple[int, float]] = []
    losses: list[float] = []
    # only the pending (latest) snapshot and the best finalised one are kept
    pending: dict[str, np.ndarray] | None = None
    best, best_score, best_state = -1, math.inf, None
    step = 0
    order: list[int] = []
    while step < total:
        if not order:
            order = list(rng.permutation(n))
        batch_idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        batch = [train_set[i] for i in batch_idx]
        opt.zero_grad()
        pred = predict_batch(model, [(s.features, s.meta) for s in batch], training=True, rng=dropout_rng)
        loss = mse_loss(pred, np.stack([s.label for s in batch]))
        loss.backward()
        opt.step()
        losses.append(loss.item())
        step += 1
        if step % cadence == 0 or step == total:
            val = evaluate_mse(model, val_set)
            curve.append((step, val))
            snap = model.state_dict()
            if run_dir is not None:
                save_checkpoint(run_dir / "checkpoints" / f"step_{step:06d}.npz", model.cfg, snap)
            j = len(curve) - 1
            if j >= 1:
                window = [v for _, v in curve[max(j - 2, 0):j + 1]]
                score = sum(window) / len(window)
                if score < best_score:
                    best, best_score, best_state = j - 1, score, pending
            pending = snap
            log.debug("step %d train %.4f val %.4f", step, losses[-1], val)

    window = [v for _, v in curve[-2:]]
    if sum(window) / len(window) < best_score:
        best, best_state = len(curve) - 1, pending
    assert best == select_checkpoint([v for _, v in curve])
    if run_dir is not None:
        with open(run_dir / "validation_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "val_mse"])
            w.writerows((s, repr(v)) for s, v in curve)
        save_checkpoint(run_dir / "best.npz", model.cfg, best_state)
        (run_dir / "selection.json").write_text(json.dumps(
            {"best_index": best, "best_step": curve[best][0], "val_mse": curve[best][1],
             "smoothed": smoothed_scores([v for _, v in curve])[best]}, indent=2))
    return TrainResult(best_state, curve, best, losses)
