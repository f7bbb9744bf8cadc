"""Context-aware dyadic transformer for per-chunk OCEAN regression.

Pipeline for one chunk::

    Z' (16,S,S,128) ++ P (16,S,S,20)          -> Z (16,S,S,148)
    QP(Z_F) -> f (128);  w_Q = f ++ m_L       -> q_0 = ReLU(w_Q Theta_Q0)
    W_L = Z_L ++ A,  W_E = Z_E ++ A ++ M_E     -> K/V = ReLU(W Theta)
    N layers: q_i = ReLU((unit_L(q) ++ unit_E(q)) Theta_Qi)
    y = q_N Theta_FC + b

Scenario toggles shrink the projection input sizes instead of masking inputs.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbones import FEATURE_CHANNELS, FEATURE_FRAMES, Backbones
from .chunking import DEFAULT_STATS, ChunkBundle, NormalizationStats, normalize_pixels
from .metadata import EXTENDED_DIM, LOCAL_DIM, MetadataVectors
from .tensor import Parameter, ShapeError, Tensor


@dataclass(frozen=True)
class ScenarioConfig:
    query_face: bool = True
    query_metadata: bool = False
    kv_local_frame: bool = True
    kv_extended_frame: bool = False
    kv_extended_metadata: bool = False
    kv_audio: bool = False

    def __post_init__(self):
        if self.name is None:
            raise ValueError(f"scenario {self} is not one of {sorted(SCENARIOS)}")

    @property
    def name(self) -> str | None:
        for key, flags in _SCENARIO_FLAGS.items():
            if flags == self._flags():
                return key
        return None

    def _flags(self) -> tuple[bool, ...]:
        return (self.query_face, self.query_metadata, self.kv_local_frame,
                self.kv_extended_frame, self.kv_extended_metadata, self.kv_audio)

    @classmethod
    def from_name(cls, name: str) -> "ScenarioConfig":
        try:
            return cls(*_SCENARIO_FLAGS[name])
        except KeyError:
            raise ValueError(f"unknown scenario {name!r}; model scenarios are {list(_SCENARIO_FLAGS)}") from None


# (face query, query metadata, local frame, extended frame, extended metadata, audio)
_SCENARIO_FLAGS = {
    "L":    (True, False, True, False, False, False),
    "Lm":   (True, True, True, False, False, False),
    "LE":   (True, False, True, True, False, False),
    "LEm":  (True, True, True, True, True, False),
    "LEa":  (True, False, True, True, False, True),
    "LEam": (True, True, True, True, True, True),
}
SCENARIOS = ("B",) + tuple(_SCENARIO_FLAGS)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    n_heads: int = 2
    d_model: int = 128
    audio_proj_dim: int = 100
    ste_hidden: int = 20
    ste_out: int = 10
    spatial: int = 28
    qp_filters: int = 16
    qp_dropout: float = 0.1
    ffn_hidden: int = 128
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=lambda: ScenarioConfig.from_name("LEam"))

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.spatial % 4:
            raise ValueError(f"spatial extent {self.spatial} must be divisible by 4")

    @property
    def z_dim(self) -> int:
        return FEATURE_CHANNELS + 2 * self.ste_out

    @property
    def query_dim(self) -> int:
        return self.d_model + (LOCAL_DIM if self.scenario.query_metadata else 0)

    @property
    def local_dim(self) -> int:
        return self.z_dim + (self.audio_proj_dim if self.scenario.kv_audio else 0)

    @property
    def extended_dim(self) -> int:
        s = self.scenario
        return (self.z_dim + (self.audio_proj_dim if s.kv_audio else 0)
                + (EXTENDED_DIM if s.kv_extended_metadata else 0))

    @property
    def qp_flat_dim(self) -> int:
        return (self.spatial // 4) ** 2 * self.qp_filters

    def with_scenario(self, name: str) -> "ModelConfig":
        return replace(self, scenario=ScenarioConfig.from_name(name))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["scenario"] = ScenarioConfig.from_name(d.get("scenario", "LEam"))
        return cls(**d)


REDUCED_GEOMETRY = 4


@dataclass
class ChunkFeatures:
    """Backbone outputs for one chunk; ``extended``/``audio`` may be absent."""

    face: np.ndarray
    local: np.ndarray
    extended: np.ndarray | None = None
    audio: np.ndarray | None = None


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: OrderedDict[str, Parameter] = OrderedDict()

    def weight(self, name: str, fan_in: int, fan_out: int) -> Parameter:
        bound = 1.0 / np.sqrt(fan_in)
        p = Parameter(self.rng.uniform(-bound, bound, (fan_in, fan_out)), name)
        self.params[name] = p
        return p

    def const(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name)
        self.params[name] = p
        return p


class TxUnit:
    """Multi-head attention of one query over one context, then the residual
    / layer-norm / feed-forward tail."""

    def __init__(self, b: _Builder, prefix: str, cfg: ModelConfig):
        d, hdim = cfg.d_model, cfg.ffn_hidden
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.w_q = b.weight(f"{prefix}.W_q", d, d)
        self.w_k = b.weight(f"{prefix}.W_k", d, d)
        self.w_v = b.weight(f"{prefix}.W_v", d, d)
        self.w_o = b.weight(f"{prefix}.W_o", d, d)
        self.b_o = b.const(f"{prefix}.W_o.bias", np.zeros(d))
        self.ln1_g = b.const(f"{prefix}.ln1.gain", np.ones(d))
        self.ln1_b = b.const(f"{prefix}.ln1.bias", np.zeros(d))
        self.ffn1 = b.weight(f"{prefix}.ffn1", d, hdim)
        self.ffn1_b = b.const(f"{prefix}.ffn1.bias", np.zeros(hdim))
        self.ffn2 = b.weight(f"{prefix}.ffn2", hdim, d)
        self.ffn2_b = b.const(f"{prefix}.ffn2.bias", np.zeros(d))
        self.ln2_g = b.const(f"{prefix}.ln2.gain", np.ones(d))
        self.ln2_b = b.const(f"{prefix}.ln2.bias", np.zeros(d))

    def attend(self, q: Tensor, keys: Tensor, values: Tensor):
        """Per-head scaled dot-product attention.

        Returns the concatenated head outputs (d_model,), the attention
        weights per head and the projected values per head.
        """
        qp = T.matmul(q, self.w_q)
        kp = T.matmul(keys, self.w_k)
        vp = T.matmul(values, self.w_v)
        scale = 1.0 / np.sqrt(self.head_dim)
        outs, weights, heads_v = [], [], []
        for h in range(self.n_heads):
            sl = slice(h * self.head_dim, (h + 1) * self.head_dim)
            k_h = kp[:, sl]
            v_h = vp[:, sl]
            logits = T.scale(T.matmul(k_h, qp[sl]), scale)
            w = T.softmax(logits, axis=0)
            outs.append(T.matmul(w, v_h))
            weights.append(w)
            heads_v.append(v_h)
        return T.concat(outs, axis=0), weights, heads_v

    def __call__(self, q: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        heads, _, _ = self.attend(q, keys, values)
        attn = T.matmul(heads, self.w_o) + self.b_o
        h1 = T.layer_norm(q + attn, self.ln1_g, self.ln1_b)
        ff = T.matmul(T.relu(T.matmul(h1, self.ffn1) + self.ffn1_b), self.ffn2) + self.ffn2_b
        return T.layer_norm(h1 + ff, self.ln2_g, self.ln2_b)


class TxLayer:
    def __init__(self, b: _Builder, index: int, cfg: ModelConfig):
        self.local = TxUnit(b, f"layer{index}.local", cfg)
        self.extended = TxUnit(b, f"layer{index}.extended", cfg) if cfg.scenario.kv_extended_frame else None
        fan_in = 2 * cfg.d_model if self.extended is not None else cfg.d_model
        self.theta_q = b.weight(f"Theta_Q_{index}", fan_in, cfg.d_model)

    def __call__(self, q, local_kv, extended_kv=None, trace=None) -> Tensor:
        q_l = self.local(q, *local_kv)
        if self.extended is None:
            joint = q_l
        else:
            q_e = self.extended(q, *extended_kv)
            joint = T.concat([q_l, q_e], axis=0)
        if trace is not None:
            trace.setdefault("q_L", []).append(q_l.shape)
        return T.relu(T.matmul(joint, self.theta_q))


class DyadicTransformer:
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg = cfg or ModelConfig()
        s = cfg.scenario
        b = _Builder(cfg.seed)
        # spatiotemporal encodings
        self.t1 = b.weight("Theta_T1", 1, cfg.ste_hidden)
        self.t1_b = b.const("Theta_T1.bias", np.zeros(cfg.ste_hidden))
        self.t2 = b.weight("Theta_T2", cfg.ste_hidden, cfg.ste_out)
        self.t2_b = b.const("Theta_T2.bias", np.zeros(cfg.ste_out))
        self.s1 = b.weight("Theta_S1", 2, cfg.ste_hidden)
        self.s1_b = b.const("Theta_S1.bias", np.zeros(cfg.ste_hidden))
        self.s2 = b.weight("Theta_S2", cfg.ste_hidden, cfg.ste_out)
        self.s2_b = b.const("Theta_S2.bias", np.zeros(cfg.ste_out))
        # query preprocessor
        self.qp_c1 = b.weight("QP.conv3d", cfg.z_dim, cfg.qp_filters)
        self.qp_c1_b = b.const("QP.conv3d.bias", np.zeros(cfg.qp_filters))
        merged = FEATURE_FRAMES * cfg.qp_filters
        self.qp_c2 = b.weight("QP.conv2d", merged, cfg.qp_filters)
        self.qp_c2_b = b.const("QP.conv2d.bias", np.zeros(cfg.qp_filters))
        self.qp_fc = b.weight("QP.fc", cfg.qp_flat_dim, cfg.d_model)
        self.qp_fc_b = b.const("QP.fc.bias", np.zeros(cfg.d_model))
        # audio projection
        if s.kv_audio:
            self.audio_proj = b.weight("Theta_A_proj", FEATURE_CHANNELS, cfg.audio_proj_dim)
            self.audio_proj_b = b.const("Theta_A_proj.bias", np.zeros(cfg.audio_proj_dim))
        # keys, values, query
        self.theta_kl = b.weight("Theta_K_L", cfg.local_dim, cfg.d_model)
        self.theta_vl = b.weight("Theta_V_L", cfg.local_dim, cfg.d_model)
        if s.kv_extended_frame:
            self.theta_ke = b.weight("Theta_K_E", cfg.extended_dim, cfg.d_model)
            self.theta_ve = b.weight("Theta_V_E", cfg.extended_dim, cfg.d_model)
        self.theta_q0 = b.weight("Theta_Q_0", cfg.query_dim, cfg.d_model)
        self.layers = [TxLayer(b, i, cfg) for i in range(1, cfg.n_layers + 1)]
        self.theta_fc = b.weight("Theta_FC", cfg.d_model, 5)
        self.theta_fc_b = b.const("Theta_FC.bias", np.zeros(5))
        self.params = b.params

        # bookkeeping: projection inputs equal the enabled feature widths
        assert self.theta_kl.shape[0] == cfg.z_dim + cfg.audio_proj_dim * s.kv_audio
        if s.kv_extended_frame:
            assert self.theta_ke.shape[0] == (cfg.z_dim + cfg.audio_proj_dim * s.kv_audio
                                              + EXTENDED_DIM * s.kv_extended_metadata)

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def named_parameters(self) -> OrderedDict:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def save(self, path) -> None:
        save_checkpoint(path, self.cfg, self.state_dict())

    @classmethod
    def load(cls, path) -> "DyadicTransformer":
        cfg, state = load_checkpoint(path)
        model = cls(cfg)
        model.load_state_dict(state)
        return model

    # -- stages -------------------------------------------------------------
    def spatiotemporal_encodings(self) -> Tensor:
        cfg = self.cfg
        s = cfg.spatial
        pt = T.relu(T.matmul(time_indices()[:, None], self.t1) + self.t1_b)
        pt = T.relu(T.matmul(pt, self.t2) + self.t2_b).reshape(FEATURE_FRAMES, 1, 1, cfg.ste_out)
        ps = T.relu(T.matmul(spatial_grid(s), self.s1) + self.s1_b)
        ps = T.relu(T.matmul(ps, self.s2) + self.s2_b).reshape(1, s, s, cfg.ste_out)
        return T.concat([ps, pt], axis=-1)

    def query_preprocess(self, z_face: Tensor, training: bool = False, rng=None, trace=None) -> Tensor:
        cfg = self.cfg
        s = cfg.spatial
        if z_face.shape != (FEATURE_FRAMES, s, s, cfg.z_dim):
            raise ShapeError(f"QP expects {(FEATURE_FRAMES, s, s, cfg.z_dim)}, got {z_face.shape}")
        x = T.pool_max(z_face, (1, 2, 2), (1, 2, 2))
        _note(trace, "qp_pool3d", x)
        x = T.relu(T.matmul(x, self.qp_c1) + self.qp_c1_b)
        _note(trace, "qp_conv3d", x)
        half = s // 2
        x = x.transpose(1, 2, 0, 3).reshape(half, half, FEATURE_FRAMES * cfg.qp_filters)
        _note(trace, "qp_merge", x)
        x = T.pool_max(x, (2, 2), (2, 2))
        _note(trace, "qp_pool2d", x)
        x = T.relu(T.matmul(x, self.qp_c2) + self.qp_c2_b)
        _note(trace, "qp_conv2d", x)
        x = x.reshape(cfg.qp_flat_dim)
        _note(trace, "qp_flat", x)
        x = T.relu(T.matmul(x, self.qp_fc) + self.qp_fc_b)
        return T.dropout(x, cfg.qp_dropout, rng, training)

    def fuse(self, z_local: Tensor, z_ext: Tensor | None, audio: Tensor | None,
             m_ext: np.ndarray | None) -> tuple[Tensor, Tensor | None]:
        s = self.cfg.scenario
        extras_l, extras_e = [], []
        if s.kv_audio:
            if audio is None:
                raise ShapeError("scenario uses audio but no audio features were given")
            a = T.matmul(audio, self.audio_proj) + self.audio_proj_b
            a = a.reshape(1, 1, 1, self.cfg.audio_proj_dim)
            extras_l.append(a)
            extras_e.append(a)
        w_local = T.concat([z_local] + extras_l, axis=-1)
        w_ext = None
        if s.kv_extended_frame:
            if z_ext is None:
                raise ShapeError("scenario uses the extended context but no extended features were given")
            if s.kv_extended_metadata:
                if m_ext is None:
                    raise ShapeError("scenario uses extended metadata but none was given")
                extras_e.append(T.tensor(np.asarray(m_ext, dtype=np.float64).reshape(1, 1, 1, EXTENDED_DIM)))
            w_ext = T.concat([z_ext] + extras_e, axis=-1)
        return w_local, w_ext

    def build_qkv(self, w_local: Tensor, w_ext: Tensor | None, f: Tensor, m_local):
        s = self.cfg.scenario
        flat_l = w_local.reshape(-1, w_local.shape[-1])
        k_l = T.relu(T.matmul(flat_l, self.theta_kl))
        v_l = T.relu(T.matmul(flat_l, self.theta_vl))
        k_e = v_e = None
        if w_ext is not None:
            flat_e = w_ext.reshape(-1, w_ext.shape[-1])
            k_e = T.relu(T.matmul(flat_e, self.theta_ke))
            v_e = T.relu(T.matmul(flat_e, self.theta_ve))
        w_q = T.concat([f, T.tensor(np.asarray(m_local, dtype=np.float64))], axis=0) if s.query_metadata else f
        q0 = T.relu(T.matmul(w_q, self.theta_q0))
        return q0, k_l, v_l, k_e, v_e, w_q

    # -- full pass ----------------------------------------------------------
    def forward(self, feats: ChunkFeatures, meta: MetadataVectors | None = None,
                training: bool = False, rng=None, trace: dict | None = None) -> Tensor:
        cfg = self.cfg
        s = cfg.scenario
        if s.query_metadata or s.kv_extended_metadata:
            if meta is None:
                raise ShapeError(f"scenario {s.name} needs metadata")
        if s.kv_extended_frame and feats.extended is None:
            raise ShapeError(f"scenario {s.name} needs extended-context features")
        if s.kv_audio and feats.audio is None:
            raise ShapeError(f"scenario {s.name} needs audio features")
        p = self.spatiotemporal_encodings()
        _note(trace, "P", p)
        z_f = T.concat([T.tensor(feats.face), p], axis=-1)
        z_l = T.concat([T.tensor(feats.local), p], axis=-1)
        z_e = T.concat([T.tensor(feats.extended), p], axis=-1) if s.kv_extended_frame else None
        for key, z in (("Z_F", z_f), ("Z_L", z_l), ("Z_E", z_e)):
            _note(trace, key, z)
        f = self.query_preprocess(z_f, training, rng, trace)
        _note(trace, "f", f)
        audio = T.tensor(feats.audio) if s.kv_audio else None
        w_l, w_e = self.fuse(z_l, z_e, audio, meta.extended if meta is not None else None)
        _note(trace, "W_L", w_l)
        _note(trace, "W_E", w_e)
        q, k_l, v_l, k_e, v_e, w_q = self.build_qkv(w_l, w_e, f, meta.local if meta is not None else None)
        for key, v in (("w_Q", w_q), ("q_0", q), ("K_L", k_l), ("V_L", v_l), ("K_E", k_e), ("V_E", v_e)):
            _note(trace, key, v)
        for layer in self.layers:
            q = layer(q, (k_l, v_l), (k_e, v_e) if k_e is not None else None, trace)
            if trace is not None:
                trace.setdefault("q_i", []).append(q.shape)
        y = T.matmul(q, self.theta_fc) + self.theta_fc_b
        _note(trace, "y", y)
        return y

    __call__ = forward

    def predict_chunk(self, bundle: ChunkBundle, meta: MetadataVectors | None, backbones: Backbones,
                      stats: NormalizationStats = DEFAULT_STATS, trace: dict | None = None) -> Tensor:
        """Raw chunk -> backbones -> model, in eval mode."""
        feats = extract_features(bundle, backbones, self.cfg.scenario, stats)
        if trace is not None:
            trace["Z'_F"] = feats.face.shape
            trace["Z'_L"] = feats.local.shape
            if feats.extended is not None:
                trace["Z'_E"] = feats.extended.shape
            if feats.audio is not None:
                trace["a"] = feats.audio.shape
        return self.forward(feats, meta, training=False, trace=trace)


def time_indices(n: int = FEATURE_FRAMES) -> np.ndarray:
    """Zero-centred frame indices ``-n/2 .. n/2 - 1``."""
    return np.arange(n, dtype=np.float64) - n // 2


def spatial_grid(s: int) -> np.ndarray:
    """(s, s, 2) array of zero-centred ``(i - s/2, j - s/2)`` positions."""
    ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    return np.stack([ii - s // 2, jj - s // 2], axis=-1).astype(np.float64)


def _note(trace, key, value) -> None:
    if trace is not None and value is not None:
        trace[key] = value.shape


def extract_features(bundle: ChunkBundle, backbones: Backbones, scenario: ScenarioConfig | None = None,
                     stats: NormalizationStats = DEFAULT_STATS) -> ChunkFeatures:
    """Frozen backbone outputs for one chunk (all modalities unless ``scenario`` drops some)."""
    want_ext = scenario is None or scenario.kv_extended_frame
    want_audio = scenario is None or scenario.kv_audio
    face = backbones.face(normalize_pixels(bundle.face, stats)).data
    local = backbones.local(normalize_pixels(bundle.local, stats)).data
    ext = backbones.extended(normalize_pixels(bundle.extended, stats)).data if want_ext else None
    audio = backbones.audio(bundle.audio).data if want_audio else None
    return ChunkFeatures(face, local, ext, audio)


def aggregate_subject(per_chunk: Sequence) -> np.ndarray:
    """Per-trait median over a participant's chunk predictions."""
    if len(per_chunk) == 0:
        raise ValueError("no chunk predictions to aggregate")
    stacked = np.stack([p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64) for p in per_chunk])
    return np.median(stacked, axis=0)


def predict_batch(model: DyadicTransformer, batch: Sequence[tuple[ChunkFeatures, MetadataVectors]],
                  training: bool = False, rng=None) -> Tensor:
    """(B, 5) predictions for a list of (features, metadata) pairs."""
    rows = [model.forward(f, m, training, rng).reshape(1, 5) for f, m in batch]
    return T.concat(rows, axis=0)


# -- checkpoints: npz archive of named float64 arrays plus the config as JSON -----

def save_checkpoint(path, cfg: ModelConfig, state: dict[str, np.ndarray]) -> None:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in state.items()}
    arrays["__config__"] = np.frombuffer(json.dumps(cfg.to_dict()).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with np.load(Path(path)) as archive:
        cfg = ModelConfig.from_dict(json.loads(archive["__config__"].tobytes().decode()))
        state = {k: archive[k] for k in archive.files if k != "__config__"}
    return cfg, state
