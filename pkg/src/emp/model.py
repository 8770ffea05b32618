"""The EMP network: agent/lane/scene encoders and both decoder variants.

EMP-M decodes the focal scene token with learnable mode embeddings and an
MLP pair; EMP-D refines learnable queries with cross-attention to the
focal agent's temporal embeddings and to the lane tokens. All forwards are
batched over scenarios (padded to the largest agent/lane counts, with
entity masks); a single scenario is a batch of one.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

import emp.tensor as t
from emp.rng import stream
from emp.scenario import PreprocessedScene
from emp.tensor import Tensor

CHECKPOINT_SCHEMA = "emp-checkpoint/1"
INIT_SCHEME = "linear:uniform(1/sqrt(fan_in)),bias:zero,embed:normal(0.02)"


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or inconsistent with its config."""


@dataclass(frozen=True)
class ModelConfig:
    D: int = 128
    heads: int = 8
    agent_encoder_depth: int = 4
    scene_encoder_depth: int = 4
    decoder_depth: int = 3
    K: int = 6
    T_h: int = 50
    T_f: int = 60
    N: int = 20
    agent_type_count: int = 4
    lane_type_count: int = 3
    decoder_kind: str = "mlp"     # "mlp" (EMP-M) or "detr" (EMP-D)
    ffn_mult: int = 5
    score_head: str = "onepass"   # "onepass" (focal token -> K logits) or "per_mode"
    detr_keys: str = "temporal"   # "temporal" (per-step + focal token) or "pooled"

    def __post_init__(self):
        if self.D % self.heads != 0:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        for name in ("agent_encoder_depth", "scene_encoder_depth", "decoder_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.decoder_kind not in ("mlp", "detr"):
            raise ValueError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.score_head not in ("onepass", "per_mode"):
            raise ValueError(f"unknown score_head {self.score_head!r}")
        if self.detr_keys not in ("temporal", "pooled"):
            raise ValueError(f"unknown detr_keys {self.detr_keys!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def emp_m_config(**overrides) -> ModelConfig:
    """Default EMP-M (MLP decoder) configuration."""
    return ModelConfig(**{"decoder_kind": "mlp", "score_head": "onepass", **overrides})


def emp_d_config(**overrides) -> ModelConfig:
    """Default EMP-D (query decoder) configuration."""
    return ModelConfig(**{"decoder_kind": "detr", "score_head": "per_mode", **overrides})


@dataclass
class MultiModalPrediction:
    trajectories: np.ndarray  # (K, T_f, 2), focal center frame, meters
    scores: np.ndarray        # (K,), positive, sums to 1

    def __post_init__(self):
        if not np.all(np.isfinite(self.trajectories)) or not np.all(np.isfinite(self.scores)):
            raise ValueError("prediction contains non-finite values")
        if abs(float(self.scores.sum()) - 1.0) > 1e-6 or np.any(self.scores <= 0):
            raise ValueError("scores must be a probability distribution")


class ParameterStore:
    """Named map of learnable tensors; names are unique dotted paths."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter path {name!r}")
        p = Tensor(data, requires_grad=True, dtype=data.dtype)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self._params.values())


# ----------------------------------------------------------------------
# parameter construction
# ----------------------------------------------------------------------

def _init_linear(store, rng, name, din, dout, dtype):
    bound = 1.0 / math.sqrt(din)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(din, dout)).astype(dtype))
    store.add(f"{name}.b", np.zeros(dout, dtype=dtype))


def _init_norm(store, name, d, dtype):
    store.add(f"{name}.g", np.ones(d, dtype=dtype))
    store.add(f"{name}.b", np.zeros(d, dtype=dtype))


def _init_embed(store, rng, name, n, d, dtype):
    store.add(name, rng.normal(0.0, 0.02, size=(n, d)).astype(dtype))


def _init_attn(store, rng, prefix, d, dtype):
    for part in ("wq", "wk", "wv", "wo"):
        _init_linear(store, rng, f"{prefix}.{part}", d, d, dtype)


def _init_block(store, rng, prefix, d, ffn_mult, dtype):
    _init_norm(store, f"{prefix}.norm1", d, dtype)
    _init_attn(store, rng, f"{prefix}.attn", d, dtype)
    _init_norm(store, f"{prefix}.norm2", d, dtype)
    _init_linear(store, rng, f"{prefix}.ffn.fc1", d, ffn_mult * d, dtype)
    _init_linear(store, rng, f"{prefix}.ffn.fc2", ffn_mult * d, d, dtype)


def build_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    store = ParameterStore()
    rng = stream(seed, 1)
    d, m = config.D, config.ffn_mult

    _init_linear(store, rng, "agent_encoder.in_proj", 5, d, dtype)
    for i in range(config.agent_encoder_depth):
        _init_block(store, rng, f"agent_encoder.block{i}", d, m, dtype)
    _init_norm(store, "agent_encoder.norm", d, dtype)
    _init_embed(store, rng, "agent_encoder.type_embed", config.agent_type_count, d, dtype)

    _init_linear(store, rng, "lane_encoder.point1", 3, d, dtype)
    _init_norm(store, "lane_encoder.point_norm", d, dtype)
    _init_linear(store, rng, "lane_encoder.point2", d, d, dtype)
    _init_norm(store, "lane_encoder.seg_norm", d, dtype)
    _init_linear(store, rng, "lane_encoder.seg", d, d, dtype)
    _init_embed(store, rng, "lane_encoder.type_embed", config.lane_type_count, d, dtype)

    _init_linear(store, rng, "pos_embed.fc1", 4, d, dtype)
    _init_linear(store, rng, "pos_embed.fc2", d, d, dtype)

    for i in range(config.scene_encoder_depth):
        _init_block(store, rng, f"scene_encoder.block{i}", d, m, dtype)
    _init_norm(store, "scene_encoder.norm", d, dtype)

    if config.decoder_kind == "mlp":
        _init_embed(store, rng, "decoder.mode_embed", config.K, d, dtype)
    else:
        _init_embed(store, rng, "decoder.query_embed", config.K, d, dtype)
        for i in range(config.decoder_depth):
            prefix = f"decoder.block{i}"
            _init_norm(store, f"{prefix}.norm_agent", d, dtype)
            _init_attn(store, rng, f"{prefix}.cross_agent", d, dtype)
            _init_norm(store, f"{prefix}.norm_lane", d, dtype)
            _init_attn(store, rng, f"{prefix}.cross_lane", d, dtype)
            _init_norm(store, f"{prefix}.norm_ffn", d, dtype)
            _init_linear(store, rng, f"{prefix}.ffn.fc1", d, m * d, dtype)
            _init_linear(store, rng, f"{prefix}.ffn.fc2", m * d, d, dtype)
        _init_norm(store, "decoder.norm", d, dtype)

    _init_linear(store, rng, "decoder.traj.fc1", d, 2 * d, dtype)
    _init_linear(store, rng, "decoder.traj.fc2", 2 * d, 2 * config.T_f, dtype)
    _init_linear(store, rng, "decoder.score.fc1", d, 2 * d, dtype)
    if config.score_head == "onepass":
        _init_linear(store, rng, "decoder.score.fc2", 2 * d, config.K, dtype)
    else:
        _init_linear(store, rng, "decoder.score.fc2", 2 * d, 1, dtype)
    return store


def param_count(config: ModelConfig) -> int:
    """Exact number of learnable scalars for a configuration."""
    return build_parameters(config, seed=0).param_count()


# ----------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------

@dataclass
class SceneBatch:
    size: int
    a_max: int
    l_max: int
    agent_features: np.ndarray   # (B, A, T, 5)
    agent_step_mask: np.ndarray  # (B, A, T) bool
    agent_type_ids: np.ndarray   # (B, A)
    agent_valid: np.ndarray      # (B, A) bool, real (non-padded) agents
    lane_features: np.ndarray    # (B, L, N, 3)
    lane_type_ids: np.ndarray    # (B, L)
    lane_valid: np.ndarray       # (B, L) bool
    centers_rel: np.ndarray      # (B, A+L, 4) focal-relative positions, world heading
    entity_mask: np.ndarray      # (B, A+L) bool
    focal_index: np.ndarray      # (B,)
    focal_target: np.ndarray     # (B, T_f, 2)
    future_targets: np.ndarray   # (B, A, T_f, 2)
    future_valid: np.ndarray     # (B, A, T_f) bool
    scenario_ids: list[str]


def assemble_batch(scenes: Sequence[PreprocessedScene], config: ModelConfig) -> SceneBatch:
    if not scenes:
        raise ValueError("empty batch")
    for s in scenes:
        if s.agent_features.shape[1] != config.T_h:
            raise ValueError(
                f"scene {s.scenario_id}: T_h={s.agent_features.shape[1]} vs config {config.T_h}"
            )
        if s.num_lanes and s.lane_features.shape[1] != config.N:
            raise ValueError(
                f"scene {s.scenario_id}: N={s.lane_features.shape[1]} vs config {config.N}"
            )
        if np.any(s.agent_type_ids >= config.agent_type_count) or (
            s.num_lanes and np.any(s.lane_type_ids >= config.lane_type_count)
        ):
            raise ValueError(f"scene {s.scenario_id}: type id out of range")

    b = len(scenes)
    a_max = max(s.num_agents for s in scenes)
    l_max = max(s.num_lanes for s in scenes)
    th, tf, n = config.T_h, config.T_f, config.N

    batch = SceneBatch(
        size=b,
        a_max=a_max,
        l_max=l_max,
        agent_features=np.zeros((b, a_max, th, 5)),
        agent_step_mask=np.zeros((b, a_max, th), dtype=bool),
        agent_type_ids=np.zeros((b, a_max), dtype=np.int64),
        agent_valid=np.zeros((b, a_max), dtype=bool),
        lane_features=np.zeros((b, l_max, n, 3)),
        lane_type_ids=np.zeros((b, l_max), dtype=np.int64),
        lane_valid=np.zeros((b, l_max), dtype=bool),
        centers_rel=np.zeros((b, a_max + l_max, 4)),
        entity_mask=np.zeros((b, a_max + l_max), dtype=bool),
        focal_index=np.zeros(b, dtype=np.int64),
        focal_target=np.zeros((b, tf, 2)),
        future_targets=np.zeros((b, a_max, tf, 2)),
        future_valid=np.zeros((b, a_max, tf), dtype=bool),
        scenario_ids=[s.scenario_id for s in scenes],
    )
    batch.centers_rel[:, :, 2] = 1.0       # padded poses stay unit-normalized
    batch.agent_step_mask[:, :, 0] = True  # padded agents: one dummy step so
    # the temporal attention always has a key; their tokens are masked out
    # of the scene by entity_mask.

    for i, s in enumerate(scenes):
        a, l = s.num_agents, s.num_lanes
        batch.agent_features[i, :a] = s.agent_features
        batch.agent_step_mask[i, :a] = s.agent_step_mask
        batch.agent_type_ids[i, :a] = s.agent_type_ids
        batch.agent_valid[i, :a] = True
        if l:
            batch.lane_features[i, :l] = s.lane_features
            batch.lane_type_ids[i, :l] = s.lane_type_ids
            batch.lane_valid[i, :l] = True
        focal_xy = s.agent_centers[s.focal_index, :2]
        batch.centers_rel[i, :a, :2] = s.agent_centers[:, :2] - focal_xy
        batch.centers_rel[i, :a, 2:] = s.agent_centers[:, 2:]
        if l:
            batch.centers_rel[i, a_max:a_max + l, :2] = s.lane_centers[:, :2] - focal_xy
            batch.centers_rel[i, a_max:a_max + l, 2:] = s.lane_centers[:, 2:]
        batch.entity_mask[i, :a] = True
        batch.entity_mask[i, a_max:a_max + l] = True
        batch.focal_index[i] = s.focal_index
        batch.focal_target[i] = s.focal_future_target
        batch.future_targets[i, :a] = s.all_agent_future_targets
        batch.future_valid[i, :a] = s.future_valid
    return batch


@dataclass
class ForwardOutput:
    trajectories: Tensor  # (B, K, T_f, 2)
    score_logits: Tensor  # (B, K)
    agent_tokens: Tensor  # (B, A, D) scene-encoded agent rows
    batch: SceneBatch


# ----------------------------------------------------------------------
# the model
# ----------------------------------------------------------------------

class EmpModel:
    def __init__(
        self,
        config: ModelConfig,
        params: Optional[ParameterStore] = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.seed = seed
        self.params = params if params is not None else build_parameters(config, seed, self.dtype)

    # -- small layers ---------------------------------------------------
    def _lin(self, name: str, x: Tensor) -> Tensor:
        return t.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return t.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attn(self, name: str, q: Tensor, kv: Tensor, key_mask) -> Tensor:
        p = self.params
        return t.multi_head_attention(
            q, kv, kv, self.config.heads,
            p[f"{name}.wq.w"], p[f"{name}.wq.b"],
            p[f"{name}.wk.w"], p[f"{name}.wk.b"],
            p[f"{name}.wv.w"], p[f"{name}.wv.b"],
            p[f"{name}.wo.w"], p[f"{name}.wo.b"],
            key_mask=key_mask,
        )

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        return self._lin(f"{prefix}.fc2", t.gelu(self._lin(f"{prefix}.fc1", x)))

    def _encoder_block(self, prefix: str, x: Tensor, key_mask) -> Tensor:
        u = self._norm(f"{prefix}.norm1", x)
        x = t.add(x, self._attn(f"{prefix}.attn", u, u, key_mask))
        x = t.add(x, self._ffn(f"{prefix}.ffn", self._norm(f"{prefix}.norm2", x)))
        return x

    def _tensor(self, arr: np.ndarray) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))

    # -- encoders ---------------------------------------------------------
    def _agent_encoder(self, feats: np.ndarray, step_mask: np.ndarray, type_ids: np.ndarray):
        """feats (B, A, T, 5) -> tokens (B, A, D) and per-step embeddings
        (B*A, T, D) after the final norm (pre-pool)."""
        b, a, th, _ = feats.shape
        if not np.all(np.any(step_mask, axis=-1)):
            raise t.InvalidMaskError("agent with zero observed steps")
        x = self._tensor(feats.reshape(b * a, th, 5))
        h = self._lin("agent_encoder.in_proj", x)
        flat_mask = step_mask.reshape(b * a, th)
        for i in range(self.config.agent_encoder_depth):
            h = self._encoder_block(f"agent_encoder.block{i}", h, flat_mask)
        h = self._norm("agent_encoder.norm", h)
        pool_bias = np.where(flat_mask, 0.0, t.MASK_FILL).astype(self.dtype)
        pooled = t.reduce_max(t.add(h, Tensor(pool_bias[:, :, None])), axis=1)
        type_vec = t.gather_rows(self.params["agent_encoder.type_embed"], type_ids.reshape(-1))
        tokens = t.reshape(t.add(pooled, type_vec), (b, a, self.config.D))
        return tokens, h

    def _lane_encoder(self, feats: np.ndarray, type_ids: np.ndarray) -> Tensor:
        """feats (B, L, N, 3) -> tokens (B, L, D)."""
        b, l, n, _ = feats.shape
        x = self._tensor(feats.reshape(b * l, n, 3))
        h = self._lin("lane_encoder.point1", x)
        h = t.relu(self._norm("lane_encoder.point_norm", h))
        h = self._lin("lane_encoder.point2", h)
        pooled = t.reduce_max(h, axis=1)
        seg = self._lin("lane_encoder.seg", t.relu(self._norm("lane_encoder.seg_norm", pooled)))
        type_vec = t.gather_rows(self.params["lane_encoder.type_embed"], type_ids.reshape(-1))
        return t.reshape(t.add(seg, type_vec), (b, l, self.config.D))

    def _positional(self, centers: np.ndarray) -> Tensor:
        norm = centers[..., 2] ** 2 + centers[..., 3] ** 2
        if np.any(np.abs(norm - 1.0) > 1e-6):
            raise t.ContractViolation("center pose direction is not unit-normalized")
        h = self._lin("pos_embed.fc1", self._tensor(centers))
        return self._lin("pos_embed.fc2", t.gelu(h))

    def _scene_encoder(self, agent_tokens: Tensor, lane_tokens: Tensor,
                       centers: np.ndarray, entity_mask: np.ndarray) -> Tensor:
        if not np.all(np.any(entity_mask, axis=-1)):
            raise t.InvalidMaskError("scene with all entities masked")
        h = t.concat([agent_tokens, lane_tokens], axis=1)
        h = t.add(h, self._positional(centers))
        for i in range(self.config.scene_encoder_depth):
            h = self._encoder_block(f"scene_encoder.block{i}", h, entity_mask)
        return self._norm("scene_encoder.norm", h)

    # -- decoders ---------------------------------------------------------
    def _traj_head(self, modes: Tensor) -> Tensor:
        """(B, K, D) -> (B, K, T_f, 2)"""
        h = self._lin("decoder.traj.fc2", t.relu(self._lin("decoder.traj.fc1", modes)))
        b, k = h.shape[0], h.shape[1]
        return t.reshape(h, (b, k, self.config.T_f, 2))

    def _score_head(self, modes: Tensor, focal_token: Tensor) -> Tensor:
        """-> (B, K) logits."""
        if self.config.score_head == "onepass":
            h = t.relu(self._lin("decoder.score.fc1", focal_token))
            return self._lin("decoder.score.fc2", h)
        h = t.relu(self._lin("decoder.score.fc1", modes))
        return t.reshape(self._lin("decoder.score.fc2", h), modes.shape[:2])

    def _decode_mlp(self, focal_token: Tensor):
        """focal_token (B, D) -> trajectories and score logits."""
        b = focal_token.shape[0]
        modes = t.add(
            t.reshape(focal_token, (b, 1, self.config.D)),
            self.params["decoder.mode_embed"],
        )
        return self._traj_head(modes), self._score_head(modes, focal_token)

    def _decode_detr(self, focal_seq: Tensor, focal_step_mask: np.ndarray,
                     lane_tokens: Tensor, lane_mask: np.ndarray, focal_token: Tensor):
        """Query decoder. focal_seq (B, T, D); lane_tokens (B, L, D) from the
        scene encoder; focal_token (B, D) appended as an extra key."""
        cfg = self.config
        b = focal_seq.shape[0]
        if cfg.detr_keys == "temporal":
            keys = t.concat([focal_seq, t.reshape(focal_token, (b, 1, cfg.D))], axis=1)
            key_mask = np.concatenate(
                [focal_step_mask, np.ones((b, 1), dtype=bool)], axis=1
            )
        else:
            keys = t.reshape(focal_token, (b, 1, cfg.D))
            key_mask = np.ones((b, 1), dtype=bool)

        l_max = lane_tokens.shape[1]
        has_lanes = np.any(lane_mask, axis=1) if l_max else np.zeros(b, dtype=bool)
        lane_mask_safe = None
        if l_max and np.any(has_lanes):
            lane_mask_safe = lane_mask.copy()
            lane_mask_safe[~has_lanes, 0] = True  # placeholder key; update zeroed below
            lane_gate = Tensor(has_lanes.astype(self.dtype)[:, None, None])

        q = t.add(
            t.reshape(self.params["decoder.query_embed"], (1, cfg.K, cfg.D)),
            Tensor(np.zeros((b, 1, 1), dtype=self.dtype)),
        )
        for i in range(cfg.decoder_depth):
            prefix = f"decoder.block{i}"
            u = self._norm(f"{prefix}.norm_agent", q)
            q = t.add(q, self._attn(f"{prefix}.cross_agent", u, keys, key_mask))
            if lane_mask_safe is not None:
                u = self._norm(f"{prefix}.norm_lane", q)
                upd = self._attn(f"{prefix}.cross_lane", u, lane_tokens, lane_mask_safe)
                q = t.add(q, t.mul(upd, lane_gate))
            q = t.add(q, self._ffn(f"{prefix}.ffn", self._norm(f"{prefix}.norm_ffn", q)))
        q = self._norm("decoder.norm", q)
        return self._traj_head(q), self._score_head(q, focal_token)

    # -- full forward -------------------------------------------------------
    def forward(self, batch: SceneBatch) -> ForwardOutput:
        cfg = self.config
        b, a_max, l_max = batch.size, batch.a_max, batch.l_max

        agent_tokens, step_emb = self._agent_encoder(
            batch.agent_features, batch.agent_step_mask, batch.agent_type_ids
        )
        if l_max:
            lane_tokens = self._lane_encoder(batch.lane_features, batch.lane_type_ids)
        else:
            lane_tokens = Tensor(np.zeros((b, 0, cfg.D), dtype=self.dtype))

        scene = self._scene_encoder(
            agent_tokens, lane_tokens, batch.centers_rel, batch.entity_mask
        )

        flat_focal = np.arange(b) * a_max + batch.focal_index
        focal_seq = t.gather_rows(step_emb, flat_focal)  # (B, T, D)
        focal_step_mask = batch.agent_step_mask[np.arange(b), batch.focal_index]

        scene_flat = t.reshape(scene, (b * (a_max + l_max), cfg.D))
        focal_token = t.gather_rows(scene_flat, np.arange(b) * (a_max + l_max) + batch.focal_index)
        scene_agents = t.slice_axis(scene, 1, 0, a_max)
        scene_lanes = t.slice_axis(scene, 1, a_max, a_max + l_max)

        if cfg.decoder_kind == "mlp":
            traj, logits = self._decode_mlp(focal_token)
        else:
            traj, logits = self._decode_detr(
                focal_seq, focal_step_mask, scene_lanes, batch.lane_valid, focal_token
            )
        return ForwardOutput(traj, logits, scene_agents, batch)

    # -- inference ----------------------------------------------------------
    def predict_batch(self, scenes: Sequence[PreprocessedScene]) -> list[MultiModalPrediction]:
        batch = assemble_batch(scenes, self.config)
        with t.no_grad():
            out = self.forward(batch)
        traj = out.trajectories.numpy()
        scores = _stable_softmax(out.score_logits.numpy())
        return [
            MultiModalPrediction(np.array(traj[i], dtype=float), np.array(scores[i], dtype=float))
            for i in range(batch.size)
        ]

    def predict(self, scene: PreprocessedScene) -> MultiModalPrediction:
        return self.predict_batch([scene])[0]

    # -- public single-scene encoder/decoder surfaces ------------------------
    def encode_agents(self, features, step_mask, type_ids, focal_index: int = 0):
        """(A, T, 5) -> agent tokens (A, D) and the focal agent's per-step
        embeddings (T, D)."""
        feats = np.asarray(features)[None]
        mask = np.asarray(step_mask, dtype=bool)[None]
        tokens, step_emb = self._agent_encoder(feats, mask, np.asarray(type_ids)[None])
        a, th = feats.shape[1], feats.shape[2]
        seq = t.gather_rows(step_emb, np.array([focal_index]))
        return t.reshape(tokens, (a, self.config.D)), t.reshape(seq, (th, self.config.D))

    def encode_lanes(self, lane_features, type_ids) -> Tensor:
        feats = np.asarray(lane_features)[None]
        out = self._lane_encoder(feats, np.asarray(type_ids)[None])
        return t.reshape(out, (feats.shape[1], self.config.D))

    def positional_embedding(self, centers) -> Tensor:
        return self._positional(np.asarray(centers))

    def encode_scene(self, agent_tokens: Tensor, lane_tokens: Tensor, centers, entity_mask) -> Tensor:
        a, l = agent_tokens.shape[0], lane_tokens.shape[0]
        out = self._scene_encoder(
            t.reshape(agent_tokens, (1, a, self.config.D)),
            t.reshape(lane_tokens, (1, l, self.config.D)),
            np.asarray(centers)[None],
            np.asarray(entity_mask, dtype=bool)[None],
        )
        return t.reshape(out, (a + l, self.config.D))

    def decode_mlp(self, focal_token: Tensor) -> MultiModalPrediction:
        traj, logits = self._decode_mlp(t.reshape(focal_token, (1, self.config.D)))
        return _to_prediction(traj, logits)

    def decode_detr(self, focal_sequence: Tensor, focal_step_mask, lane_tokens_scene: Tensor,
                    lane_mask, focal_token: Tensor) -> MultiModalPrediction:
        cfg = self.config
        th = focal_sequence.shape[0]
        l = lane_tokens_scene.shape[0]
        traj, logits = self._decode_detr(
            t.reshape(focal_sequence, (1, th, cfg.D)),
            np.asarray(focal_step_mask, dtype=bool)[None],
            t.reshape(lane_tokens_scene, (1, l, cfg.D)),
            np.asarray(lane_mask, dtype=bool).reshape(1, l),
            t.reshape(focal_token, (1, cfg.D)),
        )
        return _to_prediction(traj, logits)


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _to_prediction(traj: Tensor, logits: Tensor) -> MultiModalPrediction:
    scores = _stable_softmax(logits.numpy().reshape(-1))
    return MultiModalPrediction(
        np.array(traj.numpy()[0], dtype=float), np.array(scores, dtype=float)
    )


# ----------------------------------------------------------------------
# checkpoints: one JSON header line, then per parameter (lexicographic
# path order) one JSON meta line followed by raw float32 little-endianData
# ----------------------------------------------------------------------

def save_checkpoint(params: ParameterStore, config: ModelConfig, path, seed: int = 0,
                    extra: Optional[dict] = None) -> None:
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "config": config.to_dict(),
        "seed": seed,
        "init": INIT_SCHEME,
        "dtype": "float32",
    }
    if extra:
        header.update(extra)
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":"), sort_keys=True).encode() + b"\n")
        for name in sorted(params.names()):
            arr = params[name].data.astype("<f4")
            meta = {"param": name, "shape": list(arr.shape), "bytes": arr.nbytes}
            f.write(json.dumps(meta, separators=(",", ":")).encode() + b"\n")
            f.write(arr.tobytes(order="C"))
            f.write(b"\n")


def load_checkpoint(path) -> tuple[ParameterStore, ModelConfig]:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"unreadable checkpoint header: {e}") from e
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise CheckpointError(
                f"unsupported checkpoint schema {header.get('schema')!r}"
            )
        config = ModelConfig.from_dict(header["config"])
        expected = build_parameters(config, seed=0, dtype=np.float32)
        store = ParameterStore()
        while True:
            meta_line = f.readline()
            if not meta_line.strip():
                break
            meta = json.loads(meta_line)
            name, shape, nbytes = meta["param"], tuple(meta["shape"]), meta["bytes"]
            raw = f.read(nbytes)
            if len(raw) != nbytes or f.read(1) != b"\n":
                raise CheckpointError(f"truncated tensor data for {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
            if name not in expected:
                raise CheckpointError(f"unexpected parameter {name!r} for this config")
            if expected[name].shape != shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: file has {shape}, "
                    f"config requires {expected[name].shape}"
                )
            store.add(name, arr)
    missing = sorted(set(expected.names()) - set(store.names()))
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {missing[:3]}...")
    return store, config
