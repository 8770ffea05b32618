"""Loss construction, AdamW, schedule and the training loop.

Per scenario the loss is a Huber regression term on the best-fitting mode
(smallest average displacement), a cross-entropy term pushing the scores
toward that mode, and an auxiliary Huber term on a single-trajectory
head applied to every agent token; the three are summed with unit weights
and averaged over the batch.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

import emp.tensor as t
from emp.model import (
    EmpModel,
    ForwardOutput,
    ModelConfig,
    ParameterStore,
    assemble_batch,
)
from emp.rng import stream
from emp.scenario import PreprocessedScene
from emp.tensor import Tensor

LOG_FIELDS = [
    "epoch", "lr", "loss_total", "loss_reg", "loss_cls", "loss_aux",
    "val_minade6", "val_minfde6", "val_mr6", "val_brier_minfde6", "wall_seconds",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at optimizer step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 96
    peak_lr: float = 1e-3
    final_lr: float = 1e-4
    warmup_epochs: int = 10
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    huber_delta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (self.warmup_epochs < self.epochs):
            raise ValueError("warmup_epochs must be < epochs")
        if not (self.peak_lr > self.final_lr > 0):
            raise ValueError("need peak_lr > final_lr > 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def huber_elementwise(pred: Tensor, target: np.ndarray, delta: float) -> Tensor:
    """Elementwise Huber: quadratic below delta, linear above."""
    r = t.sub(pred, Tensor(np.asarray(target, dtype=pred.data.dtype)))
    a = t.absolute(r)
    quad = t.mul(t.mul(r, r), 0.5)
    lin = t.mul(t.sub(a, 0.5 * delta), delta)
    return t.where(a.data <= delta, quad, lin)


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean elementwise Huber loss."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise t.ShapeError(f"huber_loss shapes differ: {pred.shape} vs {target.shape}")
    return t.mean(huber_elementwise(pred, target, delta))


def best_mode(prediction, target) -> int:
    """Index of the mode with smallest average pointwise L2 error; ties go
    to the lowest index."""
    pred = prediction.numpy() if isinstance(prediction, Tensor) else np.asarray(prediction)
    target = np.asarray(target)
    ade = np.linalg.norm(pred - target[None], axis=-1).mean(axis=-1)
    return int(np.argmin(ade))


def classification_loss(scores_logits: Tensor, best: int) -> Tensor:
    """Cross-entropy of softmax(logits) against one-hot(best)."""
    k = scores_logits.shape[0]
    if not 0 <= best < k:
        raise t.ContractViolation(f"best mode {best} out of range for K={k}")
    m = t.reduce_max(scores_logits, axis=0)
    lse = t.add(t.log(t.reduce_sum(t.exp(t.sub(scores_logits, m)))), m)
    picked = t.reduce_sum(t.gather_rows(scores_logits, np.array([best])))
    return t.sub(lse, picked)


def auxiliary_loss(
    agent_tokens: Tensor,
    aux_w: Tensor,
    aux_b: Tensor,
    futures: np.ndarray,
    future_masks: np.ndarray,
    delta: float = 1.0,
) -> Tensor:
    """Huber loss of the single-trajectory head over all agents, averaged
    over valid future steps. Zero (with zero gradient) when nothing is valid."""
    a = agent_tokens.shape[0]
    tf = futures.shape[1]
    pred = t.reshape(t.linear(agent_tokens, aux_w, aux_b), (a, tf, 2))
    elem = huber_elementwise(pred, futures, delta)
    valid = np.asarray(future_masks, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return t.mul(t.reduce_sum(elem), 0.0)
    weights = (valid[:, :, None] / (2.0 * n)).astype(elem.data.dtype)
    return t.reduce_sum(t.mul(elem, Tensor(weights)))


def total_loss(
    prediction: Tensor,
    scores_logits: Tensor,
    target: np.ndarray,
    agent_tokens: Tensor,
    aux_w: Tensor,
    aux_b: Tensor,
    futures: np.ndarray,
    future_masks: np.ndarray,
    delta: float = 1.0,
) -> tuple[Tensor, dict]:
    """Single-scenario loss: Huber on the best mode + cross-entropy on the
    best index + auxiliary term, unit weights."""
    best = best_mode(prediction, target)
    k = prediction.shape[0]
    best_traj = t.reshape(
        t.gather_rows(prediction, np.array([best])), prediction.shape[1:]
    )
    reg = huber_loss(best_traj, target, delta)
    cls = classification_loss(scores_logits, best)
    aux = auxiliary_loss(agent_tokens, aux_w, aux_b, futures, future_masks, delta)
    total = t.add(t.add(reg, cls), aux)
    parts = {
        "loss_reg": reg.item(),
        "loss_cls": cls.item(),
        "loss_aux": aux.item(),
        "best": best,
    }
    return total, parts


def batch_loss(out: ForwardOutput, aux_w: Tensor, aux_b: Tensor, delta: float = 1.0):
    """Mean per-scenario loss over a forward batch."""
    batch = out.batch
    b, k = out.trajectories.shape[0], out.trajectories.shape[1]
    tf = batch.focal_target.shape[1]
    traj_np = out.trajectories.numpy()
    ade = np.linalg.norm(traj_np - batch.focal_target[:, None], axis=-1).mean(axis=-1)
    best = np.argmin(ade, axis=1)  # (B,)

    flat = t.reshape(out.trajectories, (b * k, tf, 2))
    best_rows = t.gather_rows(flat, np.arange(b) * k + best)
    reg = t.mean(huber_elementwise(best_rows, batch.focal_target, delta))

    logits = out.score_logits
    m = t.reduce_max(logits, axis=1, keepdims=True)
    lse = t.add(
        t.log(t.reduce_sum(t.exp(t.sub(logits, m)), axis=1)),
        t.reshape(m, (b,)),
    )
    picked = t.reshape(
        t.gather_rows(t.reshape(logits, (b * k, 1)), np.arange(b) * k + best), (b,)
    )
    cls = t.mean(t.sub(lse, picked))

    a_max = batch.a_max
    pred = t.reshape(t.linear(out.agent_tokens, aux_w, aux_b), (b, a_max, tf, 2))
    elem = huber_elementwise(pred, batch.future_targets, delta)
    valid = batch.future_valid
    counts = valid.reshape(b, -1).sum(axis=1)
    scale = np.where(counts > 0, 1.0 / (2.0 * np.maximum(counts, 1) * b), 0.0)
    weights = (valid[:, :, :, None] * scale[:, None, None, None]).astype(elem.data.dtype)
    aux = t.reduce_sum(t.mul(elem, Tensor(weights)))

    total = t.add(t.add(reg, cls), aux)
    parts = {"loss_reg": reg.item(), "loss_cls": cls.item(), "loss_aux": aux.item()}
    return total, parts


# ----------------------------------------------------------------------
# optimizer and schedule
# ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, named_params, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        m = {name: np.zeros_like(p.data) for name, p in named_params}
        v = {name: np.zeros_like(arr) for name, arr in m.items()}
        return cls(m=m, v=v, beta1=beta1, beta2=beta2, eps=eps)


def adamw_step(
    named_params: Sequence[tuple[str, Tensor]],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> None:
    """One AdamW update with bias correction; weight decay is decoupled and
    applied multiplicatively before the adaptive step."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in named_params:
        g = grads[name]
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to peak_lr, then cosine decay to final_lr.
    Exact at the boundaries: peak at the end of warmup, final_lr at the
    last step."""
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    if step < warmup:
        return cfg.peak_lr * step / warmup
    last = total - 1
    if last <= warmup:
        return cfg.final_lr if step >= last else cfg.peak_lr
    progress = min((step - warmup) / (last - warmup), 1.0)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so the global L2 norm is at most clip_norm."""
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = math.sqrt(sq)
    if norm > clip_norm:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return grads


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: EmpModel
    best_params: ParameterStore
    aux_params: ParameterStore
    log: list[dict] = field(default_factory=list)


def _clone_store(store: ParameterStore) -> ParameterStore:
    out = ParameterStore()
    for name, p in store.items():
        out.add(name, p.data.copy())
    return out


def _build_aux_head(config: ModelConfig, seed: int, dtype) -> ParameterStore:
    store = ParameterStore()
    rng = stream(seed, 3)
    bound = 1.0 / math.sqrt(config.D)
    store.add("aux_head.w", rng.uniform(-bound, bound, size=(config.D, 2 * config.T_f)).astype(dtype))
    store.add("aux_head.b", np.zeros(2 * config.T_f, dtype=dtype))
    return store


def train(
    train_scenes: Sequence[PreprocessedScene],
    model_config: ModelConfig,
    cfg: TrainConfig,
    val_scenes: Optional[Sequence[PreprocessedScene]] = None,
    dtype=np.float32,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train a model from scratch; deterministic in cfg.seed.

    Validation metrics are computed every epoch on ``val_scenes`` (the
    training set itself when none is given); the best-by-minFDE checkpoint
    is retained alongside the last.
    """
    from emp.metrics import evaluate_pairs

    if not train_scenes:
        raise ValueError("training dataset is empty")
    for s in train_scenes:
        if not np.all(s.future_valid[s.focal_index]):
            raise ValueError(
                f"scene {s.scenario_id}: focal future is not fully observed"
            )

    model = EmpModel(model_config, seed=cfg.seed, dtype=dtype)
    aux = _build_aux_head(model_config, cfg.seed, model.dtype)
    named = list(model.params.items()) + list(aux.items())
    state = OptimizerState.for_params(named, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = stream(cfg.seed, 2)

    eval_scenes = list(val_scenes) if val_scenes else list(train_scenes)
    eval_targets = [s.focal_future_target for s in eval_scenes]
    eval_ids = [s.scenario_id for s in eval_scenes]

    n = len(train_scenes)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = (n + bs - 1) // bs
    global_step = 0
    best_fde = math.inf
    best_params = _clone_store(model.params)
    log: list[dict] = []

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_parts = {"loss_total": 0.0, "loss_reg": 0.0, "loss_cls": 0.0, "loss_aux": 0.0}
        lr = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch = assemble_batch([train_scenes[i] for i in idx], model_config)
            out = model.forward(batch)
            loss, parts = batch_loss(out, aux["aux_head.w"], aux["aux_head.b"], cfg.huber_delta)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(global_step, value)
            for _, p in named:
                p.grad = None
            t.backward(loss)
            grads = {
                name: p.grad if p.grad is not None else np.zeros_like(p.data)
                for name, p in named
            }
            clip_gradients(grads, cfg.clip_norm)
            lr = lr_at(global_step, steps_per_epoch, cfg)
            adamw_step(named, grads, state, lr, cfg.weight_decay)
            global_step += 1
            epoch_parts["loss_total"] += value
            for key in ("loss_reg", "loss_cls", "loss_aux"):
                epoch_parts[key] += parts[key]

        for key in epoch_parts:
            epoch_parts[key] /= steps_per_epoch
        report = evaluate_pairs(model.predict_batch(eval_scenes), eval_targets, eval_ids)
        record = {
            "epoch": epoch,
            "lr": lr,
            **epoch_parts,
            "val_minade6": report.minade_6,
            "val_minfde6": report.minfde_6,
            "val_mr6": report.mr_6,
            "val_brier_minfde6": report.brier_minfde_6,
            "wall_seconds": time.perf_counter() - tic,
        }
        log.append(record)
        if progress:
            progress(record)
        if report.minfde_6 < best_fde:
            best_fde = report.minfde_6
            best_params = _clone_store(model.params)

    return TrainResult(model=model, best_params=best_params, aux_params=aux, log=log)


def write_training_log(records: Sequence[dict], ndjson_path, csv_path) -> None:
    """Emit the per-epoch log as newline-delimited records plus a CSV mirror."""
    with open(ndjson_path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({k: rec[k] for k in LOG_FIELDS}, separators=(",", ":")) + "\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec[k] for k in LOG_FIELDS})
