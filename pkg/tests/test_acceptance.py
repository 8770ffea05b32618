"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they stream.
"""

import functools
import json
import math
import time

import numpy as np
import pytest

import emp.tensor as t
from emp import cli
from emp.metrics import evaluate_pairs
from emp.model import (
    EmpModel,
    assemble_batch,
    emp_d_config,
    emp_m_config,
    param_count,
    save_checkpoint,
)
from emp.scenario import PreprocessedScene, SyntheticSpec, generate_synthetic, preprocess
from emp.tensor import Tensor
from emp.training import (
    LOG_FIELDS,
    OptimizerState,
    TrainConfig,
    _build_aux_head,
    adamw_step,
    batch_loss,
    clip_gradients,
    lr_at,
    train,
    write_training_log,
)

from gradcheck import finite_difference, relative_error
from test_metrics import brute_brier, brute_min_ade, brute_min_fde
from test_model import TOY
from test_scenario import transform_scenario


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException:
                print(f"[FAIL] {name}", flush=True)
                raise
            print(f"[PASS] {name}" + (f" — {detail}" if detail else ""), flush=True)
        return wrapper
    return deco


def fixed_scene(a=3, l=4, t_h=10, t_f=12, n=8, seed=0) -> PreprocessedScene:
    """Deterministic synthetic feature arrays with exact agent/lane counts."""
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((a, t_h, 5))
    mask = rng.random((a, t_h)) > 0.2
    mask[:, -1] = True
    mask[0] = True  # focal fully observed
    feats[:, :, 3] = np.arange(t_h)
    feats[:, :, 4] = mask
    feats[~mask] = 0.0
    feats[:, :, 3] = np.arange(t_h)
    angles = rng.uniform(-math.pi, math.pi, a)
    centers = np.column_stack([rng.uniform(-30, 30, (a, 2)),
                               np.cos(angles)[:, None], np.sin(angles)[:, None]])
    lane_feats = rng.standard_normal((l, n, 3))
    lane_feats[:, :, 2] = 1.0
    lane_angles = rng.uniform(-math.pi, math.pi, l)
    lane_centers = np.column_stack([rng.uniform(-40, 40, (l, 2)),
                                    np.cos(lane_angles)[:, None], np.sin(lane_angles)[:, None]])
    future_valid = rng.random((a, t_f)) > 0.2
    future_valid[0] = True
    futures = rng.standard_normal((a, t_f, 2)) * 5
    futures[~future_valid] = 0.0
    return PreprocessedScene(
        scenario_id=f"fixed-{seed}",
        agent_features=feats,
        agent_step_mask=mask,
        agent_centers=centers,
        agent_type_ids=rng.integers(0, 4, a),
        focal_index=0,
        lane_features=lane_feats,
        lane_centers=lane_centers,
        lane_type_ids=rng.integers(0, 3, l),
        focal_future_target=futures[0].copy(),
        all_agent_future_targets=futures,
        future_valid=future_valid,
    )


# ----------------------------------------------------------------------
# 1. gradient correctness
# ----------------------------------------------------------------------

def _loss_for_model(model, aux, scene):
    batch = assemble_batch([scene], model.config)
    out = model.forward(batch)
    loss, _ = batch_loss(out, aux["aux_head.w"], aux["aux_head.b"], 1.0)
    return loss


def _end_to_end_gradcheck(kind, scene, coords_per_tensor=3, tol=1e-4):
    config_fn = emp_m_config if kind == "mlp" else emp_d_config
    config = config_fn(D=16, heads=4, T_h=10, T_f=12, N=8, K=6)
    model = EmpModel(config, seed=2, dtype=np.float64)
    aux = _build_aux_head(config, 2, np.float64)
    named = list(model.params.items()) + list(aux.items())

    loss = _loss_for_model(model, aux, scene)
    for _, p in named:
        p.grad = None
    t.backward(loss)

    rng = np.random.default_rng(7)
    worst = 0.0
    for name, p in named:
        flat = p.data.reshape(-1)
        grad = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        for i in rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False):
            h = 1e-5
            orig = flat[i]
            flat[i] = orig + h
            up = _loss_for_model(model, aux, scene).item()
            flat[i] = orig - h
            down = _loss_for_model(model, aux, scene).item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = relative_error(np.array([grad[i]]), np.array([numeric]))
            assert err < tol, f"{kind} {name}[{i}]: rel err {err:.2e}"
            worst = max(worst, err)
    return worst


@criterion("gradient correctness: primitives + end-to-end EMP-M/EMP-D < 1e-4, < 60 s")
def test_gradient_correctness():
    tic = time.perf_counter()

    # every differentiable primitive, via the dedicated FD suites
    from test_tensor import (
        test_primitive_gradients,
        test_matmul_gradients_both_patterns,
        test_layer_norm_gradients,
        test_mha_gradients,
    )
    import test_tensor as tensor_suite

    for mark in test_primitive_gradients.pytestmark:
        if mark.name == "parametrize":
            for param in mark.args[1]:
                test_primitive_gradients(*param)
    test_matmul_gradients_both_patterns()
    test_layer_norm_gradients()
    test_mha_gradients()

    # end-to-end losses at toy size: D=16, A=3, L=4, T_h=10, T_f=12, K=6
    scene = fixed_scene(a=3, l=4, t_h=10, t_f=12, n=8, seed=4)
    worst_m = _end_to_end_gradcheck("mlp", scene)
    worst_d = _end_to_end_gradcheck("detr", scene)

    elapsed = time.perf_counter() - tic
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    return f"worst rel err EMP-M {worst_m:.2e}, EMP-D {worst_d:.2e}, {elapsed:.1f}s"


# ----------------------------------------------------------------------
# 2. parameter counts
# ----------------------------------------------------------------------

@criterion("parameter counts: defaults within ±20% of 2.0M / 3.2M, toy config exact")
def test_parameter_counts():
    m = param_count(emp_m_config())
    d = param_count(emp_d_config())
    assert abs(m - 2.0e6) / 2.0e6 < 0.20, f"EMP-M {m:,}"
    assert abs(d - 3.2e6) / 3.2e6 < 0.20, f"EMP-D {d:,}"
    assert d > m
    from test_model import test_param_count_toy_hand_enumeration
    test_param_count_toy_hand_enumeration()
    return f"EMP-M {m:,} ({(m - 2e6) / 2e6:+.1%}), EMP-D {d:,} ({(d - 3.2e6) / 3.2e6:+.1%})"


# ----------------------------------------------------------------------
# 3. metric oracle equivalence
# ----------------------------------------------------------------------

@criterion("metric oracle equivalence: 1000 instances vs brute force at 1e-9")
def test_metric_oracle_equivalence():
    from emp.metrics import brier_min_fde, min_ade, min_fde

    rng = np.random.default_rng(2024)
    for i in range(1000):
        k = int(rng.integers(1, 7))
        t_f = int(rng.integers(2, 20))
        pred = rng.standard_normal((6, t_f, 2)) * rng.uniform(0.5, 5)
        raw = rng.random(6) + 1e-3
        scores = raw / raw.sum()
        target = rng.standard_normal((t_f, 2)) * rng.uniform(0.5, 5)

        ade = min_ade(pred, scores, target, k)
        fde, idx = min_fde(pred, scores, target, k)
        brier = brier_min_fde(pred, scores, target, k)
        assert abs(ade - brute_min_ade(pred, scores, target, k)) < 1e-9
        exp_fde, exp_idx = brute_min_fde(pred, scores, target, k)
        assert abs(fde - exp_fde) < 1e-9 and idx == exp_idx
        assert abs(brier - brute_brier(pred, scores, target, k)) < 1e-9

        # report invariants on every instance
        assert min_fde(pred, scores, target, 6)[0] <= min_fde(pred, scores, target, 1)[0] + 1e-12
        assert min_ade(pred, scores, target, 6) <= min_ade(pred, scores, target, 1) + 1e-12
        assert brier_min_fde(pred, scores, target, 6) >= min_fde(pred, scores, target, 6)[0]
    return "1000/1000 instances matched"


# ----------------------------------------------------------------------
# 4. invariance suite
# ----------------------------------------------------------------------

@criterion("invariance suite: permutation / padding / masking / translation, 100 trials each")
def test_invariance_suite():
    config = emp_m_config(**TOY)
    model = EmpModel(config, seed=3, dtype=np.float64)
    detr = EmpModel(emp_d_config(**TOY), seed=3, dtype=np.float64)
    rng = np.random.default_rng(42)

    # lane-point permutation invariance
    for trial in range(100):
        feats = rng.standard_normal((2, 8, 3))
        feats[:, :, 2] = 1.0
        types = rng.integers(0, 3, 2)
        base = model.encode_lanes(feats, types).numpy()
        perm = rng.permutation(8)
        out = model.encode_lanes(feats[:, perm], types).numpy()
        assert np.array_equal(base, out), f"lane permutation trial {trial}"

    # scene-entity permutation equivariance (within agent / lane blocks)
    for trial in range(100):
        a, l = int(rng.integers(2, 5)), int(rng.integers(1, 5))
        tokens_a = Tensor(rng.standard_normal((a, 16)), dtype=np.float64)
        tokens_l = Tensor(rng.standard_normal((l, 16)), dtype=np.float64)
        ang = rng.uniform(-math.pi, math.pi, a + l)
        centers = np.column_stack([rng.uniform(-20, 20, (a + l, 2)),
                                   np.cos(ang)[:, None], np.sin(ang)[:, None]])
        mask = np.ones(a + l, dtype=bool)
        base = model.encode_scene(tokens_a, tokens_l, centers, mask).numpy()
        pa, pl = rng.permutation(a), rng.permutation(l)
        perm = np.concatenate([pa, a + pl])
        out = model.encode_scene(
            Tensor(tokens_a.numpy()[pa], dtype=np.float64),
            Tensor(tokens_l.numpy()[pl], dtype=np.float64),
            centers[perm], mask[perm],
        ).numpy()
        assert np.max(np.abs(out - base[perm])) <= 1e-6, f"scene permutation trial {trial}"

    # padding invariance through full predict
    for trial in range(100):
        scene = fixed_scene(a=int(rng.integers(2, 4)), l=int(rng.integers(1, 4)),
                            seed=1000 + trial)
        mdl = detr if trial % 2 else model
        single = mdl.predict_batch([scene])[0]
        bigger = fixed_scene(a=5, l=6, seed=2000 + trial)
        padded = mdl.predict_batch([scene, bigger])[0]
        drift = np.max(np.abs(single.trajectories - padded.trajectories))
        assert drift <= 1e-6, f"padding trial {trial}: drift {drift:.2e}"

    # masked-step insensitivity
    for trial in range(100):
        scene = fixed_scene(a=3, l=2, seed=3000 + trial)
        garbage = fixed_scene(a=3, l=2, seed=3000 + trial)
        hidden = ~garbage.agent_step_mask
        garbage.agent_features[hidden] = rng.standard_normal(garbage.agent_features[hidden].shape) * 20
        garbage.agent_features[:, :, 3] = np.arange(10)
        a = model.predict_batch([scene])[0]
        b = model.predict_batch([garbage])[0]
        assert np.max(np.abs(a.trajectories - b.trajectories)) <= 1e-6, f"mask trial {trial}"

    # scenario translation invariance of predict
    spec = SyntheticSpec(t_h=10, t_f=12)
    for trial in range(100):
        s = generate_synthetic(5000 + trial, 1, spec)[0]
        shift = rng.uniform(-300, 300, 2)
        mdl = detr if trial % 2 else model
        base = mdl.predict(preprocess(s, 150.0, 8))
        moved = mdl.predict(preprocess(transform_scenario(s, 0.0, shift), 150.0, 8))
        drift = np.max(np.abs(base.trajectories - moved.trajectories))
        assert drift <= 1e-5, f"translation trial {trial}: drift {drift:.2e}"
    return "0 failures in 5 x 100 trials"


# ----------------------------------------------------------------------
# 5. overfit smoke test
# ----------------------------------------------------------------------

def _overfit(kind, scenes, max_steps=2000, target_fde=0.5):
    config_fn = emp_m_config if kind == "mlp" else emp_d_config
    config = config_fn(D=64, T_h=50, T_f=60)
    cfg = TrainConfig(epochs=max_steps, batch_size=8, warmup_epochs=100,
                      peak_lr=1e-3, final_lr=1e-4, seed=0)
    model = EmpModel(config, seed=0, dtype=np.float32)
    aux = _build_aux_head(config, cfg.seed, np.float32)
    named = list(model.params.items()) + list(aux.items())
    state = OptimizerState.for_params(named)
    batch = assemble_batch(scenes, config)
    targets = [s.focal_future_target for s in scenes]
    ids = [s.scenario_id for s in scenes]
    for step in range(max_steps):
        out = model.forward(batch)
        loss, _ = batch_loss(out, aux["aux_head.w"], aux["aux_head.b"], cfg.huber_delta)
        assert math.isfinite(loss.item())
        for _, p in named:
            p.grad = None
        t.backward(loss)
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for n, p in named}
        clip_gradients(grads, cfg.clip_norm)
        adamw_step(named, grads, state, lr_at(step, 1, cfg), cfg.weight_decay)
        if (step + 1) % 50 == 0:
            report = evaluate_pairs(model.predict_batch(scenes), targets, ids)
            if report.minfde_6 < target_fde:
                return step + 1, report.minfde_6
    report = evaluate_pairs(model.predict_batch(scenes), targets, ids)
    return max_steps, report.minfde_6


@criterion("overfit smoke: EMP-M and EMP-D reach train minFDE6 < 0.5 m within 2000 steps")
def test_overfit_smoke():
    tic = time.perf_counter()
    scenes = [preprocess(s, 150.0, 20)
              for s in generate_synthetic(101, 8, SyntheticSpec.for_profile("av2"))]
    steps_m, fde_m = _overfit("mlp", scenes)
    assert fde_m < 0.5, f"EMP-M minFDE6 {fde_m:.3f} after {steps_m} steps"
    steps_d, fde_d = _overfit("detr", scenes)
    assert fde_d < 0.5, f"EMP-D minFDE6 {fde_d:.3f} after {steps_d} steps"
    elapsed = time.perf_counter() - tic
    assert elapsed < 900.0, f"smoke took {elapsed:.0f}s"
    return (f"EMP-M {fde_m:.3f} m @ {steps_m} steps, EMP-D {fde_d:.3f} m @ {steps_d} steps, "
            f"{elapsed:.0f}s")


# ----------------------------------------------------------------------
# 6. schedule / optimizer checks
# ----------------------------------------------------------------------

@criterion("schedule/optimizer: lr endpoints exact, AdamW hand step 1e-12, clip bound")
def test_schedule_and_optimizer():
    cfg = TrainConfig(epochs=60, warmup_epochs=10, peak_lr=1e-3, final_lr=1e-4)
    spe = 13
    assert lr_at(0, spe, cfg) == 0.0
    assert lr_at(10 * spe, spe, cfg) == 1e-3
    assert lr_at(60 * spe - 1, spe, cfg) == 1e-4

    p = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    named = [("p", p)]
    state = OptimizerState.for_params(named)
    adamw_step(named, {"p": np.ones(1)}, state, lr=0.1, weight_decay=0.0)
    expected = -0.1 / (math.sqrt(1.0) + 1e-8)
    assert abs(p.data[0] - expected) < 1e-12

    rng = np.random.default_rng(8)
    for _ in range(100):
        grads = {str(i): rng.standard_normal(rng.integers(1, 6)) * 10 for i in range(4)}
        clip_gradients(grads, 1.0)
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        assert norm <= 1.0 + 1e-9
    return None


# ----------------------------------------------------------------------
# 7. latency ordering
# ----------------------------------------------------------------------

@criterion("latency ordering: EMP-M median forward <= EMP-D on identical data")
def test_latency_ordering(tmp_path):
    data = tmp_path / "bench_data.ndjson"
    assert cli.main(["generate", "--seed", "17", "--count", "32",
                     "--profile", "av2", "--out", str(data)]) == 0
    checkpoints = {}
    for kind, config_fn in (("emp-m", emp_m_config), ("emp-d", emp_d_config)):
        config = config_fn(D=32, T_h=50, T_f=60)
        model = EmpModel(config, seed=0)
        ckpt = tmp_path / f"{kind}.ckpt"
        save_checkpoint(model.params, config, ckpt, extra={"radius": 150.0})
        checkpoints[kind] = ckpt

    # interleave the two variants' bench runs so slow machine phases hit
    # both equally; medians over disjoint time windows are not comparable
    # on shared hardware
    times = {"emp-m": [], "emp-d": []}
    for rnd in range(6):
        for kind in ("emp-m", "emp-d"):
            out = tmp_path / f"bench_{kind}_{rnd}.ndjson"
            assert cli.main(["bench", "--data", str(data),
                             "--checkpoint", str(checkpoints[kind]),
                             "--batch", "32", "--reps", "5",
                             "--warmup", "3" if rnd == 0 else "1",
                             "--out", str(out)]) == 0
            times[kind].extend(json.loads(out.read_text())["times_ms"])
    m = float(np.median(times["emp-m"]))
    d = float(np.median(times["emp-d"]))
    assert m <= d, f"EMP-M median {m:.2f} ms > EMP-D {d:.2f} ms"
    return f"EMP-M {m:.1f} ms <= EMP-D {d:.1f} ms (batch 32, interleaved)"


# ----------------------------------------------------------------------
# 8. determinism
# ----------------------------------------------------------------------

@criterion("determinism: identical seeds give bit-identical checkpoints and logs")
def test_training_determinism(tmp_path):
    scenes = [preprocess(s, 150.0, 8)
              for s in generate_synthetic(55, 8, SyntheticSpec(t_h=10, t_f=12))]
    config = emp_m_config(**TOY)
    cfg = TrainConfig(epochs=4, batch_size=4, warmup_epochs=1, seed=11)
    artifacts = []
    for run in range(2):
        result = train(scenes, config, cfg)
        ckpt = tmp_path / f"run{run}.ckpt"
        save_checkpoint(result.model.params, config, ckpt, seed=cfg.seed)
        nd = tmp_path / f"run{run}.ndjson"
        write_training_log(result.log, nd, tmp_path / f"run{run}.csv")
        artifacts.append((ckpt.read_bytes(), nd.read_text()))
    assert artifacts[0][0] == artifacts[1][0], "checkpoints differ"
    # wall_seconds is physically nondeterministic; every other field must
    # match bit for bit
    for la, lb in zip(artifacts[0][1].splitlines(), artifacts[1][1].splitlines()):
        ra, rb = json.loads(la), json.loads(lb)
        ra.pop("wall_seconds"), rb.pop("wall_seconds")
        assert json.dumps(ra, sort_keys=True) == json.dumps(rb, sort_keys=True)
    return "checkpoints byte-identical; logs identical up to wall_seconds"
