"""Command-line surface: generate, train, eval, predict, bench, plot.

Every command reads and writes only files named by flags and is
deterministic given its flags and seed (bench wall-clock samples excepted).
Exit codes: 0 success, 2 usage error, 3 data/validation error, 4 training
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

import emp.tensor as t
from emp import metrics as metrics_mod
from emp import plots
from emp.model import (
    EmpModel,
    ModelConfig,
    emp_d_config,
    emp_m_config,
    assemble_batch,
    load_checkpoint,
    save_checkpoint,
)
from emp.rng import stream
from emp.scenario import (
    PROFILES,
    Scenario,
    ScenarioError,
    SyntheticSpec,
    file_profile,
    generate_synthetic,
    load_scenarios,
    preprocess,
    save_scenarios,
    PREDICTION_SCHEMA,
)
from emp.training import (
    TrainConfig,
    TrainingDivergedError,
    train,
    write_training_log,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

BENCH_SCHEMA = "emp-bench/1"
BENCH_BOUNDARY = "model forward only; preprocessing and output serialization excluded"


@dataclass
class BenchResult:
    batch_size: int
    repetitions: int
    times_ms: list[float]
    mean_ms: float
    median_ms: float
    p95_ms: float
    hardware: str
    variant: str
    threads: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def run_bench(
    model: EmpModel,
    scenes,
    batch_size: int,
    reps: int,
    warmup: int,
    timer: Callable[[], float] = time.perf_counter,
    threads: Optional[int] = None,
) -> BenchResult:
    """Time batched forward passes, excluding preprocessing and serialization.

    The scene batch is assembled once up front; ``warmup`` repetitions are
    discarded before the ``reps`` measured ones.
    """
    if len(scenes) < batch_size:
        raise ValueError(
            f"insufficient scenarios: need {batch_size}, have {len(scenes)}"
        )
    if reps < 1:
        raise ValueError("reps must be >= 1")
    batch = assemble_batch(list(scenes)[:batch_size], model.config)

    def timed() -> float:
        tic = timer()
        with t.no_grad():
            model.forward(batch)
        return (timer() - tic) * 1e3

    def measure() -> list[float]:
        for _ in range(warmup):
            timed()
        return [timed() for _ in range(reps)]

    used_threads = threads or (os.cpu_count() or 1)
    if threads is not None:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            threadpool_limits = None
        if threadpool_limits is not None:
            with threadpool_limits(limits=threads):
                times = measure()
        else:
            times = measure()
    else:
        times = measure()

    return BenchResult(
        batch_size=batch_size,
        repetitions=reps,
        times_ms=times,
        mean_ms=float(np.mean(times)),
        median_ms=float(np.median(times)),
        p95_ms=float(np.percentile(times, 95)),
        hardware=f"{platform.system()} {platform.machine()}, {os.cpu_count()} cpus",
        variant="emp-d" if model.config.decoder_kind == "detr" else "emp-m",
        threads=used_threads,
    )


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------

def _preprocess_all(scenarios: Sequence[Scenario], radius: float, n_points: int):
    return [preprocess(s, radius, n_points) for s in scenarios]


def _resolve_radius(args, header_extra: Optional[dict], profile: Optional[str]) -> float:
    if getattr(args, "radius", None):
        return float(args.radius)
    if header_extra and "radius" in header_extra:
        return float(header_extra["radius"])
    if profile in PROFILES:
        return PROFILES[profile][2]
    return PROFILES["av2"][2]


def _read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        return json.loads(f.readline())


def _chunked_predictions(model: EmpModel, scenes, chunk: int = 64):
    preds = []
    for start in range(0, len(scenes), chunk):
        preds.extend(model.predict_batch(scenes[start:start + chunk]))
    return preds


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = SyntheticSpec.for_profile(args.profile)
    scenarios = generate_synthetic(args.seed, args.count, spec)
    save_scenarios(args.out, scenarios, profile=args.profile)
    print(f"wrote {len(scenarios)} scenarios to {args.out}")
    return EXIT_OK


def _model_config_for(args, overrides: dict) -> ModelConfig:
    preset = emp_m_config if args.model == "emp-m" else emp_d_config
    return preset(**overrides)


def cmd_train(args) -> int:
    config_file = _load_json(args.config) if args.config else {}
    model_overrides = config_file.get("model", {})
    train_overrides = config_file.get("train", {})

    scenarios = load_scenarios(args.data)
    if not scenarios:
        raise ScenarioError(f"no scenarios in {args.data}")
    profile = file_profile(args.data)
    radius = _resolve_radius(args, None, profile)
    t_h, t_f = scenarios[0].t_h, scenarios[0].t_f
    model_overrides.setdefault("T_h", t_h)
    model_overrides.setdefault("T_f", t_f)
    model_config = _model_config_for(args, model_overrides)

    train_overrides["seed"] = args.seed
    cfg = TrainConfig(**train_overrides)

    scenes = _preprocess_all(scenarios, radius, model_config.N)
    if args.val:
        val_scenes = _preprocess_all(load_scenarios(args.val), radius, model_config.N)
    else:
        n_val = len(scenes) // 10
        if n_val:
            order = stream(cfg.seed, 4).permutation(len(scenes))
            val_scenes = [scenes[i] for i in order[:n_val]]
            scenes = [scenes[i] for i in order[n_val:]]
        else:
            val_scenes = None

    os.makedirs(args.out, exist_ok=True)

    def progress(rec):
        print(
            f"epoch {rec['epoch']:4d}  lr {rec['lr']:.2e}  loss {rec['loss_total']:.4f}  "
            f"val_minfde6 {rec['val_minfde6']:.3f}", flush=True,
        )

    result = train(scenes, model_config, cfg, val_scenes=val_scenes, progress=progress)

    extra = {"radius": radius, "profile": profile or "custom", "train": cfg.to_dict()}
    save_checkpoint(result.model.params, model_config,
                    os.path.join(args.out, "last.ckpt"), seed=cfg.seed, extra=extra)
    save_checkpoint(result.best_params, model_config,
                    os.path.join(args.out, "best.ckpt"), seed=cfg.seed, extra=extra)
    write_training_log(result.log, os.path.join(args.out, "log.ndjson"),
                       os.path.join(args.out, "log.csv"))
    plots.plot_loss_curves(result.log, os.path.join(args.out, "loss_curves.svg"))
    plots.plot_metrics_vs_epoch(result.log, os.path.join(args.out, "metrics_vs_epoch.svg"))
    print(f"wrote checkpoints and logs to {args.out}")
    return EXIT_OK


def _load_model(checkpoint_path) -> tuple[EmpModel, dict]:
    params, config = load_checkpoint(checkpoint_path)
    header = _read_checkpoint_header(checkpoint_path)
    return EmpModel(config, params=params), header


def cmd_eval(args) -> int:
    model, header = _load_model(args.checkpoint)
    scenarios = load_scenarios(args.data)
    if not scenarios:
        raise ScenarioError(f"no scenarios in {args.data}")
    radius = _resolve_radius(args, header, file_profile(args.data))
    scenes = _preprocess_all(scenarios, radius, model.config.N)
    preds = _chunked_predictions(model, scenes)
    report = metrics_mod.evaluate(preds, scenarios)
    os.makedirs(args.out, exist_ok=True)
    metrics_mod.write_report(report, os.path.join(args.out, "report.ndjson"),
                             os.path.join(args.out, "report.csv"))
    plots.plot_report(report.per_scenario, os.path.join(args.out, "report.svg"))
    for key, value in report.summary_dict().items():
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, header = _load_model(args.checkpoint)
    scenarios = load_scenarios(args.data)
    radius = _resolve_radius(args, header, file_profile(args.data))
    scenes = _preprocess_all(scenarios, radius, model.config.N)
    preds = _chunked_predictions(model, scenes)
    with open(args.out, "w", encoding="utf-8") as f:
        head = {
            "schema": PREDICTION_SCHEMA,
            "k": model.config.K,
            "t_f": model.config.T_f,
            "frame": "focal_center",
        }
        f.write(json.dumps(head, separators=(",", ":")) + "\n")
        for s, p in zip(scenarios, preds):
            rec = {
                "id": s.id,
                "trajectories": [[[float(x), float(y)] for x, y in mode] for mode in p.trajectories],
                "scores": [float(v) for v in p.scores],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, header = _load_model(args.checkpoint)
    scenarios = load_scenarios(args.data)
    radius = _resolve_radius(args, header, file_profile(args.data))
    scenes = _preprocess_all(scenarios, radius, model.config.N)
    try:
        result = run_bench(model, scenes, args.batch, args.reps, args.warmup,
                           threads=args.threads)
    except ValueError as e:
        raise ScenarioError(str(e)) from e
    record = {"schema": BENCH_SCHEMA, "measures": BENCH_BOUNDARY, **result.to_dict()}
    line = json.dumps(record, separators=(",", ":"))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(line + "\n")
    print(line)
    return EXIT_OK


def cmd_plot(args) -> int:
    if not (args.log or args.report or args.bench):
        raise ScenarioError("plot needs at least one of --log, --report, --bench")
    os.makedirs(args.out, exist_ok=True)
    reports = []
    for path in args.report or []:
        rows = [json.loads(ln) for ln in open(path, encoding="utf-8") if ln.strip()]
        summary = next(r for r in rows if r.get("record") == "summary")
        scenario_rows = [r for r in rows if r.get("record") == "scenario"]
        reports.append((path, summary, scenario_rows))

    if args.log:
        records = [json.loads(ln) for ln in open(args.log, encoding="utf-8") if ln.strip()]
        plots.plot_loss_curves(records, os.path.join(args.out, "loss_curves.svg"))
        plots.plot_metrics_vs_epoch(records, os.path.join(args.out, "metrics_vs_epoch.svg"))
    for i, (path, _, scenario_rows) in enumerate(reports):
        suffix = "" if len(reports) == 1 else f"_{i}"
        plots.plot_report(scenario_rows, os.path.join(args.out, f"report{suffix}.svg"))
    if args.bench:
        points = []
        benches = [json.loads(open(p, encoding="utf-8").readline()) for p in args.bench]
        for i, b in enumerate(benches):
            metric = reports[i][1]["brier_minfde_6"] if i < len(reports) else math.nan
            points.append({
                "median_ms": b["median_ms"],
                "metric": metric,
                "label": b.get("variant", f"run{i}"),
            })
        if points and reports:
            plots.plot_latency_vs_metric(points, os.path.join(args.out, "latency_vs_metric.svg"))
    print(f"wrote figures to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scenario file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--profile", choices=["av1", "av2"], default="av2")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train a model on a scenario file")
    tr.add_argument("--data", required=True)
    tr.add_argument("--val", default=None)
    tr.add_argument("--model", choices=["emp-m", "emp-d"], default="emp-m")
    tr.add_argument("--config", default=None, help="JSON with model/train overrides")
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--radius", type=float, default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a scenario file")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--radius", type=float, default=None)
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write multimodal predictions")
    pr.add_argument("--data", required=True)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--radius", type=float, default=None)
    pr.set_defaults(func=cmd_predict)

    be = sub.add_parser("bench", help="time batched forward passes")
    be.add_argument("--data", required=True)
    be.add_argument("--checkpoint", required=True)
    be.add_argument("--batch", type=int, default=32)
    be.add_argument("--reps", type=int, default=50)
    be.add_argument("--warmup", type=int, default=5)
    be.add_argument("--threads", type=int, default=None)
    be.add_argument("--out", default=None)
    be.add_argument("--radius", type=float, default=None)
    be.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="render figures from logs/reports/bench results")
    pl.add_argument("--log", default=None)
    pl.add_argument("--report", action="append", default=None)
    pl.add_argument("--bench", action="append", default=None)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ScenarioError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
