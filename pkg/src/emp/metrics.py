"""Probabilistic forecasting metrics: minADE, minFDE, miss rate, brier-minFDE.

All metrics restrict attention to the k highest-confidence modes (ties by
index); minADE and minFDE each minimize their own criterion, and the brier
penalty uses the endpoint-best mode's confidence. The strict benchmark
convention (ADE of the endpoint-best mode) is available behind a flag.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from emp.model import MultiModalPrediction
from emp.scenario import Scenario, focal_future_frame

MISS_THRESHOLD_M = 2.0

REPORT_FIELDS = [
    "scenario_count", "minade_1", "minfde_1", "minade_6", "minfde_6", "mr_6", "brier_minfde_6",
]
SCENARIO_FIELDS = [
    "id", "minade_1", "minfde_1", "minade_6", "minfde_6", "miss_6", "brier_minfde_6",
]


@dataclass
class EvalReport:
    scenario_count: int
    minade_1: float
    minfde_1: float
    minade_6: float
    minfde_6: float
    mr_6: float
    brier_minfde_6: float
    per_scenario: list[dict] = field(default_factory=list)

    def summary_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest-confidence modes, ties broken by index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return order[: max(1, min(k, len(order)))]


def min_ade(prediction, scores, target, k: int, endpoint_best: bool = False) -> float:
    """Minimum over the top-k modes of the mean pointwise L2 error.

    With ``endpoint_best`` the ADE of the endpoint-best mode is reported
    instead (the strict benchmark convention).
    """
    pred = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    allowed = _top_k(scores, k)
    ade = np.linalg.norm(pred[allowed] - target[None], axis=-1).mean(axis=-1)
    if endpoint_best:
        fde = np.linalg.norm(pred[allowed][:, -1] - target[-1], axis=-1)
        return float(ade[np.argmin(fde)])
    return float(ade.min())


def min_fde(prediction, scores, target, k: int) -> tuple[float, int]:
    """Minimum endpoint error over the top-k modes and the achieving mode."""
    pred = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    allowed = _top_k(scores, k)
    fde = np.linalg.norm(pred[allowed][:, -1] - target[-1], axis=-1)
    j = int(np.argmin(fde))
    return float(fde[j]), int(allowed[j])


def miss_rate(predictions: Sequence, scores_list: Sequence, targets: Sequence,
              k: int, threshold: float = MISS_THRESHOLD_M) -> float:
    """Fraction of scenarios whose best endpoint among the top-k modes is
    farther than ``threshold`` meters from the ground-truth endpoint."""
    if not len(predictions):
        return 0.0
    misses = [
        min_fde(p, s, g, k)[0] > threshold
        for p, s, g in zip(predictions, scores_list, targets)
    ]
    return float(np.mean(misses))


def brier_min_fde(prediction, scores, target, k: int) -> float:
    """minFDE plus the (1 - p)^2 penalty, p = confidence of the
    endpoint-best mode."""
    fde, idx = min_fde(prediction, scores, target, k)
    p = float(np.asarray(scores)[idx])
    return fde + (1.0 - p) ** 2


def evaluate_pairs(
    predictions: Sequence[MultiModalPrediction],
    targets: Sequence[np.ndarray],
    ids: Optional[Sequence[str]] = None,
    endpoint_best_ade: bool = False,
    miss_threshold: float = MISS_THRESHOLD_M,
) -> EvalReport:
    """Aggregate metrics over (prediction, focal-frame target) pairs."""
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets differ in length")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(predictions))]
    rows = []
    for pid, pred, target in zip(ids, predictions, targets):
        traj, scores = pred.trajectories, pred.scores
        fde6, _ = min_fde(traj, scores, target, 6)
        rows.append({
            "id": pid,
            "minade_1": min_ade(traj, scores, target, 1, endpoint_best_ade),
            "minfde_1": min_fde(traj, scores, target, 1)[0],
            "minade_6": min_ade(traj, scores, target, 6, endpoint_best_ade),
            "minfde_6": fde6,
            "miss_6": float(fde6 > miss_threshold),
            "brier_minfde_6": brier_min_fde(traj, scores, target, 6),
        })
    count = len(rows)
    mean = lambda key: float(np.mean([r[key] for r in rows])) if rows else 0.0
    return EvalReport(
        scenario_count=count,
        minade_1=mean("minade_1"),
        minfde_1=mean("minfde_1"),
        minade_6=mean("minade_6"),
        minfde_6=mean("minfde_6"),
        mr_6=mean("miss_6"),
        brier_minfde_6=mean("brier_minfde_6"),
        per_scenario=rows,
    )


def evaluate(
    predictions: Sequence[MultiModalPrediction],
    scenarios: Sequence[Scenario],
    endpoint_best_ade: bool = False,
    miss_threshold: float = MISS_THRESHOLD_M,
) -> EvalReport:
    """Evaluate focal-frame predictions against scenario ground truth."""
    targets = []
    for s in scenarios:
        focal = next(a for a in s.agents if a.is_focal)
        if not np.all(focal.observed[s.t_h:]):
            raise ValueError(
                f"scenario {s.id}: focal future is not fully observed, cannot score"
            )
        targets.append(focal_future_frame(s))
    return evaluate_pairs(
        predictions, targets, [s.id for s in scenarios],
        endpoint_best_ade=endpoint_best_ade, miss_threshold=miss_threshold,
    )


def write_report(report: EvalReport, ndjson_path, csv_path) -> None:
    """Emit the report as newline-delimited records plus a CSV mirror."""
    with open(ndjson_path, "w", encoding="utf-8") as f:
        f.write(json.dumps(
            {"record": "summary", **report.summary_dict()}, separators=(",", ":")
        ) + "\n")
        for row in report.per_scenario:
            f.write(json.dumps({"record": "scenario", **row}, separators=(",", ":")) + "\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SCENARIO_FIELDS)
        writer.writeheader()
        for row in report.per_scenario:
            writer.writerow(row)
