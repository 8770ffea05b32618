"""Scenario data model, file format, preprocessing and synthetic generation.

A scenario is one traffic scene: agent tracks sampled at 10 Hz, lane
centerline polylines, and a single focal agent whose future is scored.
Preprocessing normalizes every track and lane into its own center pose
and packs the features the model consumes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from emp.rng import stream

SCHEMA = "emp-scenario/1"
PREDICTION_SCHEMA = "emp-prediction/1"
STEP_PERIOD = 0.1

# preprocessing profiles: (t_h, t_f, radius_m)
PROFILES = {
    "av2": (50, 60, 150.0),
    "av1": (20, 30, 65.0),
}

DEFAULT_LANE_POINTS = 20
STATIONARY_SPEED = 0.1  # below this, track orientation defaults to 0


class ScenarioError(ValueError):
    """Scenario file or invariant problem; message names the scenario."""


class AgentType(Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"
    OTHER = "other"


class LaneType(Enum):
    LANE = "lane"
    CROSSWALK = "crosswalk"
    OTHER = "other"


AGENT_TYPE_IDS = {t: i for i, t in enumerate(AgentType)}
LANE_TYPE_IDS = {t: i for i, t in enumerate(LaneType)}


@dataclass
class AgentTrack:
    id: str
    agent_type: AgentType
    positions: np.ndarray   # (T_h+T_f, 2) meters, zeroed when unobserved
    velocities: np.ndarray  # (T_h+T_f, 2) m/s, zeroed when unobserved
    observed: np.ndarray    # (T_h+T_f,) bool
    is_focal: bool = False


@dataclass
class LaneSegment:
    id: str
    centerline: np.ndarray  # (>=2, 2) meters, consecutive points distinct
    lane_type: LaneType = LaneType.LANE


@dataclass
class Scenario:
    id: str
    t_h: int
    t_f: int
    agents: list[AgentTrack]
    lanes: list[LaneSegment]
    step_period: float = STEP_PERIOD


@dataclass
class PreprocessedScene:
    scenario_id: str
    agent_features: np.ndarray       # (A, T_h, 5): x, y, speed, step, mask
    agent_step_mask: np.ndarray      # (A, T_h) bool
    agent_centers: np.ndarray        # (A, 4): [x, y, cos a, sin a], world frame
    agent_type_ids: np.ndarray       # (A,) int
    focal_index: int
    lane_features: np.ndarray        # (L, N, 3): x, y, mask
    lane_centers: np.ndarray         # (L, 4) world frame
    lane_type_ids: np.ndarray        # (L,) int
    focal_future_target: np.ndarray  # (T_f, 2) in the focal center frame
    all_agent_future_targets: np.ndarray  # (A, T_f, 2), each in its own frame
    future_valid: np.ndarray         # (A, T_f) bool

    @property
    def num_agents(self) -> int:
        return self.agent_features.shape[0]

    @property
    def num_lanes(self) -> int:
        return self.lane_features.shape[0]


# ----------------------------------------------------------------------
# validation
# ----------------------------------------------------------------------

def validate_scenario(s: Scenario) -> None:
    t_total = s.t_h + s.t_f
    if abs(s.step_period - STEP_PERIOD) > 1e-12:
        raise ScenarioError(f"scenario {s.id}: step_period must be {STEP_PERIOD} s")
    focal = [a for a in s.agents if a.is_focal]
    if len(focal) != 1:
        raise ScenarioError(f"scenario {s.id}: expected exactly 1 focal agent, found {len(focal)}")
    for a in s.agents:
        if len(a.positions) != t_total or len(a.observed) != t_total or len(a.velocities) != t_total:
            raise ScenarioError(
                f"scenario {s.id}: track {a.id} has length {len(a.positions)}, expected {t_total}"
            )
        unobs = ~a.observed
        if np.any(a.positions[unobs] != 0.0) or np.any(a.velocities[unobs] != 0.0):
            raise ScenarioError(
                f"scenario {s.id}: track {a.id} has nonzero state at unobserved steps"
            )
    if not focal[0].observed[s.t_h - 1]:
        raise ScenarioError(
            f"scenario {s.id}: focal agent unobserved at the reference step {s.t_h - 1}"
        )
    for lane in s.lanes:
        pts = np.asarray(lane.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ScenarioError(f"scenario {s.id}: lane {lane.id} needs >=2 2D points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise ScenarioError(f"scenario {s.id}: lane {lane.id} repeats consecutive points")


# ----------------------------------------------------------------------
# file format: one header line then one JSON record per scenario
# ----------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _scenario_record(s: Scenario) -> dict:
    return {
        "id": s.id,
        "step_period": float(s.step_period),
        "t_h": s.t_h,
        "t_f": s.t_f,
        "agents": [
            {
                "id": a.id,
                "type": a.agent_type.value,
                "is_focal": a.is_focal,
                "states": [
                    [float(x), float(y), float(vx), float(vy), bool(o)]
                    for (x, y), (vx, vy), o in zip(a.positions, a.velocities, a.observed)
                ],
            }
            for a in s.agents
        ],
        "lanes": [
            {
                "id": lane.id,
                "type": lane.lane_type.value,
                "centerline": [[float(x), float(y)] for x, y in lane.centerline],
            }
            for lane in s.lanes
        ],
    }


def _record_scenario(rec: dict) -> Scenario:
    agents = []
    for a in rec["agents"]:
        n = len(a["states"])
        positions = np.empty((n, 2), dtype=float)
        velocities = np.empty((n, 2), dtype=float)
        observed = np.empty(n, dtype=bool)
        for i, st in enumerate(a["states"]):
            positions[i] = (st[0], st[1])
            velocities[i] = (st[2], st[3])
            observed[i] = bool(st[4])
        agents.append(
            AgentTrack(
                id=a["id"],
                agent_type=AgentType(a["type"]),
                positions=positions,
                velocities=velocities,
                observed=observed,
                is_focal=bool(a["is_focal"]),
            )
        )
    lanes = [
        LaneSegment(
            id=l["id"],
            centerline=np.asarray(l["centerline"], dtype=float),
            lane_type=LaneType(l["type"]),
        )
        for l in rec["lanes"]
    ]
    return Scenario(
        id=rec["id"],
        t_h=int(rec["t_h"]),
        t_f=int(rec["t_f"]),
        agents=agents,
        lanes=lanes,
        step_period=float(rec["step_period"]),
    )


def save_scenarios(path, scenarios: Sequence[Scenario], profile: str = "custom") -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dump({"schema": SCHEMA, "profile": profile, "count": len(scenarios)}) + "\n")
        for s in scenarios:
            validate_scenario(s)
            f.write(_dump(_scenario_record(s)) + "\n")


def load_scenarios(path) -> list[Scenario]:
    if not os.path.exists(path):
        raise ScenarioError(f"scenario file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        return []
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ScenarioError(f"unparseable header line: {e}") from e
    if header.get("schema") != SCHEMA:
        raise ScenarioError(f"unsupported schema {header.get('schema')!r}, expected {SCHEMA!r}")
    scenarios = []
    for i, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"line {i}: unparseable record: {e}") from e
        try:
            s = _record_scenario(rec)
        except (KeyError, ValueError, TypeError) as e:
            raise ScenarioError(f"line {i}: malformed scenario record: {e}") from e
        validate_scenario(s)
        scenarios.append(s)
    return scenarios


def file_profile(path) -> Optional[str]:
    """Profile string recorded in a scenario file header, if any."""
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if not first:
        return None
    return json.loads(first).get("profile")


# ----------------------------------------------------------------------
# geometry helpers
# ----------------------------------------------------------------------

def velocity_magnitude(v) -> float:
    """Euclidean norm of a 2D velocity, m/s."""
    v = np.asarray(v, dtype=float)
    return float(math.hypot(v[0], v[1]))


def resample_polyline(points, n: int) -> np.ndarray:
    """Resample a polyline to ``n`` points uniform in arc length.

    Endpoints are preserved exactly.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("resample_polyline needs at least 2 input points")
    if n < 2:
        raise ValueError("resample_polyline needs n >= 2")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(seg.sum())
    if total <= 0.0:
        raise ValueError("degenerate zero-length polyline")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, n)
    out = np.column_stack(
        [np.interp(targets, cum, pts[:, 0]), np.interp(targets, cum, pts[:, 1])]
    )
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def _polyline_midpoint_pose(pts: np.ndarray) -> np.ndarray:
    """Center pose [x, y, cos a, sin a] at the arc-length middle of a polyline,
    oriented along the segment containing the midpoint."""
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    half = cum[-1] / 2.0
    j = int(np.searchsorted(cum, half, side="right") - 1)
    j = min(max(j, 0), len(pts) - 2)
    t = 0.0 if seg[j] == 0 else (half - cum[j]) / seg[j]
    mid = pts[j] + t * (pts[j + 1] - pts[j])
    direction = pts[j + 1] - pts[j]
    alpha = math.atan2(direction[1], direction[0])
    return np.array([mid[0], mid[1], math.cos(alpha), math.sin(alpha)])


def _track_orientation(track: AgentTrack, t_h: int) -> float:
    """Heading from the displacement of the last two observed history steps;
    with fewer than two observed steps, from the velocity vector. Tracks
    slower than STATIONARY_SPEED keep heading 0."""
    obs_idx = np.flatnonzero(track.observed[:t_h])
    if len(obs_idx) >= 2:
        a, b = obs_idx[-2], obs_idx[-1]
        d = track.positions[b] - track.positions[a]
        if math.hypot(d[0], d[1]) >= STATIONARY_SPEED * STEP_PERIOD * (b - a):
            return math.atan2(d[1], d[0])
        return 0.0
    v = track.velocities[obs_idx[-1]] if len(obs_idx) else np.zeros(2)
    if velocity_magnitude(v) >= STATIONARY_SPEED:
        return math.atan2(v[1], v[0])
    return 0.0


def _to_local(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Rigidly transform world points into a center pose frame."""
    c, s = center[2], center[3]
    rel = points - center[:2]
    return np.column_stack([rel[:, 0] * c + rel[:, 1] * s, -rel[:, 0] * s + rel[:, 1] * c])


# ----------------------------------------------------------------------
# preprocessing
# ----------------------------------------------------------------------

def preprocess(
    s: Scenario,
    radius: float,
    n_lane_points: int = DEFAULT_LANE_POINTS,
) -> PreprocessedScene:
    """Normalize a scenario into model-ready tensors.

    Agents and lanes whose center is farther than ``radius`` from the focal
    agent's reference position are dropped, as are agents unobserved at the
    reference step (their center pose is undefined). Each track and lane is
    expressed in its own center pose frame.
    """
    validate_scenario(s)
    t_h, t_f = s.t_h, s.t_f
    ref = t_h - 1
    focal = next(a for a in s.agents if a.is_focal)
    focal_pos = focal.positions[ref]

    kept: list[AgentTrack] = []
    for a in s.agents:
        if not a.observed[ref]:
            continue
        if np.linalg.norm(a.positions[ref] - focal_pos) > radius:
            continue
        kept.append(a)
    # focal agent is observed at ref and at distance 0, so it is always kept
    kept.sort(key=lambda a: (not a.is_focal,))
    focal_index = next(i for i, a in enumerate(kept) if a.is_focal)

    a_count = len(kept)
    agent_features = np.zeros((a_count, t_h, 5), dtype=float)
    agent_step_mask = np.zeros((a_count, t_h), dtype=bool)
    agent_centers = np.zeros((a_count, 4), dtype=float)
    agent_type_ids = np.zeros(a_count, dtype=np.int64)
    futures = np.zeros((a_count, t_f, 2), dtype=float)
    future_valid = np.zeros((a_count, t_f), dtype=bool)

    for i, a in enumerate(kept):
        alpha = _track_orientation(a, t_h)
        center = np.array(
            [a.positions[ref][0], a.positions[ref][1], math.cos(alpha), math.sin(alpha)]
        )
        agent_centers[i] = center
        agent_type_ids[i] = AGENT_TYPE_IDS[a.agent_type]
        mask = a.observed[:t_h]
        agent_step_mask[i] = mask
        local = _to_local(a.positions[:t_h], center)
        speeds = np.linalg.norm(a.velocities[:t_h], axis=1)
        agent_features[i, :, 0] = np.where(mask, local[:, 0], 0.0)
        agent_features[i, :, 1] = np.where(mask, local[:, 1], 0.0)
        agent_features[i, :, 2] = np.where(mask, speeds, 0.0)
        agent_features[i, :, 3] = np.arange(t_h)
        agent_features[i, :, 4] = mask.astype(float)
        fut_mask = a.observed[t_h:]
        future_valid[i] = fut_mask
        fut_local = _to_local(a.positions[t_h:], center)
        futures[i] = np.where(fut_mask[:, None], fut_local, 0.0)

    kept_lanes = []
    resampled = []
    centers = []
    for lane in s.lanes:
        pts = resample_polyline(lane.centerline, n_lane_points)
        pose = _polyline_midpoint_pose(pts)
        if np.linalg.norm(pose[:2] - focal_pos) > radius:
            continue
        kept_lanes.append(lane)
        resampled.append(pts)
        centers.append(pose)

    l_count = len(kept_lanes)
    lane_features = np.zeros((l_count, n_lane_points, 3), dtype=float)
    lane_centers = np.zeros((l_count, 4), dtype=float)
    lane_type_ids = np.zeros(l_count, dtype=np.int64)
    for i, (lane, pts, pose) in enumerate(zip(kept_lanes, resampled, centers)):
        lane_centers[i] = pose
        lane_type_ids[i] = LANE_TYPE_IDS[lane.lane_type]
        local = _to_local(pts, pose)
        lane_features[i, :, :2] = local
        lane_features[i, :, 2] = 1.0

    return PreprocessedScene(
        scenario_id=s.id,
        agent_features=agent_features,
        agent_step_mask=agent_step_mask,
        agent_centers=agent_centers,
        agent_type_ids=agent_type_ids,
        focal_index=focal_index,
        lane_features=lane_features,
        lane_centers=lane_centers,
        lane_type_ids=lane_type_ids,
        focal_future_target=futures[focal_index].copy(),
        all_agent_future_targets=futures,
        future_valid=future_valid,
    )


def focal_future_frame(s: Scenario) -> np.ndarray:
    """Focal agent's future trajectory in its own center pose frame."""
    ref = s.t_h - 1
    focal = next(a for a in s.agents if a.is_focal)
    alpha = _track_orientation(focal, s.t_h)
    center = np.array(
        [focal.positions[ref][0], focal.positions[ref][1], math.cos(alpha), math.sin(alpha)]
    )
    return _to_local(focal.positions[s.t_h:], center)


# ----------------------------------------------------------------------
# synthetic scenarios
# ----------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters for the synthetic scenario generator."""

    t_h: int = 50
    t_f: int = 60
    agent_count: tuple[int, int] = (2, 5)
    lane_count: tuple[int, int] = (3, 6)
    speed_range: tuple[float, float] = (2.0, 12.0)
    turn_rate_range: tuple[float, float] = (-0.15, 0.15)  # rad/s
    position_noise: float = 0.05  # meters, std of white noise on positions
    dropout_prob: float = 0.05
    area: float = 60.0  # half-extent of the start-position square, meters

    @classmethod
    def for_profile(cls, profile: str) -> "SyntheticSpec":
        t_h, t_f, _ = PROFILES[profile]
        return cls(t_h=t_h, t_f=t_f)


def _arc_positions(start, heading, speed, turn_rate, steps, dt):
    """Constant-turn-rate path sampled every dt."""
    pos = np.empty((steps, 2))
    p = np.array(start, dtype=float)
    h = float(heading)
    for t in range(steps):
        pos[t] = p
        p = p + speed * dt * np.array([math.cos(h), math.sin(h)])
        h += turn_rate * dt
    return pos


def generate_synthetic(seed: int, count: int, spec: Optional[SyntheticSpec] = None) -> list[Scenario]:
    """Deterministic synthetic scenarios: agents follow lane-aligned
    constant-turn-rate paths with optional position noise and random
    observation dropouts away from the reference step."""
    spec = spec or SyntheticSpec()
    t_total = spec.t_h + spec.t_f
    dt = STEP_PERIOD
    scenarios = []
    for idx in range(count):
        rng = stream(seed, 0, idx)
        n_lanes = int(rng.integers(spec.lane_count[0], spec.lane_count[1] + 1))
        n_agents = int(rng.integers(spec.agent_count[0], spec.agent_count[1] + 1))

        lanes = []
        lane_params = []
        for li in range(n_lanes):
            start = rng.uniform(-spec.area, spec.area, size=2)
            heading = rng.uniform(-math.pi, math.pi)
            turn = rng.uniform(*spec.turn_rate_range)
            length = rng.uniform(40.0, 120.0)
            n_pts = int(rng.integers(6, 16))
            # sample the lane shape as an arc traced at 10 m/s
            pts = _arc_positions(start, heading, 10.0, turn, max(n_pts, 2), length / (10.0 * max(n_pts - 1, 1)))
            lane_type = LaneType.CROSSWALK if rng.random() < 0.1 else LaneType.LANE
            lanes.append(LaneSegment(id=f"lane-{idx}-{li}", centerline=pts, lane_type=lane_type))
            lane_params.append((start, heading, turn))

        focal_i = int(rng.integers(0, n_agents))
        agents = []
        for ai in range(n_agents):
            lane_start, lane_heading, lane_turn = lane_params[int(rng.integers(0, n_lanes))]
            offset = rng.uniform(-8.0, 8.0, size=2)
            speed = rng.uniform(*spec.speed_range)
            turn = lane_turn + rng.uniform(-0.05, 0.05)
            pos = _arc_positions(lane_start + offset, lane_heading, speed, turn, t_total, dt)
            if spec.position_noise > 0:
                pos = pos + rng.normal(0.0, spec.position_noise, size=pos.shape)
            vel = np.empty_like(pos)
            vel[1:-1] = (pos[2:] - pos[:-2]) / (2.0 * dt)
            vel[0] = (pos[1] - pos[0]) / dt
            vel[-1] = (pos[-1] - pos[-2]) / dt

            observed = np.ones(t_total, dtype=bool)
            if ai != focal_i and spec.dropout_prob > 0:
                observed = rng.random(t_total) >= spec.dropout_prob
                observed[spec.t_h - 1] = True  # never drop the reference step
            pos = np.where(observed[:, None], pos, 0.0)
            vel = np.where(observed[:, None], vel, 0.0)
            kind = rng.random()
            if kind < 0.7:
                agent_type = AgentType.VEHICLE
            elif kind < 0.85:
                agent_type = AgentType.PEDESTRIAN
            elif kind < 0.95:
                agent_type = AgentType.CYCLIST
            else:
                agent_type = AgentType.OTHER
            agents.append(
                AgentTrack(
                    id=f"agent-{idx}-{ai}",
                    agent_type=agent_type,
                    positions=pos,
                    velocities=vel,
                    observed=observed,
                    is_focal=ai == focal_i,
                )
            )
        scenarios.append(
            Scenario(
                id=f"synthetic-{seed}-{idx}",
                t_h=spec.t_h,
                t_f=spec.t_f,
                agents=agents,
                lanes=lanes,
            )
        )
    return scenarios
