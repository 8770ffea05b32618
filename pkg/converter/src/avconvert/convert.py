"""Convert Argoverse motion-forecasting data into emp-scenario/1 files.

Supported source layouts:

* ``av2`` — the published Argoverse 2 layout: one directory per scenario
  holding ``scenario_<id>.parquet`` (tracks) and
  ``log_map_archive_<id>.json`` (map). Lane segments contribute their
  centerlines; pedestrian crossings contribute the midline of their two
  edges.
* ``av1`` — one ``<id>.csv`` per scenario with the published columns
  (TIMESTAMP, TRACK_ID, OBJECT_TYPE, X, Y). Argoverse 1 ships maps as a
  city-wide API rather than per-scenario files, so lanes are read from a
  sidecar ``<id>_map.json`` (``{"lanes": [{"id", "centerline"}]}``)
  exported ahead of time; scenarios without one are skipped.

Tracks shorter than the profile horizon are zero-padded as unobserved.
The focal track must be fully observed over the history window, otherwise
the scenario is skipped. Velocities come from the dataset when present
(AV2) and are finite-differenced from positions otherwise (AV1).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

SCHEMA = "emp-scenario/1"
STEP_PERIOD = 0.1

# (T_h, T_f) per profile
HORIZONS = {"av1": (20, 30), "av2": (50, 60)}

# AV2 object_type strings onto the four-way enum; anything unknown -> other
AGENT_TYPE_MAP = {
    "vehicle": "vehicle",
    "bus": "vehicle",
    "motorcyclist": "cyclist",
    "cyclist": "cyclist",
    "riderless_bicycle": "cyclist",
    "pedestrian": "pedestrian",
}


class ConversionError(ValueError):
    pass


@dataclass
class ConversionManifest:
    source: str
    profile: str
    schema: str = SCHEMA
    discovered: int = 0
    converted: int = 0
    skipped: int = 0
    skip_reasons: dict = field(default_factory=dict)

    def skip(self, reason: str) -> None:
        self.skipped += 1
        self.skip_reasons[reason] = self.skip_reasons.get(reason, 0) + 1

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "profile": self.profile,
            "schema": self.schema,
            "discovered": self.discovered,
            "converted": self.converted,
            "skipped": self.skipped,
            "skip_reasons": dict(sorted(self.skip_reasons.items())),
        }


@dataclass
class _Track:
    track_id: str
    agent_type: str
    is_focal: bool
    positions: np.ndarray
    velocities: np.ndarray
    observed: np.ndarray


def _finite_difference_velocities(positions: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Per-step velocity from positions: central difference where both
    neighbors are observed, one-sided at segment ends, zero elsewhere."""
    n = len(positions)
    vel = np.zeros_like(positions)
    for i in np.flatnonzero(observed):
        prev_ok = i > 0 and observed[i - 1]
        next_ok = i < n - 1 and observed[i + 1]
        if prev_ok and next_ok:
            vel[i] = (positions[i + 1] - positions[i - 1]) / (2 * STEP_PERIOD)
        elif next_ok:
            vel[i] = (positions[i + 1] - positions[i]) / STEP_PERIOD
        elif prev_ok:
            vel[i] = (positions[i] - positions[i - 1]) / STEP_PERIOD
    return vel


def _dedupe_consecutive(points: list[list[float]]) -> list[list[float]]:
    out = [points[0]]
    for p in points[1:]:
        if p != out[-1]:
            out.append(p)
    return out


# ----------------------------------------------------------------------
# AV2
# ----------------------------------------------------------------------

def _discover_av2(source_dir: str) -> list[tuple[str, str, str]]:
    """(scenario_id, parquet_path, map_path) triples in sorted order;
    map_path is empty when missing."""
    found = []
    for entry in sorted(os.listdir(source_dir)):
        sub = os.path.join(source_dir, entry)
        if not os.path.isdir(sub):
            continue
        parquets = sorted(
            f for f in os.listdir(sub) if f.startswith("scenario_") and f.endswith(".parquet")
        )
        if not parquets:
            continue
        sid = parquets[0][len("scenario_"):-len(".parquet")]
        map_path = os.path.join(sub, f"log_map_archive_{sid}.json")
        found.append((sid, os.path.join(sub, parquets[0]),
                      map_path if os.path.exists(map_path) else ""))
    return found


def _read_av2_tracks(parquet_path: str, t_total: int) -> tuple[list[_Track], str]:
    import pyarrow.parquet as pq

    table = pq.read_table(parquet_path).to_pydict()
    focal_id = str(table["focal_track_id"][0]) if table["focal_track_id"] else ""
    by_track: dict[str, list[int]] = {}
    for i, tid in enumerate(table["track_id"]):
        by_track.setdefault(str(tid), []).append(i)

    tracks = []
    for tid in sorted(by_track):
        rows = by_track[tid]
        positions = np.zeros((t_total, 2))
        velocities = np.zeros((t_total, 2))
        observed = np.zeros(t_total, dtype=bool)
        agent_type = "other"
        for i in rows:
            step = int(table["timestep"][i])
            if not 0 <= step < t_total:
                continue
            if not bool(table["observed"][i]):
                # rows can exist for unobserved timesteps; keep them hidden
                continue
            observed[step] = True
            positions[step] = (float(table["position_x"][i]), float(table["position_y"][i]))
            velocities[step] = (float(table["velocity_x"][i]), float(table["velocity_y"][i]))
            agent_type = AGENT_TYPE_MAP.get(str(table["object_type"][i]), "other")
        tracks.append(_Track(tid, agent_type, tid == focal_id, positions, velocities, observed))
    return tracks, focal_id


def _read_av2_lanes(map_path: str) -> list[dict]:
    with open(map_path, "r", encoding="utf-8") as f:
        archive = json.load(f)
    lanes = []
    segments = archive.get("lane_segments", {})
    for sid in sorted(segments, key=str):
        seg = segments[sid]
        pts = [[float(p["x"]), float(p["y"])] for p in seg["centerline"]]
        pts = _dedupe_consecutive(pts)
        if len(pts) >= 2:
            lanes.append({"id": f"lane-{sid}", "type": "lane", "centerline": pts})
    crossings = archive.get("pedestrian_crossings", {})
    for cid in sorted(crossings, key=str):
        cross = crossings[cid]
        e1 = [[float(p["x"]), float(p["y"])] for p in cross["edge1"]]
        e2 = [[float(p["x"]), float(p["y"])] for p in cross["edge2"]]
        n = min(len(e1), len(e2))
        mid = [[(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0] for a, b in zip(e1[:n], e2[:n])]
        mid = _dedupe_consecutive(mid)
        if len(mid) >= 2:
            lanes.append({"id": f"crosswalk-{cid}", "type": "crosswalk", "centerline": mid})
    return lanes


# ----------------------------------------------------------------------
# AV1
# ----------------------------------------------------------------------

def _discover_av1(source_dir: str) -> list[tuple[str, str, str]]:
    found = []
    for entry in sorted(os.listdir(source_dir)):
        if not entry.endswith(".csv"):
            continue
        sid = entry[:-len(".csv")]
        map_path = os.path.join(source_dir, f"{sid}_map.json")
        found.append((sid, os.path.join(source_dir, entry),
                      map_path if os.path.exists(map_path) else ""))
    return found


def _read_av1_tracks(csv_path: str, t_total: int) -> tuple[list[_Track], str]:
    with open(csv_path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ConversionError("empty track file")
    timestamps = sorted({float(r["TIMESTAMP"]) for r in rows})
    step_of = {ts: i for i, ts in enumerate(timestamps)}
    by_track: dict[str, list[dict]] = {}
    focal_id = ""
    for r in rows:
        tid = str(r["TRACK_ID"])
        by_track.setdefault(tid, []).append(r)
        if r["OBJECT_TYPE"] == "AGENT":
            focal_id = tid

    tracks = []
    for tid in sorted(by_track):
        positions = np.zeros((t_total, 2))
        observed = np.zeros(t_total, dtype=bool)
        for r in by_track[tid]:
            step = step_of[float(r["TIMESTAMP"])]
            if step >= t_total:
                continue
            observed[step] = True
            positions[step] = (float(r["X"]), float(r["Y"]))
        velocities = _finite_difference_velocities(positions, observed)
        tracks.append(_Track(tid, "vehicle", tid == focal_id, positions, velocities, observed))
    return tracks, focal_id


def _read_av1_lanes(map_path: str) -> list[dict]:
    with open(map_path, "r", encoding="utf-8") as f:
        data = json.load(f)
    lanes = []
    for lane in data.get("lanes", []):
        pts = _dedupe_consecutive([[float(x), float(y)] for x, y in lane["centerline"]])
        if len(pts) >= 2:
            lanes.append({"id": f"lane-{lane['id']}", "type": "lane", "centerline": pts})
    return lanes


# ----------------------------------------------------------------------
# emission
# ----------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _scenario_record(sid: str, t_h: int, t_f: int, tracks: list[_Track],
                     lanes: list[dict]) -> dict:
    return {
        "id": sid,
        "step_period": STEP_PERIOD,
        "t_h": t_h,
        "t_f": t_f,
        "agents": [
            {
                "id": tr.track_id,
                "type": tr.agent_type,
                "is_focal": tr.is_focal,
                "states": [
                    [float(x), float(y), float(vx), float(vy), bool(o)]
                    for (x, y), (vx, vy), o in zip(tr.positions, tr.velocities, tr.observed)
                ],
            }
            for tr in tracks
        ],
        "lanes": lanes,
    }


def convert(source_dir: str, out_file: str, profile: str) -> ConversionManifest:
    """Convert every discovered scenario; returns the manifest. Output is
    byte-deterministic for a fixed source tree."""
    if profile not in HORIZONS:
        raise ConversionError(f"unknown profile {profile!r}")
    t_h, t_f = HORIZONS[profile]
    t_total = t_h + t_f
    manifest = ConversionManifest(source=str(source_dir), profile=profile)

    discover = _discover_av2 if profile == "av2" else _discover_av1
    read_tracks = _read_av2_tracks if profile == "av2" else _read_av1_tracks
    read_lanes = _read_av2_lanes if profile == "av2" else _read_av1_lanes

    entries = discover(source_dir)
    manifest.discovered = len(entries)

    records = []
    for sid, track_path, map_path in entries:
        if not map_path:
            manifest.skip("missing_map")
            continue
        try:
            tracks, focal_id = read_tracks(track_path, t_total)
            lanes = read_lanes(map_path)
        except (ConversionError, KeyError, ValueError, OSError) as e:
            manifest.skip(f"malformed:{type(e).__name__}")
            continue
        focal = [tr for tr in tracks if tr.is_focal]
        if len(focal) != 1:
            manifest.skip("no_focal" if not focal else "multiple_focal")
            continue
        if not focal[0].observed[:t_h].all():
            manifest.skip("focal_history_incomplete")
            continue
        # zero out state at unobserved steps (converted tracks are padded)
        for tr in tracks:
            hidden = ~tr.observed
            tr.positions[hidden] = 0.0
            tr.velocities[hidden] = 0.0
        records.append(_scenario_record(sid, t_h, t_f, tracks, lanes))
        manifest.converted += 1

    with open(out_file, "w", encoding="utf-8") as f:
        f.write(_dump({"schema": SCHEMA, "profile": profile, "count": len(records)}) + "\n")
        for rec in records:
            f.write(_dump(rec) + "\n")
    return manifest


# ----------------------------------------------------------------------
# verification
# ----------------------------------------------------------------------

def verify(out_file: str) -> dict:
    """Re-read a converted file and check schema, track lengths and focal
    uniqueness. Returns a summary dict; raises ConversionError on failure."""
    with open(out_file, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        return {"schema": SCHEMA, "scenarios": 0, "agents": 0, "lanes": 0}
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA:
        raise ConversionError(f"bad schema {header.get('schema')!r}")
    agents = lanes = 0
    for i, ln in enumerate(lines[1:], start=2):
        rec = json.loads(ln)
        t_total = rec["t_h"] + rec["t_f"]
        focal = [a for a in rec["agents"] if a["is_focal"]]
        if len(focal) != 1:
            raise ConversionError(f"line {i}: {len(focal)} focal agents in {rec['id']!r}")
        for a in rec["agents"]:
            if len(a["states"]) != t_total:
                raise ConversionError(
                    f"line {i}: track {a['id']!r} has {len(a['states'])} states, "
                    f"expected {t_total}"
                )
        for lane in rec["lanes"]:
            if len(lane["centerline"]) < 2:
                raise ConversionError(f"line {i}: lane {lane['id']!r} too short")
        agents += len(rec["agents"])
        lanes += len(rec["lanes"])
    return {
        "schema": SCHEMA,
        "profile": header.get("profile"),
        "scenarios": len(lines) - 1,
        "agents": agents,
        "lanes": lanes,
    }
