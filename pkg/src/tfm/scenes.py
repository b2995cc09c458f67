"""Synthetic BEV scenes with exact ground truth.

A scene is a handful of lane corridors, vehicles that follow lane
centerlines with bounded lateral noise, pedestrians that keep off the road,
and an ego vehicle driving a prescribed path. The generator emits the same
JSONL byte formats the extraction stage consumes, plus a ground-truth object
good enough to serve as an oracle: every vehicle center is guaranteed to lie
inside a lane corridor at every frame.

Randomness discipline: one seed per scene, split into independent child
streams per concern (vehicles, pedestrians, occlusion, drops). Occlusion
and frame drops are realized by thresholding pre-drawn uniform matrices, so
raising a rate can only add events for a fixed seed — this is what makes the
"more occlusion never yields more valid bits" property testable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InfeasibleError, InputError
from .flow import DEFAULT_RANGE, FlowFrameSet, RangeSpec
from .geometry import PointBEV, RigidPose, apply, invert

GRID_CELL = 0.5
LANE_WIDTH = 3.5
MIN_VEHICLE_SPACING = 8.0
FRAME_DT = 0.1


# ---------------------------------------------------------------------------
# polylines
# ---------------------------------------------------------------------------


class Polyline:
    """Arc-length-parameterized planar polyline."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise InputError(f"polyline needs shape (n>=2, 2), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise InputError("polyline has non-finite points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if (seg_len <= 0).any():
            raise InputError("polyline has zero-length segments")
        self.points = pts
        self._seg = seg
        self._seg_len = seg_len
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self._cum, s, side="right")) - 1, len(self._seg) - 1)
        t = (s - self._cum[i]) / self._seg_len[i]
        return self.points[i] + t * self._seg[i]

    def tangent_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self._cum, s, side="right")) - 1, len(self._seg) - 1)
        return self._seg[i] / self._seg_len[i]

    def min_distance(self, query: np.ndarray) -> np.ndarray:
        """Min distance from each query point (..., 2) to the polyline."""
        q = np.asarray(query, dtype=float).reshape(-1, 2)
        best = np.full(q.shape[0], np.inf)
        a = self.points[:-1]
        chunk = max(1, 200_000 // max(1, len(self._seg)))
        for start in range(0, q.shape[0], chunk):
            block = q[start : start + chunk]  # (b, 2)
            rel = block[:, None, :] - a[None, :, :]  # (b, s, 2)
            t = np.einsum("bsk,sk->bs", rel, self._seg) / (self._seg_len**2)
            t = np.clip(t, 0.0, 1.0)
            proj = a[None, :, :] + t[..., None] * self._seg[None, :, :]
            d = np.hypot(block[:, None, 0] - proj[..., 0], block[:, None, 1] - proj[..., 1])
            best[start : start + chunk] = d.min(axis=1)
        return best.reshape(np.asarray(query, dtype=float).shape[:-1])

    def is_simple(self) -> bool:
        """True when no two non-adjacent segments intersect."""
        x = self.points[:, 0]
        if np.all(np.diff(x) > 0) or np.all(np.diff(x) < 0):
            return True  # monotone in x -> simple
        n = len(self._seg)
        for i in range(n):
            for j in range(i + 2, n):
                if _segments_cross(
                    self.points[i], self.points[i + 1], self.points[j], self.points[j + 1]
                ):
                    return False
        return True


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _segments_cross(p1, p2, p3, p4) -> bool:
    d1 = _cross2(p4 - p3, p1 - p3)
    d2 = _cross2(p4 - p3, p2 - p3)
    d3 = _cross2(p2 - p1, p3 - p1)
    d4 = _cross2(p2 - p1, p4 - p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


# ---------------------------------------------------------------------------
# scene specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LaneSpec:
    points: np.ndarray  # (n, 2) world-frame centerline
    width: float = LANE_WIDTH

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        if self.width <= 0:
            raise InputError(f"lane width must be positive, got {self.width}")


@dataclass(frozen=True, eq=False)
class SceneSpec:
    seed: int
    lanes: Tuple[LaneSpec, ...]
    n_vehicles: int
    n_pedestrians: int
    occlusion_rate: float
    frame_drop_rate: float
    frames: int
    ego_path: np.ndarray  # (m, 2) world-frame polyline

    def __post_init__(self) -> None:
        object.__setattr__(self, "ego_path", np.asarray(self.ego_path, dtype=float))
        object.__setattr__(self, "lanes", tuple(self.lanes))
        for rate, label in ((self.occlusion_rate, "occlusion_rate"), (self.frame_drop_rate, "frame_drop_rate")):
            if not 0.0 <= rate <= 1.0:
                raise InputError(f"{label} must lie in [0, 1], got {rate}")
        if self.frames < 2:
            raise InputError(f"frames must be >= 2, got {self.frames}")
        if self.n_vehicles < 0 or self.n_pedestrians < 0:
            raise InputError("object counts must be non-negative")
        if not self.lanes:
            raise InputError("scene needs at least one lane")
        for k, lane in enumerate(self.lanes):
            if not Polyline(lane.points).is_simple():
                raise InputError(f"lane {k} self-intersects at sampling resolution")
        Polyline(self.ego_path)  # validates shape/finiteness

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "lanes": [
                {"points": lane.points.tolist(), "width": lane.width} for lane in self.lanes
            ],
            "n_vehicles": self.n_vehicles,
            "n_pedestrians": self.n_pedestrians,
            "occlusion_rate": self.occlusion_rate,
            "frame_drop_rate": self.frame_drop_rate,
            "frames": self.frames,
            "ego_path": self.ego_path.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {
            "seed", "lanes", "n_vehicles", "n_pedestrians",
            "occlusion_rate", "frame_drop_rate", "frames", "ego_path",
        }
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown scene spec keys: {sorted(unknown)}")
        try:
            lanes = tuple(
                LaneSpec(np.asarray(l["points"], dtype=float), float(l.get("width", LANE_WIDTH)))
                for l in d["lanes"]
            )
            return cls(
                seed=int(d["seed"]),
                lanes=lanes,
                n_vehicles=int(d["n_vehicles"]),
                n_pedestrians=int(d["n_pedestrians"]),
                occlusion_rate=float(d["occlusion_rate"]),
                frame_drop_rate=float(d["frame_drop_rate"]),
                frames=int(d["frames"]),
                ego_path=np.asarray(d["ego_path"], dtype=float),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed scene spec: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"scene spec is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def default_scene_spec(
    seed: int,
    *,
    n_lanes: int = 2,
    n_vehicles: int = 4,
    n_pedestrians: int = 2,
    occlusion_rate: float = 0.15,
    frame_drop_rate: float = 0.05,
    frames: int = 30,
) -> SceneSpec:
    """Two gently curved parallel lanes; ego approaches the curve along lane 0.

    The world frame coincides with the final ego frame: lanes run straight
    for x < 0 and bend with a per-seed curvature for x > 0, so the curved
    stretch lies ahead of the ego at the last frame.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FFEE]))
    curvature = float(rng.uniform(-0.008, 0.008))
    lateral_jitter = float(rng.uniform(-0.8, 0.8))
    xs = np.arange(-80.0, 80.0 + 1e-9, 1.0)
    bend = 0.5 * curvature * np.maximum(0.0, xs) ** 2
    lanes = []
    for j in range(n_lanes):
        y0 = lateral_jitter + j * LANE_WIDTH
        pts = np.stack([xs, y0 + bend], axis=1)
        lanes.append(LaneSpec(pts))
    ego_xs = xs[xs <= 0.0]
    ego_path = np.stack([ego_xs, np.full(ego_xs.shape, lateral_jitter)], axis=1)
    return SceneSpec(
        seed=seed,
        lanes=tuple(lanes),
        n_vehicles=n_vehicles,
        n_pedestrians=n_pedestrians,
        occlusion_rate=occlusion_rate,
        frame_drop_rate=frame_drop_rate,
        frames=frames,
        ego_path=ego_path,
    )


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrackTruth:
    track_id: str
    category: str
    world_xy: np.ndarray  # (frames, 2)
    occluded: np.ndarray  # (frames,) bool
    dropped: np.ndarray  # (frames,) bool


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Exact world-frame scene state plus a rasterized navigability grid.

    `navigable` is rendered in the final frame's ego coordinates over
    `range_spec` at `cell` resolution; for other frames use
    `navigable_grid` with the wanted pose. A cell is navigable when its
    center lies within half a lane width (plus half a cell diagonal of
    rasterization slack) of some lane centerline.
    """

    lanes: Tuple[LaneSpec, ...]
    tracks: Tuple[TrackTruth, ...]
    ego_poses: np.ndarray  # (frames, 3) x, y, yaw
    range_spec: RangeSpec
    cell: float
    navigable: np.ndarray = field(repr=False)  # (nx, ny) bool, final ego frame

    @property
    def frames(self) -> int:
        return self.ego_poses.shape[0]

    def final_pose(self) -> RigidPose:
        x, y, yaw = self.ego_poses[-1]
        return RigidPose(float(x), float(y), float(yaw))

    def navigable_grid(self, pose: RigidPose, range_spec: RangeSpec, cell: float) -> np.ndarray:
        return rasterize_navigable(self.lanes, pose, range_spec, cell)

    def to_dict(self) -> dict:
        return {
            "lanes": [{"points": l.points.tolist(), "width": l.width} for l in self.lanes],
            "tracks": [
                {
                    "track_id": t.track_id,
                    "category": t.category,
                    "world_xy": t.world_xy.tolist(),
                    "occluded": t.occluded.astype(int).tolist(),
                    "dropped": t.dropped.astype(int).tolist(),
                }
                for t in self.tracks
            ],
            "ego_poses": self.ego_poses.tolist(),
            "range": list(self.range_spec.as_tuple()),
            "cell": self.cell,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        try:
            lanes = tuple(
                LaneSpec(np.asarray(l["points"], dtype=float), float(l["width"]))
                for l in d["lanes"]
            )
            tracks = tuple(
                TrackTruth(
                    str(t["track_id"]),
                    str(t["category"]),
                    np.asarray(t["world_xy"], dtype=float),
                    np.asarray(t["occluded"], dtype=bool),
                    np.asarray(t["dropped"], dtype=bool),
                )
                for t in d["tracks"]
            )
            ego_poses = np.asarray(d["ego_poses"], dtype=float)
            range_spec = RangeSpec(*[float(v) for v in d["range"]])
            cell = float(d["cell"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed ground truth document: {exc}") from exc
        x, y, yaw = ego_poses[-1]
        navigable = rasterize_navigable(lanes, RigidPose(float(x), float(y), float(yaw)), range_spec, cell)
        return cls(lanes, tracks, ego_poses, range_spec, cell, navigable)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"ground truth is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def grid_shape(range_spec: RangeSpec, cell: float) -> Tuple[int, int]:
    nx = int(round((range_spec.x_max - range_spec.x_min) / cell))
    ny = int(round((range_spec.y_max - range_spec.y_min) / cell))
    return max(nx, 1), max(ny, 1)


def cell_index(range_spec: RangeSpec, cell: float, x: float, y: float) -> Optional[Tuple[int, int]]:
    """Cell of an in-range point; None outside. Upper edges fold inward."""
    if not (range_spec.x_min <= x <= range_spec.x_max and range_spec.y_min <= y <= range_spec.y_max):
        return None
    nx, ny = grid_shape(range_spec, cell)
    ix = min(int((x - range_spec.x_min) / cell), nx - 1)
    iy = min(int((y - range_spec.y_min) / cell), ny - 1)
    return ix, iy


def cell_centers(range_spec: RangeSpec, cell: float) -> np.ndarray:
    nx, ny = grid_shape(range_spec, cell)
    xs = range_spec.x_min + (np.arange(nx) + 0.5) * cell
    ys = range_spec.y_min + (np.arange(ny) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx, gy], axis=-1)  # (nx, ny, 2)


def rasterize_navigable(
    lanes: Sequence[LaneSpec], pose: RigidPose, range_spec: RangeSpec, cell: float
) -> np.ndarray:
    """Boolean (nx, ny) grid of lane-corridor cells in `pose`'s ego frame."""
    centers = cell_centers(range_spec, cell)  # ego frame
    flat = centers.reshape(-1, 2)
    # ego -> world: rotate by yaw then translate
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    world = np.empty_like(flat)
    world[:, 0] = pose.x + c * flat[:, 0] - s * flat[:, 1]
    world[:, 1] = pose.y + s * flat[:, 0] + c * flat[:, 1]
    slack = 0.5 * cell * math.sqrt(2.0)
    navigable = np.zeros(flat.shape[0], dtype=bool)
    for lane in lanes:
        d = Polyline(lane.points).min_distance(world)
        navigable |= d <= (0.5 * lane.width + slack)
    return navigable.reshape(centers.shape[:2])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SceneData:
    trajectory_jsonl: str
    pose_jsonl: str
    ground_truth: GroundTruth


def _json_num(x: float) -> float:
    # round to keep logs compact; 1e-6 m is far below any tolerance in play
    return round(float(x), 6)


def generate(
    spec: SceneSpec,
    range_spec: RangeSpec = DEFAULT_RANGE,
    cell: float = GRID_CELL,
) -> SceneData:
    """Simulate the scene and render the extraction-stage input logs."""
    ss = np.random.SeedSequence([int(spec.seed), 0x5CE7E])
    rng_vehicle, rng_ped, rng_occl, rng_drop = [
        np.random.default_rng(child) for child in ss.spawn(4)
    ]

    ego = Polyline(spec.ego_path)
    # ego covers its whole path at constant arc speed, last frame at the end
    ego_s = np.linspace(0.0, ego.length, spec.frames)
    ego_poses = np.empty((spec.frames, 3))
    for f, s in enumerate(ego_s):
        p = ego.point_at(s)
        t = ego.tangent_at(s)
        ego_poses[f] = (p[0], p[1], math.atan2(t[1], t[0]))

    lanes = [Polyline(lane.points) for lane in spec.lanes]

    # --- vehicles: slot-based placement guarantees the minimum spacing ---
    slot_count = [max(0, int(l.length // MIN_VEHICLE_SPACING)) for l in lanes]
    if spec.n_vehicles > sum(slot_count):
        raise InfeasibleError(
            f"{spec.n_vehicles} vehicles exceed total lane capacity "
            f"{sum(slot_count)} at {MIN_VEHICLE_SPACING} m spacing"
        )
    per_lane = [0] * len(lanes)
    for k in range(spec.n_vehicles):
        # round-robin over lanes that still have room
        j = k % len(lanes)
        for probe in range(len(lanes)):
            cand = (j + probe) % len(lanes)
            if per_lane[cand] < slot_count[cand]:
                per_lane[cand] += 1
                break
    tracks: List[TrackTruth] = []
    vehicle_idx = 0
    for j, lane in enumerate(lanes):
        if per_lane[j] == 0:
            continue
        slots = rng_vehicle.choice(slot_count[j], size=per_lane[j], replace=False)
        slots.sort()
        lane_speed = float(rng_vehicle.uniform(1.2, 2.4))  # m per frame, shared per lane
        lane_offset = float(rng_vehicle.uniform(0.0, MIN_VEHICLE_SPACING / 2))
        half = 0.5 * spec.lanes[j].width
        for slot in slots:
            base_lat = float(rng_vehicle.uniform(-0.25, 0.25) * half)
            jitter = rng_vehicle.normal(0.0, 0.05 * half, size=spec.frames)
            lateral = np.clip(base_lat + jitter, -0.45 * half, 0.45 * half)
            s0 = slot * MIN_VEHICLE_SPACING + lane_offset
            world = np.empty((spec.frames, 2))
            for f in range(spec.frames):
                s = min(s0 + lane_speed * f, lane.length)
                p = lane.point_at(s)
                t = lane.tangent_at(s)
                normal = np.array([-t[1], t[0]])
                world[f] = p + lateral[f] * normal
            tracks.append(
                TrackTruth(
                    track_id=f"veh-{vehicle_idx:03d}",
                    category="vehicle",
                    world_xy=world,
                    occluded=np.zeros(spec.frames, dtype=bool),
                    dropped=np.zeros(spec.frames, dtype=bool),
                )
            )
            vehicle_idx += 1

    # --- pedestrians: random walks kept off every lane corridor ---
    margin = 1.0
    lo = np.min(spec.ego_path, axis=0) - 20.0
    hi = np.max(spec.ego_path, axis=0) + 20.0

    def off_road(p: np.ndarray) -> bool:
        return all(
            float(lane.min_distance(p[None, :])[0]) > 0.5 * ls.width + margin
            for lane, ls in zip(lanes, spec.lanes)
        )

    for k in range(spec.n_pedestrians):
        for _ in range(200):
            start = rng_ped.uniform(lo, hi)
            if off_road(start):
                break
        else:
            raise InfeasibleError("could not place a pedestrian off-road in 200 draws")
        world = np.empty((spec.frames, 2))
        world[0] = start
        for f in range(1, spec.frames):
            step = rng_ped.normal(0.0, 0.3, size=2)
            nxt = world[f - 1] + step
            world[f] = nxt if off_road(nxt) else world[f - 1] - step
        tracks.append(
            TrackTruth(
                track_id=f"ped-{k:03d}",
                category="pedestrian",
                world_xy=world,
                occluded=np.zeros(spec.frames, dtype=bool),
                dropped=np.zeros(spec.frames, dtype=bool),
            )
        )

    # --- occlusion / frame drops via rate-independent uniform draws ---
    n_tracks = len(tracks)
    u_occl = rng_occl.uniform(size=(max(n_tracks, 1), spec.frames))
    u_drop = rng_drop.uniform(size=(max(n_tracks, 1), spec.frames))
    for i, track in enumerate(tracks):
        track.occluded[:] = u_occl[i] < spec.occlusion_rate
        track.dropped[:] = u_drop[i] < spec.frame_drop_rate

    # --- logs ---
    pose_lines = []
    for f in range(spec.frames):
        x, y, yaw = ego_poses[f]
        pose_lines.append(
            json.dumps(
                {
                    "frame": f,
                    "t": _json_num(f * FRAME_DT),
                    "x": _json_num(x),
                    "y": _json_num(y),
                    "yaw": _json_num(yaw),
                },
                sort_keys=True,
            )
        )
    traj_lines = []
    for f in range(spec.frames):
        pose = RigidPose(*ego_poses[f])
        to_ego = invert(pose)
        for track in tracks:
            if track.dropped[f]:
                continue
            local = apply(to_ego, PointBEV(*track.world_xy[f]))
            traj_lines.append(
                json.dumps(
                    {
                        "cat": track.category,
                        "frame": f,
                        "id": track.track_id,
                        "occluded": bool(track.occluded[f]),
                        "x": _json_num(local.x),
                        "y": _json_num(local.y),
                    },
                    sort_keys=True,
                )
            )

    final_pose = RigidPose(*ego_poses[-1])
    truth = GroundTruth(
        lanes=spec.lanes,
        tracks=tuple(tracks),
        ego_poses=ego_poses,
        range_spec=range_spec,
        cell=cell,
        navigable=rasterize_navigable(spec.lanes, final_pose, range_spec, cell),
    )
    return SceneData(
        trajectory_jsonl="\n".join(traj_lines) + ("\n" if traj_lines else ""),
        pose_jsonl="\n".join(pose_lines) + "\n",
        ground_truth=truth,
    )


# ---------------------------------------------------------------------------
# flow occupancy oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Cells touched by flow: vehicles are navigability evidence, pedestrian
    cells form a separate non-navigable channel. Cyclists/others are tracked
    but mark neither channel."""

    range_spec: RangeSpec
    cell: float
    vehicle: np.ndarray  # (nx, ny) bool
    pedestrian: np.ndarray  # (nx, ny) bool


def flow_occupancy_oracle(
    flow: FlowFrameSet, range_spec: RangeSpec, cell: float = GRID_CELL
) -> OccupancyGrid:
    if cell <= 0:
        raise InputError(f"cell size must be positive, got {cell}")
    nx, ny = grid_shape(range_spec, cell)
    vehicle = np.zeros((nx, ny), dtype=bool)
    pedestrian = np.zeros((nx, ny), dtype=bool)
    for inst in flow.instances:
        target = vehicle if inst.category == "vehicle" else (
            pedestrian if inst.category == "pedestrian" else None
        )
        if target is None:
            continue
        for slot in inst.slots.values():
            idx = cell_index(range_spec, cell, slot.center.x, slot.center.y)
            if idx is not None:
                target[idx] = True
    return OccupancyGrid(range_spec, cell, vehicle, pedestrian)


def write_pgm(path, grid: np.ndarray, levels: Tuple[int, int] = (0, 255)) -> None:
    """Dump a boolean or grey (nx, ny) grid as ASCII PGM, north-up.

    Rows run from y_max down to y_min, columns from x_min to x_max, so the
    image reads like a map with the ego x-axis pointing right.
    """
    arr = np.asarray(grid)
    if arr.dtype == bool:
        lo, hi = levels
        arr = np.where(arr, hi, lo)
    arr = arr.astype(int)
    img = arr.T[::-1]  # (ny, nx), top row = y_max
    lines = [f"P2", f"{img.shape[1]} {img.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in img]
    with open(path, "w", encoding="ascii") as fp:
        fp.write("\n".join(lines) + "\n")
