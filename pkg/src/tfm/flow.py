"""Traffic-flow extraction: tracked-object logs -> current-ego-frame flow sets.

Input is two JSONL streams. The trajectory log has one record per
observation, coordinates expressed in the ego frame of the record's own
frame index::

    {"frame": 12, "id": "veh-3", "cat": "vehicle", "x": 8.1, "y": -0.4,
     "occluded": false}

The pose log has one record per frame describing the ego body pose in a
fixed world frame::

    {"frame": 12, "t": 1.2, "x": 30.5, "y": 2.0, "yaw": 0.01}

`parse_log` groups the historical window by track id and warps every center
into the current frame's coordinates; no smoothing or interpolation is
applied. Occluded observations survive parsing and clipping — downstream
temporal masking consumes the flag, deletion here would lose it.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, IO, Iterable, Iterator, List, Tuple, Union

from .errors import InputError
from .geometry import PointBEV, RigidPose, apply, compose_relative

CATEGORIES: Tuple[str, ...] = ("vehicle", "pedestrian", "cyclist", "other")

LineSource = Union[str, Path, bytes, IO[str], IO[bytes], Iterable[str]]


@dataclass(frozen=True)
class RangeSpec:
    """Axis-aligned BEV rectangle, closed on all boundaries."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InputError(
                f"degenerate range [{self.x_min}, {self.x_max}] x [{self.y_min}, {self.y_max}]"
            )

    def contains(self, p: PointBEV) -> bool:
        return self.x_min <= p.x <= self.x_max and self.y_min <= p.y <= self.y_max

    def normalize(self, p: PointBEV) -> Tuple[float, float]:
        """Map a point inside the range onto [-1, 1] x [-1, 1]."""
        nx = 2.0 * (p.x - self.x_min) / (self.x_max - self.x_min) - 1.0
        ny = 2.0 * (p.y - self.y_min) / (self.y_max - self.y_min) - 1.0
        return nx, ny

    def corner_distance(self) -> float:
        """Distance from the ego origin to the farthest rectangle corner."""
        return math.hypot(
            max(abs(self.x_min), abs(self.x_max)),
            max(abs(self.y_min), abs(self.y_max)),
        )

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.x_max, self.y_min, self.y_max)


DEFAULT_RANGE = RangeSpec(-50.0, 50.0, -25.0, 25.0)


@dataclass(frozen=True)
class ObjectObservation:
    """One tracked-object sighting in one frame."""

    frame: int
    track_id: str
    category: str
    center: PointBEV
    occluded: bool

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise InputError(f"category {self.category!r} not in {CATEGORIES}")


@dataclass(frozen=True)
class FrameSlot:
    """Per-historical-frame payload inside a flow instance."""

    center: PointBEV
    occluded: bool


@dataclass(frozen=True)
class FlowInstance:
    """All retained observations of one track id, keyed by frame index."""

    track_id: str
    category: str
    slots: Dict[int, FrameSlot]

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise InputError(f"category {self.category!r} not in {CATEGORIES}")


@dataclass(frozen=True)
class ParseStats:
    """Bookkeeping from parsing; excluded from equality comparisons."""

    records: int = 0
    parsed: int = 0
    out_of_window: int = 0
    unknown_category: int = 0


@dataclass(frozen=True)
class FlowFrameSet:
    """Warped historical observations for one current frame.

    Every stored center is expressed in the current frame's ego
    coordinates. Instances are kept sorted by track id so that equal
    content compares (and serializes) identically regardless of input
    ordering.
    """

    current_frame: int
    window: int
    instances: Tuple[FlowInstance, ...]
    stats: ParseStats = field(default_factory=ParseStats, compare=False)

    def __post_init__(self) -> None:
        ids = [inst.track_id for inst in self.instances]
        if ids != sorted(ids):
            raise ValueError("instances must be sorted by track_id")
        lo, hi = self.current_frame - self.window, self.current_frame - 1
        for inst in self.instances:
            for f in inst.slots:
                if not lo <= f <= hi:
                    raise ValueError(
                        f"track {inst.track_id!r} frame {f} outside historical "
                        f"window [{lo}, {hi}]"
                    )

    def to_dict(self) -> dict:
        return {
            "current_frame": self.current_frame,
            "window": self.window,
            "instances": [
                {
                    "track_id": inst.track_id,
                    "category": inst.category,
                    "observations": [
                        {
                            "frame": f,
                            "x": slot.center.x,
                            "y": slot.center.y,
                            "occluded": slot.occluded,
                        }
                        for f, slot in sorted(inst.slots.items())
                    ],
                }
                for inst in self.instances
            ],
            "stats": {
                "records": self.stats.records,
                "parsed": self.stats.parsed,
                "out_of_window": self.stats.out_of_window,
                "unknown_category": self.stats.unknown_category,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowFrameSet":
        try:
            instances = []
            for rec in d["instances"]:
                slots = {
                    int(obs["frame"]): FrameSlot(
                        PointBEV(float(obs["x"]), float(obs["y"])), bool(obs["occluded"])
                    )
                    for obs in rec["observations"]
                }
                instances.append(FlowInstance(str(rec["track_id"]), str(rec["category"]), slots))
            instances.sort(key=lambda i: i.track_id)
            stats = d.get("stats", {})
            return cls(
                current_frame=int(d["current_frame"]),
                window=int(d["window"]),
                instances=tuple(instances),
                stats=ParseStats(
                    records=int(stats.get("records", 0)),
                    parsed=int(stats.get("parsed", 0)),
                    out_of_window=int(stats.get("out_of_window", 0)),
                    unknown_category=int(stats.get("unknown_category", 0)),
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed flow set document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FlowFrameSet":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"flow set is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


# ---------------------------------------------------------------------------
# JSONL parsing
# ---------------------------------------------------------------------------


def _iter_lines(source: LineSource, label: str) -> Iterator[Tuple[int, str]]:
    """Yield (1-based line number, text line) from a path, bytes, or stream."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fp:
            yield from enumerate(fp, start=1)
        return
    if isinstance(source, bytes):
        source = io.StringIO(source.decode("utf-8"))
    for lineno, raw in enumerate(source, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        yield lineno, raw


def _parse_jsonl(source: LineSource, label: str, fields: Dict[str, type]) -> Iterator[dict]:
    """Parse a JSONL stream, validating field presence and types per record."""
    for lineno, raw in _iter_lines(source, label):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{label} line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise InputError(f"{label} line {lineno}: record is not an object")
        out = {}
        for name, typ in fields.items():
            if name not in rec:
                raise InputError(f"{label} line {lineno}: missing field {name!r}")
            value = rec[name]
            if typ is float:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise InputError(f"{label} line {lineno}: field {name!r} is not a number")
                value = float(value)
                if not math.isfinite(value):
                    raise InputError(f"{label} line {lineno}: field {name!r} is not finite")
            elif typ is int:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise InputError(f"{label} line {lineno}: field {name!r} is not an integer")
            elif typ is bool:
                if not isinstance(value, bool):
                    raise InputError(f"{label} line {lineno}: field {name!r} is not a boolean")
            elif typ is str:
                if not isinstance(value, str):
                    raise InputError(f"{label} line {lineno}: field {name!r} is not a string")
            out[name] = value
        yield out


_TRAJ_FIELDS = {"frame": int, "id": str, "cat": str, "x": float, "y": float, "occluded": bool}
_POSE_FIELDS = {"frame": int, "t": float, "x": float, "y": float, "yaw": float}


def read_poses(pose_jsonl: LineSource) -> Dict[int, RigidPose]:
    """Read a pose log into a frame -> RigidPose map."""
    poses: Dict[int, RigidPose] = {}
    for rec in _parse_jsonl(pose_jsonl, "pose log", _POSE_FIELDS):
        frame = rec["frame"]
        if frame in poses:
            raise InputError(f"pose log: duplicate pose for frame {frame}")
        poses[frame] = RigidPose(rec["x"], rec["y"], rec["yaw"])
    return poses


def parse_log(
    trajectory_jsonl: LineSource,
    pose_jsonl: LineSource,
    current_frame: int,
    window: int,
) -> FlowFrameSet:
    """Group and warp the historical window into the current ego frame.

    Observations at frames [current_frame - window, current_frame - 1] are
    grouped by track id; each center is carried from its own ego frame into
    the current one via the relative pose between the two frames.
    Observations outside the window are skipped (counted in stats).
    """
    if window < 1:
        raise InputError(f"window must be >= 1, got {window}")
    poses = read_poses(pose_jsonl)
    if current_frame not in poses:
        raise InputError(f"missing pose for current frame {current_frame}")
    pose_now = poses[current_frame]

    lo, hi = current_frame - window, current_frame - 1
    stats = {"records": 0, "parsed": 0, "out_of_window": 0, "unknown_category": 0}
    grouped: Dict[str, Dict[int, FrameSlot]] = {}
    categories: Dict[str, str] = {}
    warp_cache: Dict[int, object] = {}

    for rec in _parse_jsonl(trajectory_jsonl, "trajectory log", _TRAJ_FIELDS):
        stats["records"] += 1
        frame = rec["frame"]
        if not lo <= frame <= hi:
            stats["out_of_window"] += 1
            continue
        if frame not in poses:
            raise InputError(f"missing pose for frame {frame}")
        if frame not in warp_cache:
            warp_cache[frame] = compose_relative(pose_now, poses[frame])

        cat = rec["cat"]
        if cat not in CATEGORIES:
            stats["unknown_category"] += 1
            cat = "other"
        track_id = rec["id"]
        known_cat = categories.setdefault(track_id, cat)
        if known_cat != cat:
            raise InputError(
                f"track {track_id!r} changes category {known_cat!r} -> {cat!r}"
            )

        slots = grouped.setdefault(track_id, {})
        if frame in slots:
            raise InputError(f"track {track_id!r} has duplicate observation at frame {frame}")
        warped = apply(warp_cache[frame], PointBEV(rec["x"], rec["y"]))
        slots[frame] = FrameSlot(warped, rec["occluded"])
        stats["parsed"] += 1

    instances = tuple(
        FlowInstance(track_id, categories[track_id], grouped[track_id])
        for track_id in sorted(grouped)
    )
    return FlowFrameSet(
        current_frame=current_frame,
        window=window,
        instances=instances,
        stats=ParseStats(**stats),
    )


def clip_to_range(flow: FlowFrameSet, range_spec: RangeSpec) -> FlowFrameSet:
    """Drop observations outside the (closed) range; drop emptied instances."""
    kept: List[FlowInstance] = []
    for inst in flow.instances:
        slots = {f: s for f, s in inst.slots.items() if range_spec.contains(s.center)}
        if slots:
            kept.append(FlowInstance(inst.track_id, inst.category, slots))
    return FlowFrameSet(
        current_frame=flow.current_frame,
        window=flow.window,
        instances=tuple(kept),
        stats=flow.stats,
    )
