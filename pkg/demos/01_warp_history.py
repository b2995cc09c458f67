"""Warp object history into the current ego frame.

The package's first job is bookkeeping rigor: every historical sighting of
every tracked object, logged in the ego frame of *its own* moment, must be
re-expressed in the ego frame of *now*. This demo builds two tiny logs by
hand — one straight drive, one left turn — and shows the warped results,
including the hand-checkable values.
"""

from __future__ import annotations

import json
import math

from tfm.flow import RangeSpec, clip_to_range, parse_log


def jsonl(*records):
    return [json.dumps(r) for r in records]


def show(flow, title):
    print(f"\n{title}")
    print(f"  current frame {flow.current_frame}, window {flow.window}, "
          f"{len(flow.instances)} instance(s)")
    for inst in flow.instances:
        print(f"  track {inst.track_id!r} ({inst.category}):")
        for frame, slot in sorted(inst.slots.items(), reverse=True):
            tag = " (occluded)" if slot.occluded else ""
            print(f"    frame {frame}: ({slot.center.x:+.3f}, {slot.center.y:+.3f}){tag}")


def main() -> None:
    print("== Straight drive: the hand-checkable case ==")
    print("Ego advances 1 m per frame; a parked car sits at each frame's origin.")
    print("Three frames later those sightings must lie exactly 1, 2, 3 m behind.")

    poses = jsonl(
        *[{"frame": f, "t": 0.1 * f, "x": float(f), "y": 0.0, "yaw": 0.0} for f in range(4)]
    )
    traj = jsonl(
        *[{"frame": f, "id": "parked", "cat": "vehicle", "x": 0.0, "y": 0.0, "occluded": False}
          for f in range(3)]
    )
    flow = parse_log(traj, poses, current_frame=3, window=3)
    show(flow, "Warped into frame 3 (exact, no tolerance):")

    print("\n== Left turn: rotation matters as much as translation ==")
    print("The ego turns 90 degrees left between sightings. A car that was dead")
    print("ahead at 5 m is now to the ego's right — at (0, -5) in the new frame.")
    poses = jsonl(
        {"frame": 0, "t": 0.0, "x": 0.0, "y": 0.0, "yaw": 0.0},
        {"frame": 1, "t": 0.1, "x": 0.0, "y": 0.0, "yaw": math.pi / 2},
    )
    traj = jsonl(
        {"frame": 0, "id": "ahead", "cat": "vehicle", "x": 5.0, "y": 0.0, "occluded": False},
    )
    flow = parse_log(traj, poses, current_frame=1, window=1)
    show(flow, "Warped into the post-turn frame:")

    print("\n== Clipping to the perceptual range ==")
    print("Observations beyond the sensing rectangle are dropped; tracks that")
    print("lose every observation disappear entirely.")
    poses = jsonl(
        *[{"frame": f, "t": 0.1 * f, "x": 0.0, "y": 0.0, "yaw": 0.0} for f in range(3)]
    )
    traj = jsonl(
        {"frame": 0, "id": "near", "cat": "vehicle", "x": 8.0, "y": 1.0, "occluded": False},
        {"frame": 1, "id": "near", "cat": "vehicle", "x": 40.0, "y": 1.0, "occluded": False},
        {"frame": 0, "id": "far", "cat": "vehicle", "x": 200.0, "y": 0.0, "occluded": False},
    )
    flow = parse_log(traj, poses, current_frame=2, window=2)
    clipped = clip_to_range(flow, RangeSpec(-15.0, 15.0, -10.0, 10.0))
    show(flow, "Before clipping:")
    show(clipped, "After clipping to [-15, 15] x [-10, 10]:")
    print("\n'near' kept only its in-range sighting; 'far' vanished.")


if __name__ == "__main__":
    main()
