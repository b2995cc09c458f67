"""Shared fixtures: canonical logs and a generated scene directory."""

from __future__ import annotations

import json

import numpy as np
import pytest

from tfm.scenes import default_scene_spec, generate


def jsonl(*records: dict) -> list[str]:
    return [json.dumps(r) for r in records]


@pytest.fixture()
def hand_case_logs() -> tuple[list[str], list[str]]:
    """Advancing ego at x = 0..3, one object observed at the ego's own origin
    in frames 0..2. In frame 3 coordinates those sightings sit at
    (-1, 0), (-2, 0), (-3, 0) — the frame-k observation lands k-3 behind.
    """
    poses = jsonl(
        *[{"frame": f, "t": 0.1 * f, "x": float(f), "y": 0.0, "yaw": 0.0} for f in range(4)]
    )
    traj = jsonl(
        *[
            {"frame": f, "id": "m-1", "cat": "vehicle", "x": 0.0, "y": 0.0, "occluded": False}
            for f in range(3)
        ]
    )
    return traj, poses


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory) -> "Path":
    """One deterministic synthetic scene rendered to disk."""
    out = tmp_path_factory.mktemp("scene")
    data = generate(default_scene_spec(seed=7))
    (out / "traj.jsonl").write_text(data.trajectory_jsonl, encoding="utf-8")
    (out / "poses.jsonl").write_text(data.pose_jsonl, encoding="utf-8")
    (out / "ground_truth.json").write_text(data.ground_truth.to_json(), encoding="utf-8")
    return out


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
