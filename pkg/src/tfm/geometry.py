"""SE(2) poses and rigid transforms for ego-frame trajectory alignment.

Poses are planar (x forward, y left, yaw counter-clockwise). The relative
transform between two ego poses maps points expressed in the past frame
into the current frame:

    T = inverse(pose_now) * pose_past

which is the composition used to warp historical object observations into
the current bird's-eye-view frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return -((math.pi - theta) % _TWO_PI - math.pi)


@dataclass(frozen=True)
class PointBEV:
    """A point in a bird's-eye-view frame (meters)."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class RigidPose:
    """An SE(2) pose: translation in meters, yaw in radians, wrapped to (-pi, pi]."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix; rotation block checked orthonormal to 1e-9."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        m = np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])
        r = m[:2, :2]
        if abs(np.linalg.det(r) - 1.0) > 1e-9 or np.abs(r @ r.T - np.eye(2)).max() > 1e-9:
            raise ValueError("rotation block is not orthonormal")
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
        return cls(float(m[0, 2]), float(m[1, 2]), math.atan2(m[1, 0], m[0, 0]))


class RigidTransform(RigidPose):
    """A relative SE(2) pose: maps points from one frame into another."""


def invert(pose: RigidPose) -> RigidTransform:
    """Inverse transform: apply(invert(p), apply(as_transform(p), q)) == q."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return RigidTransform(-(c * pose.x + s * pose.y), -(-s * pose.x + c * pose.y), -pose.yaw)


def compose(a: RigidPose, b: RigidPose) -> RigidTransform:
    """Compose two poses/transforms: (a * b) acts as b first, then a."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return RigidTransform(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.yaw + b.yaw,
    )


def compose_relative(pose_now: RigidPose, pose_past: RigidPose) -> RigidTransform:
    """Transform taking points from the past ego frame into the current one."""
    return compose(invert(pose_now), pose_past)


def apply(transform: RigidPose, p: PointBEV) -> PointBEV:
    """Rigidly move a point; pairwise distances are preserved."""
    c, s = math.cos(transform.yaw), math.sin(transform.yaw)
    return PointBEV(
        transform.x + c * p.x - s * p.y,
        transform.y + s * p.x + c * p.y,
    )
