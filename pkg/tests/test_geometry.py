"""SE(2) pose algebra against the homogeneous-matrix oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfm.geometry import (
    PointBEV,
    RigidPose,
    apply,
    compose,
    compose_relative,
    invert,
    wrap_angle,
)

ANGLES = st.floats(-50.0, 50.0, allow_nan=False)
COORDS = st.floats(-1e4, 1e4, allow_nan=False)


def pose_strategy():
    return st.builds(RigidPose, COORDS, COORDS, ANGLES)


def test_wrap_angle_interval():
    for theta in np.linspace(-25.0, 25.0, 2001):
        w = wrap_angle(float(theta))
        assert -math.pi < w <= math.pi
        # congruent modulo 2*pi
        assert abs(math.remainder(w - theta, 2.0 * math.pi)) < 1e-9


def test_wrap_angle_boundaries():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3.0 * math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.0) == 0.0


def test_point_rejects_non_finite():
    with pytest.raises(ValueError):
        PointBEV(float("nan"), 0.0)
    with pytest.raises(ValueError):
        PointBEV(0.0, float("inf"))


def test_matrix_round_trip():
    pose = RigidPose(3.0, -2.0, 0.7)
    again = RigidPose.from_matrix(pose.as_matrix())
    assert again.x == pytest.approx(pose.x, abs=1e-12)
    assert again.y == pytest.approx(pose.y, abs=1e-12)
    assert again.yaw == pytest.approx(pose.yaw, abs=1e-12)


def test_from_matrix_rejects_wrong_shape():
    with pytest.raises(ValueError):
        RigidPose.from_matrix(np.eye(2))


def test_apply_known_values():
    quarter = RigidPose(1.0, 2.0, math.pi / 2.0)
    moved = apply(quarter, PointBEV(1.0, 0.0))
    assert moved.x == pytest.approx(1.0, abs=1e-12)
    assert moved.y == pytest.approx(3.0, abs=1e-12)


def test_compose_matches_matrix_product(rng):
    for _ in range(200):
        a = RigidPose(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi))
        b = RigidPose(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi))
        got = compose(a, b).as_matrix()
        want = a.as_matrix() @ b.as_matrix()
        assert np.abs(got - want).max() < 1e-9


def test_compose_relative_matrix_oracle(rng):
    """T = inverse(now) * past, checked per-entry and on a warped point."""
    for _ in range(500):
        now = RigidPose(*rng.uniform(-200, 200, 2), rng.uniform(-math.pi, math.pi))
        past = RigidPose(*rng.uniform(-200, 200, 2), rng.uniform(-math.pi, math.pi))
        t = compose_relative(now, past)
        oracle = np.linalg.inv(now.as_matrix()) @ past.as_matrix()
        assert np.abs(t.as_matrix() - oracle).max() < 1e-9

        p = rng.uniform(-100, 100, 2)
        warped = apply(t, PointBEV(*p))
        expect = oracle @ np.array([p[0], p[1], 1.0])
        assert abs(warped.x - expect[0]) < 1e-9
        assert abs(warped.y - expect[1]) < 1e-9


def test_invert_round_trip(rng):
    for _ in range(200):
        pose = RigidPose(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi))
        p = PointBEV(*rng.uniform(-50, 50, 2))
        back = apply(invert(pose), apply(pose, p))
        assert abs(back.x - p.x) < 1e-9
        assert abs(back.y - p.y) < 1e-9


def test_distance_preservation(rng):
    pose = RigidPose(12.0, -7.0, 2.1)
    for _ in range(100):
        p, q = rng.uniform(-50, 50, 2), rng.uniform(-50, 50, 2)
        tp, tq = apply(pose, PointBEV(*p)), apply(pose, PointBEV(*q))
        before = math.hypot(p[0] - q[0], p[1] - q[1])
        after = math.hypot(tp.x - tq.x, tp.y - tq.y)
        assert after == pytest.approx(before, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(pose_strategy())
def test_self_relative_is_identity(pose):
    t = compose_relative(pose, pose)
    assert abs(t.x) < 1e-6
    assert abs(t.y) < 1e-6
    assert abs(t.yaw) < 1e-9


@settings(max_examples=200, deadline=None)
@given(pose_strategy())
def test_double_inversion(pose):
    twice = invert(invert(pose))
    assert twice.x == pytest.approx(pose.x, abs=1e-6)
    assert twice.y == pytest.approx(pose.y, abs=1e-6)
    assert twice.yaw == pytest.approx(pose.yaw, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(pose_strategy(), pose_strategy(), pose_strategy())
def test_compose_associative(a, b, c):
    left = compose(compose(a, b), c)
    right = compose(a, compose(b, c))
    assert left.x == pytest.approx(right.x, abs=1e-5)
    assert left.y == pytest.approx(right.y, abs=1e-5)
    assert math.remainder(left.yaw - right.yaw, 2.0 * math.pi) == pytest.approx(0.0, abs=1e-9)
