"""Temporal domain: validity filtering, sector weighting, selection, encoder."""

from __future__ import annotations

import math

import numpy as np
import pytest

from tfm.errors import InputError
from tfm.flow import DEFAULT_RANGE, FlowFrameSet, FlowInstance, FrameSlot
from tfm.geometry import PointBEV
from tfm.nn import ParamStore
from tfm.temporal import (
    ANGLE_FLOOR,
    NEAR_RANGE,
    RANGE_FLOOR,
    SECTOR_HALF_ANGLE,
    CandidateInstance,
    TemporalMask,
    TemporalEncoder,
    ego_sector_weight,
    encode_temporal,
    instance_weights,
    select_instances,
    validity_filter,
)


def flow_of(current_frame: int, window: int, tracks: dict) -> FlowFrameSet:
    """tracks: id -> list of (frame, x, y, occluded)."""
    instances = tuple(
        FlowInstance(
            tid,
            "vehicle",
            {f: FrameSlot(PointBEV(x, y), occ) for f, x, y, occ in obs},
        )
        for tid, obs in sorted(tracks.items())
    )
    return FlowFrameSet(current_frame, window, instances)


# ---------------------------------------------------------------------------
# validity_filter
# ---------------------------------------------------------------------------


def test_slot_convention_most_recent_first():
    flow = flow_of(10, 10, {"a": [(9, 1.0, 0.0, False), (7, 3.0, 0.0, False)]})
    (cand,) = validity_filter(flow, tole_pts=1, f_t=5)
    # slot k holds frame current-1-k: frame 9 -> slot 0, frame 7 -> slot 2
    assert cand.valid.tolist() == [True, False, True, False, False]
    assert cand.coords[0].tolist() == [1.0, 0.0]
    assert cand.coords[2].tolist() == [3.0, 0.0]
    assert cand.coords[1].tolist() == [0.0, 0.0]


def test_occluded_frames_are_invalid_but_not_fatal():
    flow = flow_of(10, 10, {"a": [(9, 1.0, 0.0, True), (8, 2.0, 0.0, False)]})
    (cand,) = validity_filter(flow, tole_pts=1, f_t=4)
    assert cand.valid.tolist() == [False, True, False, False]
    assert cand.coords[0].tolist() == [0.0, 0.0]  # occluded coords are zeroed


def test_tole_pts_threshold_is_inclusive():
    flow = flow_of(
        10,
        10,
        {
            "two": [(9, 1.0, 0.0, False), (8, 1.0, 0.0, False)],
            "one": [(9, 1.0, 0.0, False)],
        },
    )
    assert [c.track_id for c in validity_filter(flow, tole_pts=1, f_t=4)] == ["one", "two"]
    assert [c.track_id for c in validity_filter(flow, tole_pts=2, f_t=4)] == ["two"]
    assert validity_filter(flow, tole_pts=3, f_t=4) == []


def test_frames_beyond_f_t_are_ignored():
    flow = flow_of(10, 10, {"a": [(9, 1.0, 0.0, False), (2, 9.0, 9.0, False)]})
    (cand,) = validity_filter(flow, tole_pts=1, f_t=3)  # frames 7..9 only
    assert cand.valid.sum() == 1
    assert validity_filter(flow, tole_pts=2, f_t=3) == []


def test_validity_filter_rejects_bad_tole_pts():
    flow = flow_of(10, 10, {})
    with pytest.raises(InputError):
        validity_filter(flow, tole_pts=0, f_t=4)
    with pytest.raises(InputError):
        validity_filter(flow, tole_pts=5, f_t=4)


# ---------------------------------------------------------------------------
# ego_sector_weight
# ---------------------------------------------------------------------------


def test_sector_weight_oracle_values():
    # inside the 60-degree frontal sector, close range: exactly 1
    assert ego_sector_weight(PointBEV(30.0, 0.0)) == 1.0
    assert ego_sector_weight(PointBEV(10.0, 10.0 * math.tan(SECTOR_HALF_ANGLE))) == pytest.approx(1.0)
    # 45-degree bearing = 15 degrees past the sector edge
    assert ego_sector_weight(PointBEV(10.0, 10.0)) == pytest.approx(0.9659258262890683, abs=1e-15)
    # 90-degree bearing: cos(60 deg) = 0.5
    assert ego_sector_weight(PointBEV(0.0, 20.0)) == pytest.approx(0.5)
    # behind the ego: cosine goes negative, floor takes over
    assert ego_sector_weight(PointBEV(-10.0, 0.0)) == ANGLE_FLOOR
    assert ego_sector_weight(PointBEV(-10.0, 1.0)) == ANGLE_FLOOR


def test_sector_weight_range_attenuation():
    far = DEFAULT_RANGE.corner_distance()
    assert ego_sector_weight(PointBEV(NEAR_RANGE, 0.0)) == 1.0
    assert ego_sector_weight(PointBEV(far, 0.0)) == pytest.approx(RANGE_FLOOR)
    assert ego_sector_weight(PointBEV(far + 100.0, 0.0)) == pytest.approx(RANGE_FLOOR)
    mid = 0.5 * (NEAR_RANGE + far)
    assert ego_sector_weight(PointBEV(mid, 0.0)) == pytest.approx(0.5 * (1.0 + RANGE_FLOOR))


def test_sector_weight_is_monotone_in_range_and_angle():
    radii = np.linspace(1.0, 80.0, 40)
    w_r = [ego_sector_weight(PointBEV(r, 0.0)) for r in radii]
    assert all(a >= b for a, b in zip(w_r, w_r[1:]))
    angles = np.linspace(0.0, math.pi, 60)
    w_a = [ego_sector_weight(PointBEV(10.0 * math.cos(t), 10.0 * math.sin(t))) for t in angles]
    assert all(a >= b - 1e-12 for a, b in zip(w_a, w_a[1:]))
    assert all(0.0 <= w <= 1.0 for w in w_a + w_r)


def test_sector_weight_knobs():
    # widen the sector to a half-plane: the side object is now fully weighted
    assert ego_sector_weight(PointBEV(0.0, 20.0), half_angle=math.pi / 2) == 1.0
    # shrink far_range: the same point attenuates harder
    near = ego_sector_weight(PointBEV(40.0, 0.0))
    tight = ego_sector_weight(PointBEV(40.0, 0.0), far_range=41.0)
    assert tight < near


def test_instance_weight_is_max_over_valid_frames():
    coords = np.array([[10.0, 10.0], [0.0, 20.0], [99.0, 99.0]])
    cand = CandidateInstance("a", "vehicle", coords, np.array([True, True, False]))
    (w,) = instance_weights([cand])
    assert w == pytest.approx(0.9659258262890683)
    empty = CandidateInstance("b", "vehicle", coords, np.zeros(3, dtype=bool))
    assert instance_weights([empty]) == [0.0]


# ---------------------------------------------------------------------------
# select_instances
# ---------------------------------------------------------------------------


def _cands(n: int, f_t: int = 3) -> list[CandidateInstance]:
    return [
        CandidateInstance(
            f"t{i}",
            "vehicle",
            np.full((f_t, 2), float(i + 1)),
            np.array([True] * (f_t - 1) + [False]),
        )
        for i in range(n)
    ]


def test_select_orders_by_weight_then_id():
    cands = _cands(3)
    batch, mask = select_instances(cands, [0.5, 0.9, 0.5], t_max=3)
    assert batch.track_ids == ("t1", "t0", "t2")  # tie between t0/t2 broken by id
    assert batch.instance_valid.all()
    assert np.array_equal(mask.bits, batch.frame_valid)


def test_select_truncates_to_t_max():
    batch, _ = select_instances(_cands(5), [1, 2, 3, 4, 5], t_max=2)
    assert batch.track_ids == ("t4", "t3")
    assert batch.t_max == 2


def test_select_pads_with_inert_slots():
    batch, mask = select_instances(_cands(1), [1.0], t_max=4)
    assert batch.track_ids == ("t0", "", "", "")
    assert batch.instance_valid.tolist() == [True, False, False, False]
    assert not mask.bits[1:].any()
    assert np.all(batch.coords[1:] == 0.0)


def test_select_empty_candidates_need_f_t():
    batch, mask = select_instances([], [], t_max=3, f_t=7)
    assert batch.coords.shape == (3, 7, 2)
    assert not batch.instance_valid.any()
    assert mask.f_t == 7
    # default when unspecified is a single inert frame
    batch2, _ = select_instances([], [], t_max=2)
    assert batch2.f_t == 1


def test_select_validation_errors():
    cands = _cands(2)
    with pytest.raises(InputError):
        select_instances(cands, [1.0], t_max=2)  # length mismatch
    with pytest.raises(InputError):
        select_instances(cands, [1.0, 2.0], t_max=0)
    with pytest.raises(InputError):
        select_instances(cands, [1.0, 2.0], t_max=2, f_t=9)  # disagrees with candidates
    ragged = _cands(1) + _cands(1, f_t=5)
    with pytest.raises(InputError):
        select_instances(ragged, [1.0, 2.0], t_max=2)


def test_select_mask_is_a_copy():
    batch, mask = select_instances(_cands(1), [1.0], t_max=1)
    mask.bits[0, 0] = False
    assert batch.frame_valid[0, 0]


# ---------------------------------------------------------------------------
# TemporalEncoder
# ---------------------------------------------------------------------------


def _random_batch(rng, t_max=4, f_t=5):
    coords = rng.uniform(-40.0, 40.0, size=(t_max, f_t, 2))
    frame_valid = rng.uniform(size=(t_max, f_t)) < 0.7
    frame_valid[0] = True
    frame_valid[-1] = False  # valid instance with no valid frames
    instance_valid = np.ones(t_max, dtype=bool)
    instance_valid[-2] = False  # padded slot
    coords[~frame_valid] = 0.0
    coords[~instance_valid] = 0.0
    cats = rng.integers(0, 4, size=t_max)
    from tfm.temporal import RefinedFlowBatch

    batch = RefinedFlowBatch(coords, cats, frame_valid & instance_valid[:, None],
                             instance_valid, tuple(f"t{i}" for i in range(t_max)))
    return batch, TemporalMask(batch.frame_valid.copy())


def test_encoder_shapes_and_invalid_rows(rng):
    batch, mask = _random_batch(rng)
    store = ParamStore(0)
    tf_feat, validity = encode_temporal(batch, mask, store, dim=8, heads=2)
    assert tf_feat.shape == (4, 8)
    assert np.all(tf_feat[2] == 0.0)  # padded slot
    assert np.all(tf_feat[3] == 0.0)  # no valid frames
    assert validity.tolist() == [True, True, False, False]
    assert not np.all(tf_feat[0] == 0.0)


def test_encoder_masked_frame_content_is_irrelevant(rng):
    batch, mask = _random_batch(rng)
    store = ParamStore(0)
    base, _ = encode_temporal(batch, mask, store, dim=8, heads=2)

    coords2 = batch.coords.copy()
    coords2[~mask.bits] = 1e6  # poison everything the mask excludes
    from tfm.temporal import RefinedFlowBatch

    poisoned = RefinedFlowBatch(coords2, batch.category_index, batch.frame_valid,
                                batch.instance_valid, batch.track_ids)
    out, _ = encode_temporal(poisoned, mask, store, dim=8, heads=2)
    assert np.array_equal(out, base)


def test_encoder_category_of_dead_slot_is_irrelevant(rng):
    batch, mask = _random_batch(rng)
    store = ParamStore(0)
    base, _ = encode_temporal(batch, mask, store, dim=8, heads=2)
    cats = batch.category_index.copy()
    cats[2] = (cats[2] + 1) % 4
    from tfm.temporal import RefinedFlowBatch

    tweaked = RefinedFlowBatch(batch.coords, cats, batch.frame_valid,
                               batch.instance_valid, batch.track_ids)
    out, _ = encode_temporal(tweaked, mask, store, dim=8, heads=2)
    assert np.array_equal(out, base)


def test_encoder_slots_are_independent(rng):
    """Editing one instance's frames never bleeds into another's feature."""
    batch, mask = _random_batch(rng)
    store = ParamStore(0)
    base, _ = encode_temporal(batch, mask, store, dim=8, heads=2)
    coords2 = batch.coords.copy()
    coords2[1][mask.bits[1]] += 3.0
    from tfm.temporal import RefinedFlowBatch

    tweaked = RefinedFlowBatch(coords2, batch.category_index, batch.frame_valid,
                               batch.instance_valid, batch.track_ids)
    out, _ = encode_temporal(tweaked, mask, store, dim=8, heads=2)
    assert np.array_equal(out[0], base[0])
    assert not np.array_equal(out[1], base[1])


def test_encoder_is_deterministic_for_a_seed(rng):
    batch, mask = _random_batch(rng)
    a, _ = encode_temporal(batch, mask, ParamStore(3), dim=8, heads=2)
    b, _ = encode_temporal(batch, mask, ParamStore(3), dim=8, heads=2)
    c, _ = encode_temporal(batch, mask, ParamStore(4), dim=8, heads=2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_encoder_validates_shapes(rng):
    batch, mask = _random_batch(rng)
    store = ParamStore(0)
    enc = TemporalEncoder(store, dim=8, heads=2, f_t=batch.f_t)
    with pytest.raises(InputError, match="mask shape"):
        enc.forward(batch, TemporalMask(np.ones((2, 2), dtype=bool)))
    wrong = TemporalEncoder(store, dim=8, heads=2, f_t=batch.f_t + 1, name="other")
    with pytest.raises(InputError, match="f_t"):
        wrong.forward(batch, mask)


def test_encoder_parameter_names_are_scoped():
    store = ParamStore(0)
    TemporalEncoder(store, dim=8, heads=2, f_t=6)
    names = set(store.names())
    assert "temporal.coord.w" in names
    assert "temporal.cat.emb" in names
    assert "temporal.pos.emb" in names
    assert store["temporal.pos.emb"].shape == (6, 8)
    assert any(n.startswith("temporal.block.") for n in names)
