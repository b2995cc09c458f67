"""Spatial domain: paradigms, four-block mask, fusion stack, composition."""

from __future__ import annotations

import numpy as np
import pytest

from tfm.errors import InputError, NumericError
from tfm.nn import ParamStore
from tfm.spatial import (
    FUSION_MODULES,
    PIPE_ALL,
    PIPE_LT_LL,
    ComposeHead,
    FusionConfig,
    FusionStack,
    QueryParadigm,
    SpatialMask,
    build_spatial_mask,
    compose_features,
    fuse,
    zero_output_projections,
)


# ---------------------------------------------------------------------------
# QueryParadigm / FusionConfig
# ---------------------------------------------------------------------------


def test_paradigm_parse_aliases():
    P = QueryParadigm
    for text in ("instance", "instance_based", "Instance-Based", " INSTANCE "):
        assert P.parse(text) is P.INSTANCE_BASED
    for text in ("point", "point_level", "Point-Level"):
        assert P.parse(text) is P.POINT_LEVEL
    with pytest.raises(InputError):
        P.parse("segment")


def test_paradigm_indicator():
    assert QueryParadigm.INSTANCE_BASED.indicator == 0.0
    assert QueryParadigm.POINT_LEVEL.indicator == 1.0


def test_fusion_config_validation():
    assert FusionConfig().active_modules() == ("lt", "ll")
    assert FusionConfig(pipe=PIPE_ALL).active_modules() == FUSION_MODULES
    with pytest.raises(InputError):
        FusionConfig(pipe="diagonal")
    with pytest.raises(InputError):
        FusionConfig(depth=4)
    with pytest.raises(InputError):
        FusionConfig(dim=30, heads=4)


# ---------------------------------------------------------------------------
# SpatialMask / build_spatial_mask
# ---------------------------------------------------------------------------


def test_build_mask_four_block_semantics():
    validity = np.array([True, False, True])
    mask = build_spatial_mask(2, validity)
    assert mask.size == 5
    assert mask.l_to_l.all()
    assert np.array_equal(mask.l_to_t, np.tile(validity, (2, 1)))
    assert np.array_equal(mask.t_to_l, np.tile(validity[:, None], (1, 2)))
    assert np.array_equal(mask.t_to_t, np.outer(validity, validity))
    # block views are windows into one (L+T)^2 grid
    assert mask.bits[1, 2 + 1] == False  # lane 1 -> flow slot 1 (invalid)
    assert mask.bits[2 + 0, 2 + 2] == True  # flow 0 -> flow 2 (both valid)


def test_build_mask_accepts_upstream_lane_mask():
    lane_mask = np.tril(np.ones((3, 3), dtype=bool))
    mask = build_spatial_mask(3, np.array([True]), upstream_lane_mask=lane_mask)
    assert np.array_equal(mask.l_to_l, lane_mask)
    with pytest.raises(InputError):
        build_spatial_mask(3, np.array([True]), upstream_lane_mask=np.ones((2, 2), dtype=bool))
    with pytest.raises(InputError):
        build_spatial_mask(0, np.array([True]))


def test_mask_fill_ratio_and_dict_round_trip():
    mask = build_spatial_mask(2, np.array([True, False]))
    expected = (4 + 2 + 2 + 1) / 16.0  # LL all, LT col, TL row, TT corner
    assert mask.fill_ratio() == pytest.approx(expected)
    again = SpatialMask.from_dict(mask.to_dict())
    assert again.l_count == mask.l_count
    assert np.array_equal(again.bits, mask.bits)
    with pytest.raises(InputError):
        SpatialMask.from_dict({"l_count": 2})


def test_mask_shape_validation():
    with pytest.raises(InputError):
        SpatialMask(2, 2, np.ones((3, 3), dtype=bool))


# ---------------------------------------------------------------------------
# fusion stack
# ---------------------------------------------------------------------------


CFG = FusionConfig(pipe=PIPE_ALL, depth=1, dim=8, heads=2)


def _features(rng, l_count=3, t_count=4, dim=8):
    return rng.normal(size=(l_count, dim)), rng.normal(size=(t_count, dim))


def test_fuse_stage_shapes_and_order(rng):
    l_feat, tf_feat = _features(rng)
    mask = build_spatial_mask(3, np.array([True, True, False, True]))
    stages = fuse(l_feat, tf_feat, mask, CFG, ParamStore(0))
    assert stages.f1.shape == stages.f2.shape == (4, 8)
    assert stages.f3.shape == stages.f4.shape == (3, 8)
    # each module changes its query rows: the staged snapshots all differ
    assert not np.array_equal(stages.f1, stages.f2)
    assert not np.array_equal(stages.f3, stages.f4)


def test_lt_ll_pipe_leaves_flow_rows_untouched(rng):
    l_feat, tf_feat = _features(rng)
    mask = build_spatial_mask(3, np.ones(4, dtype=bool))
    stages = fuse(l_feat, tf_feat, mask, FusionConfig(pipe=PIPE_LT_LL, dim=8, heads=2), ParamStore(0))
    assert np.array_equal(stages.f1, tf_feat)
    assert np.array_equal(stages.f2, tf_feat)
    assert not np.array_equal(stages.f4, l_feat)


def test_invalid_flow_rows_pass_through_and_cannot_leak(rng):
    l_feat, tf_feat = _features(rng)
    validity = np.array([True, False, True, False])
    mask = build_spatial_mask(3, validity)
    store = ParamStore(1)
    base = fuse(l_feat, tf_feat, mask, CFG, store)
    # invalid slots ride through every module unchanged
    assert np.array_equal(base.f1[~validity], tf_feat[~validity])
    assert np.array_equal(base.f2[~validity], tf_feat[~validity])
    # poisoning invalid rows changes nothing anywhere else, bit for bit
    poisoned = tf_feat.copy()
    poisoned[~validity] = 1e7
    out = fuse(l_feat, poisoned, mask, CFG, store)
    assert np.array_equal(out.f4, base.f4)
    assert np.array_equal(out.f1[validity], base.f1[validity])
    assert np.array_equal(out.f3, base.f3)


def test_zero_validity_reduces_all_pipe_to_lane_only(rng):
    """With no valid flow, tt/tl/lt are inert and both pipes agree exactly."""
    l_feat, tf_feat = _features(rng)
    mask = build_spatial_mask(3, np.zeros(4, dtype=bool))
    full = fuse(l_feat, tf_feat, mask, CFG, ParamStore(2))
    slim = fuse(l_feat, tf_feat, mask, FusionConfig(pipe=PIPE_LT_LL, dim=8, heads=2), ParamStore(2))
    assert np.array_equal(full.f4, slim.f4)
    assert np.array_equal(full.f3, l_feat)  # lt had nothing to attend to
    assert np.array_equal(full.f1, tf_feat)
    assert np.array_equal(full.f2, tf_feat)


def test_fusion_depth_stacks_independent_layers():
    store = ParamStore(0)
    FusionStack(store, FusionConfig(pipe=PIPE_ALL, depth=3, dim=8, heads=2))
    names = set(store.names())
    for module in FUSION_MODULES:
        for layer in range(3):
            assert f"fusion.{module}.{layer}.attn.wq" in names
    assert not np.array_equal(store["fusion.ll.0.attn.wq"], store["fusion.ll.1.attn.wq"])


def test_fusion_input_validation(rng):
    l_feat, tf_feat = _features(rng)
    mask = build_spatial_mask(3, np.ones(4, dtype=bool))
    stack = FusionStack(ParamStore(0), CFG)
    with pytest.raises(InputError, match="width"):
        stack.forward(l_feat[:, :4], tf_feat, mask)
    with pytest.raises(InputError, match="mask built for"):
        stack.forward(l_feat[:2], tf_feat, mask)
    with pytest.raises(NumericError):
        stack.forward(l_feat * np.inf, tf_feat, mask)


def test_fuse_matches_stack_forward(rng):
    l_feat, tf_feat = _features(rng)
    mask = build_spatial_mask(3, np.ones(4, dtype=bool))
    wrapper = fuse(l_feat, tf_feat, mask, CFG, ParamStore(5))
    direct, _ = FusionStack(ParamStore(5), CFG).forward(l_feat, tf_feat, mask)
    for a, b in zip(
        (wrapper.f1, wrapper.f2, wrapper.f3, wrapper.f4),
        (direct.f1, direct.f2, direct.f3, direct.f4),
    ):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# composition (Eq.-style paradigm handling)
# ---------------------------------------------------------------------------


def test_compose_identity_init_is_passthrough(rng):
    f4, l_feat = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    store = ParamStore(0)
    out = compose_features(f4, l_feat, QueryParadigm.INSTANCE_BASED, store)
    assert np.array_equal(out, f4)
    out_pt = compose_features(f4, l_feat, QueryParadigm.POINT_LEVEL, store)
    assert np.allclose(out_pt, f4 + l_feat, atol=0.0)


def test_compose_contract_with_arbitrary_transform(rng):
    f4, l_feat = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    store = ParamStore(0)
    head = ComposeHead(store, 8)
    store["compose.w"] = rng.normal(size=(8, 8))
    store["compose.b"] = rng.normal(size=8)
    ref = f4 @ store["compose.w"] + store["compose.b"]
    inst, _ = head.forward(f4, l_feat, QueryParadigm.INSTANCE_BASED)
    point, _ = head.forward(f4, l_feat, QueryParadigm.POINT_LEVEL)
    assert np.array_equal(inst, ref)
    assert np.abs(point - (ref + l_feat)).max() < 1e-12


def test_compose_shape_and_finiteness_errors(rng):
    store = ParamStore(0)
    head = ComposeHead(store, 8)
    with pytest.raises(InputError):
        head.forward(np.zeros((2, 8)), np.zeros((3, 8)), QueryParadigm.INSTANCE_BASED)
    with pytest.raises(InputError):
        head.forward(np.zeros((2, 4)), np.zeros((2, 4)), QueryParadigm.INSTANCE_BASED)
    store["compose.w"] = np.full((8, 8), np.inf)
    with pytest.raises(NumericError):
        head.forward(np.ones((2, 8)), np.ones((2, 8)), QueryParadigm.INSTANCE_BASED)


# ---------------------------------------------------------------------------
# zero_output_projections
# ---------------------------------------------------------------------------


def test_zeroed_projections_make_fusion_an_identity(rng):
    l_feat, tf_feat = _features(rng)
    mask = build_spatial_mask(3, np.ones(4, dtype=bool))
    store = ParamStore(3)
    stack = FusionStack(store, CFG)
    zero_output_projections(store)
    stages, _ = stack.forward(l_feat, tf_feat, mask)
    assert np.array_equal(stages.f1, tf_feat)
    assert np.array_equal(stages.f2, tf_feat)
    assert np.array_equal(stages.f3, l_feat)
    assert np.array_equal(stages.f4, l_feat)


def test_zero_output_projections_scoped_by_prefix():
    store = ParamStore(0)
    FusionStack(store, CFG)
    ComposeHead(store, 8)
    store.create("other.attn.wo", (8, 8))
    before = store["other.attn.wo"].copy()
    zero_output_projections(store)
    assert np.array_equal(store["other.attn.wo"], before)  # not under "fusion."
    assert np.array_equal(store["compose.w"], np.eye(8))
    assert np.all(store["fusion.ll.0.attn.wo"] == 0.0)
    assert np.all(store["fusion.tt.0.ffn.w2"] == 0.0)
