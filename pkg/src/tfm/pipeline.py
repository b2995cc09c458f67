"""End-to-end wiring: config, the full flow-aware model, and run_pipeline.

The pipeline stages, in order: parse trajectory + pose logs, warp into the
current ego frame, clip to the point-cloud range and then the perceptual
range, filter/weight/select instances into a fixed-shape batch, encode them
temporally, build the spatial block mask, fuse with the lane features, and
compose the enhanced lane features. Zero usable flow is not an error: the
pipeline degrades to the lane-only path.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import InputError, NumericError
from .flow import DEFAULT_RANGE, FlowFrameSet, RangeSpec, clip_to_range, parse_log
from .geometry import PointBEV
from .nn import ParamStore
from .spatial import (
    ComposeHead,
    FusionConfig,
    FusionStack,
    QueryParadigm,
    SpatialMask,
    build_spatial_mask,
)
from .temporal import (
    RefinedFlowBatch,
    TemporalEncoder,
    TemporalMask,
    ego_sector_weight,
    instance_weights,
    select_instances,
    validity_filter,
)

_CONFIG_KEYS = {
    "window", "f_t", "tole_pts", "n_t", "range_p", "range_t",
    "fusion", "paradigm", "seed",
}
_FUSION_KEYS = {"pipe", "depth", "normalize_coords", "heads", "dim"}


@dataclass(frozen=True)
class PipelineConfig:
    """All knobs of the flow-aware module in one serializable record."""

    window: int = 20
    f_t: int = 20
    tole_pts: int = 5
    n_t: int = 30
    range_p: RangeSpec = DEFAULT_RANGE
    range_t: RangeSpec = DEFAULT_RANGE
    fusion: FusionConfig = field(default_factory=FusionConfig)
    paradigm: QueryParadigm = QueryParadigm.INSTANCE_BASED
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.tole_pts <= self.f_t:
            raise InputError(f"need 1 <= tole_pts <= f_t, got {self.tole_pts} vs {self.f_t}")
        if not self.f_t <= self.window:
            raise InputError(f"need f_t <= window, got {self.f_t} vs {self.window}")
        if self.n_t < 1:
            raise InputError(f"n_t must be >= 1, got {self.n_t}")

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "f_t": self.f_t,
            "tole_pts": self.tole_pts,
            "n_t": self.n_t,
            "range_p": list(self.range_p.as_tuple()),
            "range_t": list(self.range_t.as_tuple()),
            "fusion": {
                "pipe": self.fusion.pipe,
                "depth": self.fusion.depth,
                "normalize_coords": self.fusion.normalize_coords,
                "heads": self.fusion.heads,
                "dim": self.fusion.dim,
            },
            "paradigm": self.paradigm.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        fusion_doc = d.get("fusion", {})
        if not isinstance(fusion_doc, dict):
            raise InputError("config key 'fusion' must be an object")
        unknown = set(fusion_doc) - _FUSION_KEYS
        if unknown:
            raise InputError(f"unknown fusion config keys: {sorted(unknown)}")
        try:
            fusion = FusionConfig(
                pipe=str(fusion_doc.get("pipe", base.fusion.pipe)),
                depth=int(fusion_doc.get("depth", base.fusion.depth)),
                normalize_coords=bool(fusion_doc.get("normalize_coords", base.fusion.normalize_coords)),
                heads=int(fusion_doc.get("heads", base.fusion.heads)),
                dim=int(fusion_doc.get("dim", base.fusion.dim)),
            )
            return cls(
                window=int(d.get("window", base.window)),
                f_t=int(d.get("f_t", base.f_t)),
                tole_pts=int(d.get("tole_pts", base.tole_pts)),
                n_t=int(d.get("n_t", base.n_t)),
                range_p=_range_from(d.get("range_p", list(base.range_p.as_tuple()))),
                range_t=_range_from(d.get("range_t", list(base.range_t.as_tuple()))),
                fusion=fusion,
                paradigm=QueryParadigm.parse(str(d.get("paradigm", base.paradigm.value))),
                seed=int(d.get("seed", base.seed)),
            )
        except (TypeError, ValueError) as exc:
            raise InputError(f"malformed config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InputError("config document must be a JSON object")
        return cls.from_dict(doc)


def _range_from(value) -> RangeSpec:
    vals = [float(v) for v in value]
    if len(vals) != 4:
        raise InputError(f"range needs 4 numbers [x_min, x_max, y_min, y_max], got {value!r}")
    return RangeSpec(*vals)


class TFMModel:
    """Temporal encoder + spatial fusion + composition over one ParamStore."""

    def __init__(self, cfg: PipelineConfig, store: Optional[ParamStore] = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(cfg.seed)
        self.temporal = TemporalEncoder(
            self.store,
            dim=cfg.fusion.dim,
            heads=cfg.fusion.heads,
            f_t=cfg.f_t,
            range_spec=cfg.range_t,
            normalize_coords=cfg.fusion.normalize_coords,
        )
        self.fusion = FusionStack(self.store, cfg.fusion)
        self.compose = ComposeHead(self.store, cfg.fusion.dim)

    def forward(
        self,
        l_feat: np.ndarray,
        batch: RefinedFlowBatch,
        tmask: TemporalMask,
        upstream_lane_mask: Optional[np.ndarray] = None,
    ):
        tf_feat, validity, t_cache = self.temporal.forward(batch, tmask)
        s_mask = build_spatial_mask(l_feat.shape[0], validity, upstream_lane_mask)
        stages, f_cache = self.fusion.forward(l_feat, tf_feat, s_mask)
        out, c_cache = self.compose.forward(stages.f4, l_feat, self.cfg.paradigm)
        return out, (t_cache, f_cache, c_cache, s_mask, validity)

    def backward(self, cache, d_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads; return the gradient w.r.t. L_feat."""
        t_cache, f_cache, c_cache, _, _ = cache
        d_f4, d_l_residual = self.compose.backward(c_cache, d_out)
        d_lane_in, d_tf = self.fusion.backward(f_cache, d_f4)
        self.temporal.backward(t_cache, d_tf)
        return d_lane_in + d_l_residual


@dataclass(frozen=True)
class PipelineResult:
    l_feat_prime: np.ndarray
    flow: FlowFrameSet
    batch: RefinedFlowBatch
    temporal_mask: TemporalMask
    spatial_mask: SpatialMask
    diagnostics: Dict[str, object]
    timings_ms: Dict[str, float]


def prepare_flow(
    cfg: PipelineConfig,
    traj,
    poses,
    current_frame: Optional[int] = None,
) -> Tuple[FlowFrameSet, RefinedFlowBatch, TemporalMask, Dict[str, object], Dict[str, float]]:
    """Run the data-preparation half: parse, warp, clip, filter, select."""
    timings: Dict[str, float] = {}
    t0 = time.perf_counter()
    if current_frame is None:
        from .flow import read_poses

        pose_map = read_poses(poses)
        if not pose_map:
            raise InputError("pose log is empty")
        current_frame = max(pose_map)
        poses = _pose_map_to_lines(pose_map)
    flow = parse_log(traj, poses, current_frame, cfg.window)
    timings["parse"] = _ms_since(t0)

    t0 = time.perf_counter()
    clipped = clip_to_range(clip_to_range(flow, cfg.range_p), cfg.range_t)
    timings["clip"] = _ms_since(t0)

    t0 = time.perf_counter()
    candidates = validity_filter(clipped, cfg.tole_pts, cfg.f_t)
    far = cfg.range_t.corner_distance()
    weights = instance_weights(
        candidates, lambda c: ego_sector_weight(c, far_range=far)
    )
    batch, tmask = select_instances(candidates, weights, cfg.n_t, f_t=cfg.f_t)
    timings["select"] = _ms_since(t0)

    diagnostics: Dict[str, object] = {
        "current_frame": current_frame,
        "records": flow.stats.records,
        "parsed": flow.stats.parsed,
        "out_of_window": flow.stats.out_of_window,
        "unknown_category": flow.stats.unknown_category,
        "instances_total": len(flow.instances),
        "instances_in_range": len(clipped.instances),
        "candidates": len(candidates),
        "valid_instances": int(batch.instance_valid.sum()),
        "temporal_mask_fill": float(tmask.bits.mean()) if tmask.bits.size else 0.0,
    }
    return clipped, batch, tmask, diagnostics, timings


def _pose_map_to_lines(pose_map) -> list:
    """Render a pose map back to JSONL lines (a bare str would read as a path)."""
    return [
        json.dumps({"frame": f, "t": 0.0, "x": p.x, "y": p.y, "yaw": p.yaw})
        for f, p in sorted(pose_map.items())
    ]


def _ms_since(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


def run_pipeline(
    cfg: PipelineConfig,
    traj,
    poses,
    lane_features: np.ndarray,
    current_frame: Optional[int] = None,
    store: Optional[ParamStore] = None,
    upstream_lane_mask: Optional[np.ndarray] = None,
) -> PipelineResult:
    """Full pass from raw logs and lane features to enhanced lane features."""
    lane_features = np.asarray(lane_features, dtype=float)
    if lane_features.ndim != 2 or lane_features.shape[0] < 1:
        raise InputError(f"lane features must be (L >= 1, dim), got {lane_features.shape}")
    if lane_features.shape[1] != cfg.fusion.dim:
        raise InputError(
            f"lane feature width {lane_features.shape[1]} != config dim {cfg.fusion.dim}"
        )
    if not np.isfinite(lane_features).all():
        raise NumericError("lane features contain non-finite values")

    flow, batch, tmask, diagnostics, timings = prepare_flow(cfg, traj, poses, current_frame)

    model = TFMModel(cfg, store)
    t0 = time.perf_counter()
    out, cache = model.forward(lane_features, batch, tmask, upstream_lane_mask)
    timings["encode_fuse"] = _ms_since(t0)
    s_mask = cache[3]
    diagnostics["lanes"] = int(lane_features.shape[0])
    diagnostics["spatial_mask_fill"] = s_mask.fill_ratio()
    return PipelineResult(
        l_feat_prime=out,
        flow=flow,
        batch=batch,
        temporal_mask=tmask,
        spatial_mask=s_mask,
        diagnostics=diagnostics,
        timings_ms=timings,
    )
