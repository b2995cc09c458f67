"""Traffic-flow-aware lane feature fusion.

Tracked-object trajectories are warped into the current ego frame, encoded
by masked temporal self-attention, and fused into upstream lane features
through a four-block spatial attention mask. A synthetic-scene generator
and a desk-scale training experiment provide the oracles that pin down the
behavior.
"""

from .errors import InfeasibleError, InputError, NumericError, TfmError
from .flow import (
    CATEGORIES,
    DEFAULT_RANGE,
    FlowFrameSet,
    FlowInstance,
    FrameSlot,
    ObjectObservation,
    ParseStats,
    RangeSpec,
    clip_to_range,
    parse_log,
    read_poses,
)
from .geometry import (
    PointBEV,
    RigidPose,
    RigidTransform,
    apply,
    compose,
    compose_relative,
    invert,
    wrap_angle,
)
from .nn import (
    ParamStore,
    SelfAttentionBlock,
    attention_backward,
    attention_forward,
    bce_with_logits,
    grad_check,
)
from .pipeline import PipelineConfig, PipelineResult, TFMModel, prepare_flow, run_pipeline
from .scenes import (
    GroundTruth,
    LaneSpec,
    OccupancyGrid,
    SceneSpec,
    default_scene_spec,
    flow_occupancy_oracle,
    generate,
    rasterize_navigable,
    write_pgm,
)
from .spatial import (
    ComposeHead,
    FusionConfig,
    FusionStack,
    FusionStages,
    QueryParadigm,
    SpatialMask,
    build_spatial_mask,
    compose_features,
    fuse,
    zero_output_projections,
)
from .temporal import (
    CandidateInstance,
    RefinedFlowBatch,
    TemporalEncoder,
    TemporalMask,
    ego_sector_weight,
    encode_temporal,
    instance_weights,
    select_instances,
    validity_filter,
)

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES",
    "CandidateInstance",
    "ComposeHead",
    "DEFAULT_RANGE",
    "FlowFrameSet",
    "FlowInstance",
    "FrameSlot",
    "FusionConfig",
    "FusionStack",
    "FusionStages",
    "GroundTruth",
    "InfeasibleError",
    "InputError",
    "LaneSpec",
    "NumericError",
    "ObjectObservation",
    "OccupancyGrid",
    "ParamStore",
    "ParseStats",
    "PipelineConfig",
    "PipelineResult",
    "PointBEV",
    "QueryParadigm",
    "RangeSpec",
    "RefinedFlowBatch",
    "RigidPose",
    "RigidTransform",
    "SceneSpec",
    "SelfAttentionBlock",
    "SpatialMask",
    "TFMModel",
    "TemporalEncoder",
    "TemporalMask",
    "TfmError",
    "apply",
    "attention_backward",
    "attention_forward",
    "bce_with_logits",
    "build_spatial_mask",
    "clip_to_range",
    "compose",
    "compose_features",
    "compose_relative",
    "default_scene_spec",
    "ego_sector_weight",
    "encode_temporal",
    "flow_occupancy_oracle",
    "fuse",
    "generate",
    "grad_check",
    "instance_weights",
    "invert",
    "parse_log",
    "prepare_flow",
    "rasterize_navigable",
    "read_poses",
    "run_pipeline",
    "select_instances",
    "validity_filter",
    "wrap_angle",
    "write_pgm",
    "zero_output_projections",
]
