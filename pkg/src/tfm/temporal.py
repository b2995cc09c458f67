"""Temporal domain encoding of traffic flow.

Stages, in pipeline order:

1. `validity_filter` keeps instances with at least `tole_pts` usable frames
   among the most recent `f_t` historical frames (usable = observed, inside
   the perceptual range after clipping, not occluded).
2. `ego_sector_weight` scores each observation by where it sits relative to
   a 60-degree frontal sector and by range.
3. `select_instances` picks the `t_max` highest-weight instances (padding
   with inert slots when there are fewer) and materializes the per-frame
   temporal mask.
4. `TemporalEncoder` embeds each retained instance's frames, runs masked
   self-attention over them, and mean-pools the valid frames into one
   feature row per instance.

Frame slot convention: slot k of an instance holds the observation at frame
`current_frame - 1 - k`, i.e. slot 0 is the most recent historical frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError
from .flow import CATEGORIES, DEFAULT_RANGE, FlowFrameSet, RangeSpec
from .geometry import PointBEV
from .nn import ParamStore, SelfAttentionBlock

SECTOR_HALF_ANGLE = math.radians(30.0)
ANGLE_FLOOR = 0.25
NEAR_RANGE = 30.0
RANGE_FLOOR = 0.5


# ---------------------------------------------------------------------------
# filtering, weighting, selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateInstance:
    """One track's recent history laid out in fixed frame slots."""

    track_id: str
    category: str
    coords: np.ndarray  # (f_t, 2), zeros where not valid
    valid: np.ndarray  # (f_t,) bool

    @property
    def f_t(self) -> int:
        return len(self.valid)


def validity_filter(flow: FlowFrameSet, tole_pts: int, f_t: int) -> List[CandidateInstance]:
    """Keep instances with >= tole_pts valid frames among the last f_t frames."""
    if not 1 <= tole_pts <= f_t:
        raise InputError(f"need 1 <= tole_pts <= f_t, got tole_pts={tole_pts}, f_t={f_t}")
    out: List[CandidateInstance] = []
    for inst in flow.instances:
        coords = np.zeros((f_t, 2))
        valid = np.zeros(f_t, dtype=bool)
        for slot_k in range(f_t):
            frame = flow.current_frame - 1 - slot_k
            obs = inst.slots.get(frame)
            if obs is not None and not obs.occluded:
                coords[slot_k] = (obs.center.x, obs.center.y)
                valid[slot_k] = True
        if int(valid.sum()) >= tole_pts:
            out.append(CandidateInstance(inst.track_id, inst.category, coords, valid))
    return out


def ego_sector_weight(
    center: PointBEV,
    *,
    half_angle: float = SECTOR_HALF_ANGLE,
    angle_floor: float = ANGLE_FLOOR,
    near_range: float = NEAR_RANGE,
    far_range: Optional[float] = None,
) -> float:
    """Importance weight in [0, 1]: w = a(bearing) * d(range).

    a = 1 inside the frontal sector (|bearing| <= half_angle), then falls as
    the cosine of the excess angle with a floor so rear objects still count.
    d = 1 out to `near_range`, then falls linearly to `RANGE_FLOOR` at
    `far_range` (default: the farthest corner of the default perceptual
    rectangle) and stays there.
    """
    if far_range is None:
        far_range = DEFAULT_RANGE.corner_distance()
    r = math.hypot(center.x, center.y)
    excess = abs(math.atan2(center.y, center.x)) - half_angle
    a = 1.0 if excess <= 0.0 else max(angle_floor, math.cos(excess))
    if r <= near_range:
        d = 1.0
    else:
        frac = min(1.0, (r - near_range) / (far_range - near_range))
        d = 1.0 - (1.0 - RANGE_FLOOR) * frac
    return a * d


def instance_weights(
    candidates: Sequence[CandidateInstance],
    weight_fn: Callable[[PointBEV], float] = ego_sector_weight,
) -> List[float]:
    """Instance weight = max per-frame weight over its valid frames.

    An object that was ever seen in the frontal sector stays informative
    even after leaving it, hence max rather than mean.
    """
    out = []
    for cand in candidates:
        frames = [
            weight_fn(PointBEV(float(x), float(y)))
            for (x, y), ok in zip(cand.coords, cand.valid)
            if ok
        ]
        out.append(max(frames) if frames else 0.0)
    return out


@dataclass(frozen=True)
class TemporalMask:
    """Per-(instance slot, frame slot) participation bits, shape (t_max, f_t)."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))

    @property
    def t_max(self) -> int:
        return self.bits.shape[0]

    @property
    def f_t(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class RefinedFlowBatch:
    """Fixed-shape selection result: exactly t_max slots, f_t frames each.

    Padded slots have instance_valid False, all frame bits False, zero
    coordinates, and an empty track id.
    """

    coords: np.ndarray  # (t_max, f_t, 2)
    category_index: np.ndarray  # (t_max,) int, index into CATEGORIES
    frame_valid: np.ndarray  # (t_max, f_t) bool
    instance_valid: np.ndarray  # (t_max,) bool
    track_ids: Tuple[str, ...]

    @property
    def t_max(self) -> int:
        return self.coords.shape[0]

    @property
    def f_t(self) -> int:
        return self.coords.shape[1]


def select_instances(
    candidates: Sequence[CandidateInstance],
    weights: Sequence[float],
    t_max: int,
    f_t: Optional[int] = None,
) -> Tuple[RefinedFlowBatch, TemporalMask]:
    """Keep the t_max highest-weight candidates; pad when there are fewer.

    Ordering is deterministic: weight descending, then track id ascending.
    `f_t` pins the frame count when the candidate list is empty (and must
    agree with the candidates when it is not).
    """
    if t_max < 1:
        raise InputError(f"t_max must be >= 1, got {t_max}")
    if len(weights) != len(candidates):
        raise InputError("weights and candidates length mismatch")
    if candidates:
        cand_f_t = candidates[0].f_t
        if any(c.f_t != cand_f_t for c in candidates):
            raise InputError("candidates disagree on frame count")
        if f_t is not None and f_t != cand_f_t:
            raise InputError(f"candidates have f_t={cand_f_t}, caller requested {f_t}")
        f_t = cand_f_t
    elif f_t is None:
        f_t = 1
    if f_t < 1:
        raise InputError(f"f_t must be >= 1, got {f_t}")

    order = sorted(range(len(candidates)), key=lambda i: (-weights[i], candidates[i].track_id))
    chosen = order[:t_max]
    coords = np.zeros((t_max, f_t, 2))
    cat_idx = np.zeros(t_max, dtype=int)
    frame_valid = np.zeros((t_max, f_t), dtype=bool)
    inst_valid = np.zeros(t_max, dtype=bool)
    ids: List[str] = [""] * t_max
    for slot, i in enumerate(chosen):
        cand = candidates[i]
        coords[slot, : cand.f_t] = cand.coords
        cat_idx[slot] = CATEGORIES.index(cand.category)
        frame_valid[slot, : cand.f_t] = cand.valid
        inst_valid[slot] = True
        ids[slot] = cand.track_id

    batch = RefinedFlowBatch(coords, cat_idx, frame_valid, inst_valid, tuple(ids))
    return batch, TemporalMask(frame_valid.copy())


# ---------------------------------------------------------------------------
# temporal self-attention encoder
# ---------------------------------------------------------------------------


class TemporalEncoder:
    """Embed frames, attend within each instance, pool to one row per slot.

    Token = coord projection + category embedding + frame-offset embedding.
    Attention mask for an instance is the outer product of its frame bits
    (masked frames neither attend nor are attended). Pooling is a mean over
    the valid frames; invalid instances yield exactly-zero rows.
    """

    def __init__(
        self,
        store: ParamStore,
        dim: int,
        heads: int,
        f_t: int,
        range_spec: RangeSpec = DEFAULT_RANGE,
        normalize_coords: bool = True,
        name: str = "temporal",
    ):
        self.store = store
        self.dim = dim
        self.f_t = f_t
        self.range_spec = range_spec
        self.normalize_coords = normalize_coords
        self.name = name
        store.create(f"{name}.coord.w", (2, dim))
        store.create(f"{name}.coord.b", (dim,), "zeros")
        store.create(f"{name}.cat.emb", (len(CATEGORIES), dim))
        store.create(f"{name}.pos.emb", (f_t, dim))
        self.block = SelfAttentionBlock(store, f"{name}.block", dim, heads)

    def _prepare_coords(self, coords: np.ndarray) -> np.ndarray:
        if not self.normalize_coords:
            return coords
        r = self.range_spec
        out = np.empty_like(coords)
        out[..., 0] = 2.0 * (coords[..., 0] - r.x_min) / (r.x_max - r.x_min) - 1.0
        out[..., 1] = 2.0 * (coords[..., 1] - r.y_min) / (r.y_max - r.y_min) - 1.0
        return out

    def forward(self, batch: RefinedFlowBatch, mask: TemporalMask):
        if mask.bits.shape != (batch.t_max, batch.f_t):
            raise InputError(
                f"temporal mask shape {mask.bits.shape} != ({batch.t_max}, {batch.f_t})"
            )
        if batch.f_t != self.f_t:
            raise InputError(f"batch has f_t={batch.f_t}, encoder built for f_t={self.f_t}")
        s, n = self.store, self.name
        tf_feat = np.zeros((batch.t_max, self.dim))
        validity = batch.instance_valid.copy()
        caches = [None] * batch.t_max
        norm_coords = self._prepare_coords(batch.coords)

        for slot in range(batch.t_max):
            bits = mask.bits[slot]
            if not (validity[slot] and bits.any()):
                validity[slot] = False
                continue
            # masked frames contribute nothing: zero their coords before embed
            xy = np.where(bits[:, None], norm_coords[slot], 0.0)
            tokens = (
                xy @ s[f"{n}.coord.w"]
                + s[f"{n}.coord.b"]
                + s[f"{n}.cat.emb"][batch.category_index[slot]]
                + s[f"{n}.pos.emb"]
            )
            attn_mask = np.outer(bits, bits)
            enc, block_cache = self.block.forward(tokens, attn_mask)
            k = float(bits.sum())
            tf_feat[slot] = enc[bits].sum(axis=0) / k
            caches[slot] = (xy, bits, block_cache, k)

        return tf_feat, validity, (caches, batch, norm_coords)

    def backward(self, cache, d_tf: np.ndarray) -> None:
        """Accumulate parameter gradients; batch coords are leaves (no dx)."""
        caches, batch, _ = cache
        s, n = self.store, self.name
        for slot, slot_cache in enumerate(caches):
            if slot_cache is None:
                continue
            xy, bits, block_cache, k = slot_cache
            d_enc = np.where(bits[:, None], d_tf[slot][None, :] / k, 0.0)
            d_tokens = self.block.backward(block_cache, d_enc)
            s.add_grad(f"{n}.coord.w", xy.T @ d_tokens)
            s.add_grad(f"{n}.coord.b", d_tokens.sum(axis=0))
            s.add_grad(f"{n}.cat.emb", _one_hot_rows(batch.category_index[slot], len(CATEGORIES), d_tokens))
            s.add_grad(f"{n}.pos.emb", d_tokens)


def _one_hot_rows(index: int, rows: int, d_tokens: np.ndarray) -> np.ndarray:
    g = np.zeros((rows, d_tokens.shape[1]))
    g[index] = d_tokens.sum(axis=0)
    return g


def encode_temporal(
    batch: RefinedFlowBatch,
    mask: TemporalMask,
    store: ParamStore,
    *,
    dim: int,
    heads: int,
    range_spec: RangeSpec = DEFAULT_RANGE,
    normalize_coords: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Functional wrapper: returns (TF_feat (t_max, dim), validity bits)."""
    enc = TemporalEncoder(
        store, dim, heads, batch.f_t, range_spec=range_spec, normalize_coords=normalize_coords
    )
    tf_feat, validity, _ = enc.forward(batch, mask)
    return tf_feat, validity
