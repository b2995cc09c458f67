"""Spatial fusion of lane features with encoded traffic flow.

State layout: lane rows occupy [0, L), flow rows occupy [L, L+T) of one
concatenated (L+T, dim) matrix. The spatial mask is an (L+T) x (L+T)
boolean grid split into four blocks named query-side first:

* L->L  lanes attending lanes (upstream mask, all-true by default),
* L->T  lanes attending flow (column t enabled iff flow slot t is valid),
* T->L  flow attending lanes (row t enabled iff flow slot t is valid),
* T->T  flow attending flow (both endpoints must be valid).

Fusion runs four attention modules in a fixed order — (1) T->T, (2) T->L,
(3) L->T, (4) L->L — each seeing only its own block of the mask; rows
outside a module's query side pass through it untouched. The reduced
pipeline ("lt-ll") skips modules (1) and (2). Composition then forms
``L' = T(F4) + I * L_feat`` where the indicator I is 0 for instance-based
lane queries and 1 for point-level ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import InputError, NumericError
from .nn import ParamStore, SelfAttentionBlock, linear_backward, linear_forward, require_finite

PIPE_ALL = "all"
PIPE_LT_LL = "lt-ll"
FUSION_MODULES = ("tt", "tl", "lt", "ll")


class QueryParadigm(Enum):
    """How the upstream network represents one lane element."""

    INSTANCE_BASED = "instance_based"
    POINT_LEVEL = "point_level"

    @classmethod
    def parse(cls, text: str) -> "QueryParadigm":
        key = text.strip().lower().replace("-", "_")
        aliases = {
            "instance": cls.INSTANCE_BASED,
            "instance_based": cls.INSTANCE_BASED,
            "point": cls.POINT_LEVEL,
            "point_level": cls.POINT_LEVEL,
        }
        if key not in aliases:
            raise InputError(f"unknown query paradigm {text!r}")
        return aliases[key]

    @property
    def indicator(self) -> float:
        return 1.0 if self is QueryParadigm.POINT_LEVEL else 0.0


@dataclass(frozen=True)
class FusionConfig:
    pipe: str = PIPE_LT_LL
    depth: int = 1
    normalize_coords: bool = True
    heads: int = 4
    dim: int = 32

    def __post_init__(self) -> None:
        if self.pipe not in (PIPE_ALL, PIPE_LT_LL):
            raise InputError(f"pipe must be {PIPE_ALL!r} or {PIPE_LT_LL!r}, got {self.pipe!r}")
        if self.depth not in (1, 2, 3):
            raise InputError(f"depth must be 1, 2, or 3, got {self.depth}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise InputError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")

    def active_modules(self) -> Tuple[str, ...]:
        return FUSION_MODULES if self.pipe == PIPE_ALL else ("lt", "ll")


@dataclass(frozen=True)
class SpatialMask:
    """(L+T) x (L+T) boolean attention grid with the four-block structure."""

    l_count: int
    t_count: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        object.__setattr__(self, "bits", bits)
        if bits.shape != (self.size, self.size):
            raise InputError(f"mask bits shape {bits.shape} != ({self.size}, {self.size})")

    @property
    def size(self) -> int:
        return self.l_count + self.t_count

    # block views, query rows first
    @property
    def l_to_l(self) -> np.ndarray:
        return self.bits[: self.l_count, : self.l_count]

    @property
    def l_to_t(self) -> np.ndarray:
        return self.bits[: self.l_count, self.l_count :]

    @property
    def t_to_l(self) -> np.ndarray:
        return self.bits[self.l_count :, : self.l_count]

    @property
    def t_to_t(self) -> np.ndarray:
        return self.bits[self.l_count :, self.l_count :]

    def fill_ratio(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0

    def to_dict(self) -> dict:
        return {
            "l_count": self.l_count,
            "t_count": self.t_count,
            "bits": self.bits.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialMask":
        try:
            return cls(int(d["l_count"]), int(d["t_count"]), np.asarray(d["bits"], dtype=bool))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed spatial mask document: {exc}") from exc


def build_spatial_mask(
    l_count: int,
    flow_validity: np.ndarray,
    upstream_lane_mask: Optional[np.ndarray] = None,
) -> SpatialMask:
    """Assemble M_s from the per-slot flow validity bits.

    T->T requires both endpoints valid; L->T and T->L are gated by the flow
    slot's validity alone; L->L is the upstream lane mask, all-true when the
    upstream network supplies none.
    """
    if l_count < 1:
        raise InputError(f"l_count must be >= 1, got {l_count}")
    validity = np.asarray(flow_validity, dtype=bool).ravel()
    t_count = validity.size
    size = l_count + t_count
    bits = np.zeros((size, size), dtype=bool)

    if upstream_lane_mask is None:
        bits[:l_count, :l_count] = True
    else:
        lane_mask = np.asarray(upstream_lane_mask, dtype=bool)
        if lane_mask.shape != (l_count, l_count):
            raise InputError(
                f"upstream lane mask shape {lane_mask.shape} != ({l_count}, {l_count})"
            )
        bits[:l_count, :l_count] = lane_mask
    bits[:l_count, l_count:] = validity[None, :]
    bits[l_count:, :l_count] = validity[:, None]
    bits[l_count:, l_count:] = validity[:, None] & validity[None, :]
    return SpatialMask(l_count, t_count, bits)


@dataclass(frozen=True)
class FusionStages:
    """Query-side rows after each module: f1/f2 flow rows, f3/f4 lane rows."""

    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    f4: np.ndarray


class FusionStack:
    """The four (optionally two) masked-attention modules over joint state.

    Every layer of every module owns independent weights, named
    ``<name>.<module>.<layer>.*`` in the parameter store.
    """

    def __init__(self, store: ParamStore, cfg: FusionConfig, name: str = "fusion"):
        self.store = store
        self.cfg = cfg
        self.name = name
        self.blocks: Dict[str, List[SelfAttentionBlock]] = {
            module: [
                SelfAttentionBlock(store, f"{name}.{module}.{layer}", cfg.dim, cfg.heads)
                for layer in range(cfg.depth)
            ]
            for module in FUSION_MODULES
        }

    def _module_mask(self, module: str, mask: SpatialMask) -> np.ndarray:
        full = np.zeros((mask.size, mask.size), dtype=bool)
        l = mask.l_count
        if module == "tt":
            full[l:, l:] = mask.t_to_t
        elif module == "tl":
            full[l:, :l] = mask.t_to_l
        elif module == "lt":
            full[:l, l:] = mask.l_to_t
        elif module == "ll":
            full[:l, :l] = mask.l_to_l
        else:  # pragma: no cover - fixed module set
            raise ValueError(module)
        return full

    def forward(self, l_feat: np.ndarray, tf_feat: np.ndarray, mask: SpatialMask):
        l_feat = require_finite("L_feat", l_feat)
        tf_feat = require_finite("TF_feat", tf_feat)
        if l_feat.ndim != 2 or tf_feat.ndim != 2:
            raise InputError("feature matrices must be 2-d")
        if l_feat.shape[1] != self.cfg.dim or tf_feat.shape[1] != self.cfg.dim:
            raise InputError(
                f"feature width mismatch: lanes {l_feat.shape[1]}, flow {tf_feat.shape[1]}, "
                f"config dim {self.cfg.dim}"
            )
        if (l_feat.shape[0], tf_feat.shape[0]) != (mask.l_count, mask.t_count):
            raise InputError(
                f"mask built for (L={mask.l_count}, T={mask.t_count}) but features are "
                f"(L={l_feat.shape[0]}, T={tf_feat.shape[0]})"
            )
        l = mask.l_count
        state = np.concatenate([l_feat, tf_feat], axis=0)
        active = self.cfg.active_modules()
        staged: Dict[str, np.ndarray] = {}
        trace = []
        for module in FUSION_MODULES:
            if module in active:
                module_mask = self._module_mask(module, mask)
                for block in self.blocks[module]:
                    state, cache = block.forward(state, module_mask)
                    trace.append((block, cache))
            staged[module] = state[l:].copy() if module in ("tt", "tl") else state[:l].copy()
        stages = FusionStages(staged["tt"], staged["tl"], staged["lt"], staged["ll"])
        return stages, (trace, l)

    def backward(self, cache, d_lane: np.ndarray, d_flow: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Backprop from gradients on the final lane/flow rows to the inputs."""
        trace, l = cache
        total = trace[0][1][-1].shape[0] if trace else None
        if total is None:
            # no active modules ran (cannot happen with current pipes)
            d_state = np.concatenate(
                [d_lane, d_flow if d_flow is not None else np.zeros((0, d_lane.shape[1]))]
            )
            return d_state[:l], d_state[l:]
        d_state = np.zeros((total, d_lane.shape[1]))
        d_state[:l] = d_lane
        if d_flow is not None:
            d_state[l:] = d_flow
        for block, block_cache in reversed(trace):
            d_state = block.backward(block_cache, d_state)
        return d_state[:l], d_state[l:]


def fuse(
    l_feat: np.ndarray,
    tf_feat: np.ndarray,
    mask: SpatialMask,
    cfg: FusionConfig,
    store: ParamStore,
    name: str = "fusion",
) -> FusionStages:
    """Functional wrapper over FusionStack.forward."""
    stages, _ = FusionStack(store, cfg, name=name).forward(l_feat, tf_feat, mask)
    return stages


class ComposeHead:
    """Eq.-style composition: L' = T(F4) + indicator * L_feat.

    T is one affine map initialized to the identity, so an instance-based
    pipeline starts as a passthrough of the fused lane rows.
    """

    def __init__(self, store: ParamStore, dim: int, name: str = "compose"):
        self.store = store
        self.name = name
        self.dim = dim
        store.create(f"{name}.w", (dim, dim), "identity")
        store.create(f"{name}.b", (dim,), "zeros")

    def forward(self, f4: np.ndarray, l_feat: np.ndarray, paradigm: QueryParadigm):
        if f4.shape != l_feat.shape:
            raise InputError(f"F4 shape {f4.shape} != L_feat shape {l_feat.shape}")
        if f4.shape[1] != self.dim:
            raise InputError(f"feature width {f4.shape[1]} != head dim {self.dim}")
        s, n = self.store, self.name
        mapped, lin_cache = linear_forward(f4, s[f"{n}.w"], s[f"{n}.b"])
        out = mapped + paradigm.indicator * l_feat
        if not np.isfinite(out).all():
            raise NumericError("composed lane features are not finite")
        return out, (lin_cache, paradigm)

    def backward(self, cache, d_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        lin_cache, paradigm = cache
        s, n = self.store, self.name
        d_f4, dw, db = linear_backward(lin_cache, d_out)
        s.add_grad(f"{n}.w", dw)
        s.add_grad(f"{n}.b", db)
        return d_f4, paradigm.indicator * d_out


def compose_features(
    f4: np.ndarray,
    l_feat: np.ndarray,
    paradigm: QueryParadigm,
    store: ParamStore,
    name: str = "compose",
) -> np.ndarray:
    """Functional wrapper over ComposeHead.forward."""
    head = ComposeHead(store, f4.shape[1] if f4.ndim == 2 else 0, name=name)
    out, _ = head.forward(f4, l_feat, paradigm)
    return out


def zero_output_projections(store: ParamStore, prefix: str = "fusion") -> None:
    """Zero every fusion block's write-back paths (attention out-proj and the
    feed-forward's second linear), turning each block into an exact identity.
    """
    for name in list(store.names()):
        if not name.startswith(f"{prefix}."):
            continue
        if name.endswith(".attn.wo") or name.endswith(".ffn.w2") or name.endswith(".ffn.b2"):
            store[name] = np.zeros_like(store[name])
