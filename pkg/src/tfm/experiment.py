"""Desk-scale training study: does traffic flow help lane occupancy probing?

Protocol. Each scene contributes one sample at its final frame: synthetic
lane descriptors (the stand-in for an upstream encoder's input, zeroed
inside a forward "blind zone" where the upstream is assumed to fail),
the extracted flow batch, and a coarse navigable-cell target grid. A small
model — descriptor encoder, the flow-aware module, and a linear probe —
is trained by per-sample SGD under binary cross-entropy.

Arms:

* with_flow        — train and evaluate with the flow branch active.
* without_flow     — train and evaluate with the flow batch emptied; the
                     flow-side parameters provably receive zero gradient,
                     so this is the lane-only baseline.
* train_with_infer_without — the with_flow arm's weights evaluated with the
                     flow batch emptied (the degraded-inference ablation).

Both arms start from bit-identical parameters: fusion write-back
projections are zeroed at init, so at step 0 the flow branch contributes
exactly nothing and the arms' functions coincide.

Scenes are occlusion-heavy by construction and one in four has its flow
almost entirely occluded, so the with-flow arm also trains its lane-only
fallback path. Descriptors carry observation noise; the blind zone covers
the curved road section ahead, whose geometry is not recoverable from the
visible (straight) descriptors — only the flow reveals it.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, NumericError
from .flow import clip_to_range, parse_log
from .geometry import PointBEV, RigidPose, apply, invert
from .nn import ParamStore, bce_with_logits
from .pipeline import PipelineConfig, TFMModel, prepare_flow
from .scenes import (
    GroundTruth,
    LaneSpec,
    SceneData,
    SceneSpec,
    generate,
    grid_shape,
    rasterize_navigable,
)
from .spatial import zero_output_projections
from .temporal import RefinedFlowBatch, TemporalMask, select_instances

DESCRIPTOR_DIM = 6


@dataclass(frozen=True)
class HarnessConfig:
    """Protocol constants of the study (not part of PipelineConfig)."""

    n_train: int = 48
    n_eval: int = 12
    epochs: int = 30
    lr: float = 0.15
    grad_clip: float = 5.0
    weight_decay: float = 1e-3
    descriptor_noise: float = 0.08
    coarse_cell: float = 10.0
    blind_zone: Tuple[float, float] = (0.5, 50.0)
    l_count: int = 8
    navigable_fraction: float = 0.15

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_eval < 1:
            raise InputError("need at least one train and one eval scene")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")


def experiment_scene_spec(scene_seed: int, occlusion_rate: float, frames: int = 30) -> SceneSpec:
    """A two-lane approach-the-curve scene tailored to the study.

    World frame == final ego frame up to a small lateral offset: the ego
    drives straight in from x < 0 and stops at x = 0; the lanes bend ahead
    with a per-scene curvature that only the flow can reveal.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(scene_seed), 0xE59E]))
    curvature = float(rng.uniform(0.004, 0.012)) * (1 if rng.uniform() < 0.5 else -1)
    offset = float(rng.uniform(-0.8, 0.8))
    xs = np.arange(-40.0, 60.0 + 1e-9, 1.0)
    bend = 0.5 * curvature * np.maximum(0.0, xs) ** 2
    lanes = tuple(
        LaneSpec(np.stack([xs, offset + j * 3.5 + bend], axis=1)) for j in range(2)
    )
    ego_xs = np.arange(-60.0, 0.0 + 1e-9, 1.0)
    ego_path = np.stack([ego_xs, np.full_like(ego_xs, offset)], axis=1)
    return SceneSpec(
        seed=scene_seed,
        lanes=lanes,
        n_vehicles=int(rng.integers(6, 10)),
        n_pedestrians=int(rng.integers(0, 3)),
        occlusion_rate=occlusion_rate,
        frame_drop_rate=0.1,
        frames=frames,
        ego_path=ego_path,
    )


_OCCLUSION_CYCLE = (0.2, 0.4, 0.6, 0.97)


def _scene_seed(experiment_seed: int, split: str, index: int) -> int:
    return int(experiment_seed) * 100_003 + (1_000_000 if split == "eval" else 0) + index


def build_dataset(
    dataset_dir: Path,
    experiment_seed: int,
    harness: HarnessConfig,
    cfg: PipelineConfig,
) -> Dict[str, List[Path]]:
    """Generate (or reuse) the scene files for one experiment seed."""
    root = Path(dataset_dir) / f"seed-{experiment_seed}"
    out: Dict[str, List[Path]] = {"train": [], "eval": []}
    for split, count in (("train", harness.n_train), ("eval", harness.n_eval)):
        for k in range(count):
            scene_dir = root / f"{split}-{k:03d}"
            out[split].append(scene_dir)
            if (scene_dir / "ground_truth.json").exists():
                continue
            scene_dir.mkdir(parents=True, exist_ok=True)
            rate = _OCCLUSION_CYCLE[k % len(_OCCLUSION_CYCLE)]
            spec = experiment_scene_spec(_scene_seed(experiment_seed, split, k), rate)
            data = generate(spec, cfg.range_p)
            (scene_dir / "traj.jsonl").write_text(data.trajectory_jsonl, encoding="utf-8")
            (scene_dir / "poses.jsonl").write_text(data.pose_jsonl, encoding="utf-8")
            (scene_dir / "ground_truth.json").write_text(
                data.ground_truth.to_json(), encoding="utf-8"
            )
            (scene_dir / "spec.json").write_text(
                json.dumps(spec.to_dict(), sort_keys=True) + "\n", encoding="utf-8"
            )
    return out


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Sample:
    descriptors: np.ndarray  # (l_count, DESCRIPTOR_DIM)
    batch: RefinedFlowBatch
    tmask: TemporalMask
    empty_batch: RefinedFlowBatch
    empty_tmask: TemporalMask
    target: np.ndarray  # (n_cells,) float 0/1
    valid_instances: int
    temporal_fill: float


def lane_descriptors(
    truth: GroundTruth,
    harness: HarnessConfig,
    cfg: PipelineConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-(lane, x-band) descriptors in the final ego frame.

    Descriptor: (x/|x_max|, y/|y_max|, tangent cos, tangent sin,
    half-width/5, valid flag); all six are zeroed when the band's midpoint
    falls inside the blind zone. Observation noise is added to every entry.
    """
    pose = truth.final_pose()
    to_ego = invert(pose)
    r = cfg.range_t
    n_lanes = len(truth.lanes)
    bands = harness.l_count // n_lanes
    if bands * n_lanes != harness.l_count:
        raise InputError(
            f"l_count {harness.l_count} not divisible by lane count {n_lanes}"
        )
    edges = np.linspace(r.x_min, r.x_max, bands + 1)
    zone_lo, zone_hi = harness.blind_zone
    desc = np.zeros((harness.l_count, DESCRIPTOR_DIM))
    row = 0
    for lane in truth.lanes:
        ego_pts = np.array(
            [[p.x, p.y] for p in (apply(to_ego, PointBEV(*w)) for w in lane.points)]
        )
        for b in range(bands):
            x0, x1 = edges[b], edges[b + 1]
            sel = (ego_pts[:, 0] >= x0) & (ego_pts[:, 0] < x1)
            pts = ego_pts[sel]
            if pts.shape[0] >= 2:
                mid = pts.mean(axis=0)
                tangent = pts[-1] - pts[0]
                tangent = tangent / max(np.linalg.norm(tangent), 1e-9)
                if not (zone_lo <= mid[0] <= zone_hi):
                    desc[row] = (
                        mid[0] / abs(r.x_max),
                        mid[1] / abs(r.y_max),
                        tangent[0],
                        tangent[1],
                        0.5 * lane.width / 5.0,
                        1.0,
                    )
            row += 1
    desc += rng.normal(0.0, harness.descriptor_noise, size=desc.shape)
    return desc


def coarse_target(truth: GroundTruth, harness: HarnessConfig, cfg: PipelineConfig) -> np.ndarray:
    """Pool the fine navigable grid down to coarse cells, threshold to 0/1."""
    fine = truth.navigable_grid(truth.final_pose(), cfg.range_p, truth.cell)
    nx, ny = grid_shape(cfg.range_p, harness.coarse_cell)
    fx, fy = fine.shape
    if fx % nx or fy % ny:
        raise InputError(
            f"coarse cell {harness.coarse_cell} does not tile the fine grid {fine.shape}"
        )
    pooled = fine.reshape(nx, fx // nx, ny, fy // ny).mean(axis=(1, 3))
    return (pooled >= harness.navigable_fraction).astype(float).ravel()


def make_sample(
    scene_dir: Path,
    cfg: PipelineConfig,
    harness: HarnessConfig,
    noise_rng: np.random.Generator,
) -> Sample:
    truth = GroundTruth.from_json((scene_dir / "ground_truth.json").read_text(encoding="utf-8"))
    _, batch, tmask, diag, _ = prepare_flow(
        cfg, str(scene_dir / "traj.jsonl"), str(scene_dir / "poses.jsonl")
    )
    empty_batch, empty_tmask = select_instances([], [], cfg.n_t, f_t=cfg.f_t)
    return Sample(
        descriptors=lane_descriptors(truth, harness, cfg, noise_rng),
        batch=batch,
        tmask=tmask,
        empty_batch=empty_batch,
        empty_tmask=empty_tmask,
        target=coarse_target(truth, harness, cfg),
        valid_instances=int(diag["valid_instances"]),
        temporal_fill=float(diag["temporal_mask_fill"]),
    )


# ---------------------------------------------------------------------------
# model: descriptor encoder + TFM + linear probe
# ---------------------------------------------------------------------------


class ProbeModel:
    def __init__(self, cfg: PipelineConfig, harness: HarnessConfig, n_cells: int, store: ParamStore):
        self.cfg = cfg
        self.store = store
        dim = cfg.fusion.dim
        store.create("lane_enc.w", (DESCRIPTOR_DIM, dim))
        store.create("lane_enc.b", (dim,), "zeros")
        store.create("lane_enc.query", (harness.l_count, dim))
        self.tfm = TFMModel(cfg, store)
        store.create("probe.w", (harness.l_count * dim, n_cells), "zeros")
        store.create("probe.b", (n_cells,), "zeros")
        # flow write-backs start at zero: the arms share their step-0 function
        zero_output_projections(store, "fusion")

    def forward(self, sample: Sample, use_flow: bool):
        s = self.store
        batch = sample.batch if use_flow else sample.empty_batch
        tmask = sample.tmask if use_flow else sample.empty_tmask
        l_feat = sample.descriptors @ s["lane_enc.w"] + s["lane_enc.b"] + s["lane_enc.query"]
        l_prime, tfm_cache = self.tfm.forward(l_feat, batch, tmask)
        flat = l_prime.reshape(-1)
        logits = flat @ s["probe.w"] + s["probe.b"]
        return logits, (tfm_cache, flat, sample)

    def step_grads(self, sample: Sample, use_flow: bool) -> float:
        """Forward + BCE + full backward; returns the sample loss."""
        s = self.store
        logits, (tfm_cache, flat, _) = self.forward(sample, use_flow)
        loss, d_logits = bce_with_logits(logits, sample.target)
        s.add_grad("probe.w", np.outer(flat, d_logits))
        s.add_grad("probe.b", d_logits)
        d_flat = s["probe.w"] @ d_logits
        d_lprime = d_flat.reshape(-1, self.cfg.fusion.dim)
        d_lfeat = self.tfm.backward(tfm_cache, d_lprime)
        s.add_grad("lane_enc.w", sample.descriptors.T @ d_lfeat)
        s.add_grad("lane_enc.b", d_lfeat.sum(axis=0))
        s.add_grad("lane_enc.query", d_lfeat)
        return loss

    def loss(self, sample: Sample, use_flow: bool) -> float:
        logits, _ = self.forward(sample, use_flow)
        loss, _ = bce_with_logits(logits, sample.target)
        return loss


def _train_arm(
    samples: Sequence[Sample],
    cfg: PipelineConfig,
    harness: HarnessConfig,
    n_cells: int,
    use_flow: bool,
    seed_label: str,
) -> Tuple[ProbeModel, List[float]]:
    store = ParamStore(cfg.seed)
    model = ProbeModel(cfg, harness, n_cells, store)
    # decay pulls weights toward their init, not zero, so identity-initialized
    # maps stay near-identity instead of degenerating when under-constrained
    init_state = {name: store[name].copy() for name in store.names()}
    curve: List[float] = []
    for _ in range(harness.epochs):
        total = 0.0
        for sample in samples:
            store.zero_grads()
            loss = model.step_grads(sample, use_flow)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged (non-finite loss) at seed {seed_label}")
            if harness.weight_decay:
                for name, ref in init_state.items():
                    store.add_grad(name, harness.weight_decay * (store[name] - ref))
            store.sgd_step(harness.lr, harness.grad_clip)
            total += loss
        curve.append(total / len(samples))
    return model, curve


def _eval_arm(model: ProbeModel, samples: Sequence[Sample], use_flow: bool) -> float:
    return float(np.mean([model.loss(sample, use_flow) for sample in samples]))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    seeds: Tuple[int, ...]
    per_seed: Dict[int, Dict[str, object]]
    medians: Dict[str, float]
    mask_stats: Dict[str, float]
    elapsed_s: float

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "per_seed": {str(k): v for k, v in self.per_seed.items()},
            "medians": self.medians,
            "mask_stats": self.mask_stats,
            "elapsed_s": self.elapsed_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def run_experiment(
    cfg: PipelineConfig,
    dataset_dir,
    seeds: Sequence[int],
    infer_without_flow: bool = True,
    harness: HarnessConfig = HarnessConfig(),
) -> ExperimentReport:
    """Train/evaluate the arms for every seed and summarize the medians.

    Losses reported per seed: final eval loss with flow, without flow, and
    (optionally) the with-flow weights evaluated with flow removed.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise InputError(f"need at least 3 seeds, got {len(seeds)}")
    t_start = time.perf_counter()
    n_cells = int(np.prod(grid_shape(cfg.range_p, harness.coarse_cell)))

    per_seed: Dict[int, Dict[str, object]] = {}
    fills: List[float] = []
    valid_counts: List[float] = []
    for seed in seeds:
        scene_dirs = build_dataset(dataset_dir, seed, harness, cfg)
        noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x401E]))
        train = [make_sample(p, cfg, harness, noise_rng) for p in scene_dirs["train"]]
        evals = [make_sample(p, cfg, harness, noise_rng) for p in scene_dirs["eval"]]
        fills.extend(s.temporal_fill for s in train)
        valid_counts.extend(float(s.valid_instances) for s in train)

        run_cfg = PipelineConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + 7919 * seed})
        model_a, curve_a = _train_arm(train, run_cfg, harness, n_cells, True, str(seed))
        model_b, curve_b = _train_arm(train, run_cfg, harness, n_cells, False, str(seed))

        entry: Dict[str, object] = {
            "with_flow": _eval_arm(model_a, evals, True),
            "without_flow": _eval_arm(model_b, evals, False),
            "curve_with_flow": curve_a,
            "curve_without_flow": curve_b,
            "curve_with_flow_best": list(np.minimum.accumulate(curve_a)),
            "curve_without_flow_best": list(np.minimum.accumulate(curve_b)),
        }
        if infer_without_flow:
            entry["train_with_infer_without"] = _eval_arm(model_a, evals, False)
        per_seed[seed] = entry

    medians = {
        "with_flow": statistics.median(e["with_flow"] for e in per_seed.values()),
        "without_flow": statistics.median(e["without_flow"] for e in per_seed.values()),
    }
    if infer_without_flow:
        medians["train_with_infer_without"] = statistics.median(
            e["train_with_infer_without"] for e in per_seed.values()
        )
    mask_stats = {
        "mean_valid_instances": float(np.mean(valid_counts)) if valid_counts else 0.0,
        "mean_temporal_fill": float(np.mean(fills)) if fills else 0.0,
    }
    return ExperimentReport(
        seeds=tuple(seeds),
        per_seed=per_seed,
        medians=medians,
        mask_stats=mask_stats,
        elapsed_s=time.perf_counter() - t_start,
    )
