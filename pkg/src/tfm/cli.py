"""Command-line interface.

Subcommands: extract, encode-temporal, fuse, synth, run, experiment,
gradcheck, config. Every subcommand accepts --json to emit a single
machine-readable JSON object on stdout. Exit codes: 0 success, 2 input or
parse error, 3 numeric failure, 4 infeasible request.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import InputError, NumericError, TfmError
from .experiment import HarnessConfig, run_experiment
from .flow import DEFAULT_RANGE, FlowFrameSet, RangeSpec, clip_to_range, parse_log
from .gradchecks import GRAD_TOL, run_all
from .nn import ParamStore
from .pipeline import PipelineConfig, run_pipeline
from .scenes import (
    SceneSpec,
    default_scene_spec,
    generate,
    write_pgm,
)
from .spatial import (
    FusionConfig,
    FusionStack,
    ComposeHead,
    QueryParadigm,
    SpatialMask,
    build_spatial_mask,
)
from .temporal import (
    TemporalEncoder,
    ego_sector_weight,
    instance_weights,
    select_instances,
    validity_filter,
)


def _parse_range(text: str) -> RangeSpec:
    parts = text.split(",")
    if len(parts) != 4:
        raise InputError(f"--range wants x0,x1,y0,y1 — got {text!r}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise InputError(f"--range has a non-numeric part: {text!r}") from exc
    return RangeSpec(*vals)


def _parse_seeds(text: str):
    try:
        return [int(p) for p in text.split(",") if p.strip() != ""]
    except ValueError as exc:
        raise InputError(f"--seeds wants comma-separated integers, got {text!r}") from exc


def _parse_on_off(text: str) -> bool:
    key = text.strip().lower()
    if key in ("on", "true", "1", "yes"):
        return True
    if key in ("off", "false", "0", "no"):
        return False
    raise InputError(f"expected on/off, got {text!r}")


def _load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_json(Path(path).read_text(encoding="utf-8"))


def _load_store(cfg_seed: int, weights_path) -> ParamStore:
    store = ParamStore(cfg_seed)
    if weights_path is not None:
        store.load_state_dict(tensorio.load_tensors(weights_path))
    return store


def _emit(args, payload: dict, human_lines) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_extract(args) -> None:
    flow = parse_log(args.traj, args.poses, args.frame, args.window)
    pre_clip = len(flow.instances)
    if args.range is not None:
        flow = clip_to_range(flow, _parse_range(args.range))
    text = flow.to_json()
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    payload = {
        "current_frame": flow.current_frame,
        "window": flow.window,
        "instances": len(flow.instances),
        "instances_before_clip": pre_clip,
        "records": flow.stats.records,
        "parsed": flow.stats.parsed,
        "out_of_window": flow.stats.out_of_window,
        "unknown_category": flow.stats.unknown_category,
        "out": args.out,
    }
    _emit(
        args,
        payload,
        [
            f"frame {flow.current_frame}, window {flow.window}: "
            f"{len(flow.instances)} instances ({flow.stats.parsed} observations)",
            f"skipped: {flow.stats.out_of_window} out of window, "
            f"{flow.stats.unknown_category} unknown categories",
        ]
        + ([f"wrote {args.out}"] if args.out else []),
    )


def cmd_encode_temporal(args) -> None:
    flow = FlowFrameSet.from_json(Path(args.flow).read_text(encoding="utf-8"))
    range_spec = _parse_range(args.range) if args.range else DEFAULT_RANGE
    flow = clip_to_range(flow, range_spec)
    candidates = validity_filter(flow, args.tole_pts, args.f_t)
    far = range_spec.corner_distance()
    weights = instance_weights(candidates, lambda c: ego_sector_weight(c, far_range=far))
    batch, tmask = select_instances(candidates, weights, args.n_t, f_t=args.f_t)

    store = _load_store(args.seed, args.weights)
    encoder = TemporalEncoder(
        store,
        dim=args.dim,
        heads=args.heads,
        f_t=args.f_t,
        range_spec=range_spec,
        normalize_coords=_parse_on_off(args.norm),
    )
    tf_feat, validity, _ = encoder.forward(batch, tmask)
    tensorio.save_tensors(
        args.out, {"tf_feat": tf_feat, "validity": validity.astype(float)}
    )
    payload = {
        "candidates": len(candidates),
        "valid_instances": int(validity.sum()),
        "temporal_mask_fill": float(tmask.bits.mean()) if tmask.bits.size else 0.0,
        "rows": int(tf_feat.shape[0]),
        "dim": int(tf_feat.shape[1]),
        "out": args.out,
    }
    _emit(
        args,
        payload,
        [
            f"{len(candidates)} candidates -> {int(validity.sum())} valid of {args.n_t} slots",
            f"TF_feat {tf_feat.shape[0]}x{tf_feat.shape[1]} -> {args.out}",
        ],
    )


def cmd_fuse(args) -> None:
    lane = tensorio.load_tensors(args.lane)
    if "l_feat" not in lane:
        raise InputError(f"{args.lane} has no 'l_feat' tensor")
    l_feat = lane["l_feat"]
    flow = tensorio.load_tensors(args.flow)
    if "tf_feat" not in flow:
        raise InputError(f"{args.flow} has no 'tf_feat' tensor")
    tf_feat = flow["tf_feat"]
    if l_feat.ndim != 2 or tf_feat.ndim != 2:
        raise InputError("'l_feat' and 'tf_feat' must be rank-2 tensors")

    if args.mask is not None:
        mask = SpatialMask.from_dict(
            json.loads(Path(args.mask).read_text(encoding="utf-8"))
        )
    else:
        validity = flow.get("validity")
        bits = (
            validity.astype(bool)
            if validity is not None
            else np.ones(tf_feat.shape[0], dtype=bool)
        )
        mask = build_spatial_mask(l_feat.shape[0], bits)

    cfg = FusionConfig(pipe=args.pipe, depth=args.depth, heads=args.heads, dim=l_feat.shape[1])
    store = _load_store(args.seed, args.weights)
    stack = FusionStack(store, cfg)
    stages, _ = stack.forward(l_feat, tf_feat, mask)
    head = ComposeHead(store, cfg.dim)
    paradigm = QueryParadigm.parse(args.paradigm)
    l_prime, _ = head.forward(stages.f4, l_feat, paradigm)
    tensorio.save_tensors(
        args.out,
        {
            "f1": stages.f1,
            "f2": stages.f2,
            "f3": stages.f3,
            "f4": stages.f4,
            "l_feat_prime": l_prime,
        },
    )
    payload = {
        "lanes": int(l_feat.shape[0]),
        "flow_rows": int(tf_feat.shape[0]),
        "dim": int(l_feat.shape[1]),
        "pipe": cfg.pipe,
        "depth": cfg.depth,
        "paradigm": paradigm.value,
        "spatial_mask_fill": mask.fill_ratio(),
        "out": args.out,
    }
    _emit(
        args,
        payload,
        [
            f"fused L={l_feat.shape[0]} with T={tf_feat.shape[0]} "
            f"(pipe={cfg.pipe}, depth={cfg.depth}, paradigm={paradigm.value})",
            f"wrote f1..f4 + l_feat_prime -> {args.out}",
        ],
    )


def _write_scene(out_dir: Path, spec: SceneSpec) -> dict:
    data = generate(spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "traj.jsonl").write_text(data.trajectory_jsonl, encoding="utf-8")
    (out_dir / "poses.jsonl").write_text(data.pose_jsonl, encoding="utf-8")
    (out_dir / "ground_truth.json").write_text(data.ground_truth.to_json(), encoding="utf-8")
    write_pgm(out_dir / "occupancy.pgm", data.ground_truth.navigable)
    return {
        "out_dir": str(out_dir),
        "seed": spec.seed,
        "frames": spec.frames,
        "lanes": len(spec.lanes),
        "vehicles": spec.n_vehicles,
        "pedestrians": spec.n_pedestrians,
        "navigable_cells": int(data.ground_truth.navigable.sum()),
        "files": ["traj.jsonl", "poses.jsonl", "ground_truth.json", "occupancy.pgm"],
    }


def cmd_synth(args) -> None:
    if args.count < 1:
        raise InputError(f"--count must be >= 1, got {args.count}")
    out_dir = Path(args.out_dir)
    if args.spec is not None:
        if args.count != 1:
            raise InputError("--count > 1 only makes sense with seeded default scenes")
        spec = SceneSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
        payload = _write_scene(out_dir, spec)
        scenes = [payload]
    elif args.count == 1:
        payload = _write_scene(out_dir, default_scene_spec(args.seed))
        scenes = [payload]
    else:
        scenes = [
            _write_scene(out_dir / f"scene_{k:03d}", default_scene_spec(args.seed + k))
            for k in range(args.count)
        ]
        payload = {"out_dir": str(out_dir), "count": args.count, "scenes": scenes}
    _emit(
        args,
        payload,
        [
            f"scene seed {s['seed']}: {s['vehicles']} vehicles, "
            f"{s['pedestrians']} pedestrians, {s['frames']} frames -> {s['out_dir']}"
            for s in scenes
        ],
    )


def cmd_run(args) -> None:
    cfg = _load_config(args.config)
    lane = tensorio.load_tensors(args.lane)
    if "l_feat" not in lane:
        raise InputError(f"{args.lane} has no 'l_feat' tensor")
    store = _load_store(cfg.seed, args.weights)
    result = run_pipeline(
        cfg, args.traj, args.poses, lane["l_feat"], current_frame=args.frame, store=store
    )
    tensorio.save_tensors(args.out, {"l_feat_prime": result.l_feat_prime})
    if args.diag is not None:
        Path(args.diag).write_text(
            json.dumps(result.diagnostics, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    payload = dict(result.diagnostics)
    payload["timings_ms"] = {k: round(v, 3) for k, v in result.timings_ms.items()}
    payload["out"] = args.out
    _emit(
        args,
        payload,
        [
            f"frame {result.diagnostics['current_frame']}: "
            f"{result.diagnostics['valid_instances']} valid instances, "
            f"spatial fill {result.diagnostics['spatial_mask_fill']:.3f}",
            f"wrote l_feat_prime -> {args.out}",
        ]
        + ([f"wrote diagnostics -> {args.diag}"] if args.diag else []),
    )


def cmd_experiment(args) -> None:
    cfg = _load_config(args.config)
    overrides = {
        "n_train": args.train_scenes,
        "n_eval": args.eval_scenes,
        "epochs": args.epochs,
        "lr": args.lr,
    }
    harness = HarnessConfig(**{k: v for k, v in overrides.items() if v is not None})
    report = run_experiment(
        cfg,
        args.data_dir,
        _parse_seeds(args.seeds),
        infer_without_flow=not args.no_infer_without,
        harness=harness,
    )
    if args.out is not None:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    payload = report.to_dict()
    lines = [
        f"seeds: {list(report.seeds)}",
        f"median eval loss with flow:    {report.medians['with_flow']:.4f}",
        f"median eval loss without flow: {report.medians['without_flow']:.4f}",
    ]
    if "train_with_infer_without" in report.medians:
        lines.append(
            "median train-with/infer-without: "
            f"{report.medians['train_with_infer_without']:.4f}"
        )
    lines.append(
        f"mask stats: {report.mask_stats['mean_valid_instances']:.2f} valid instances/scene, "
        f"temporal fill {report.mask_stats['mean_temporal_fill']:.3f}"
    )
    if args.out:
        lines.append(f"wrote report -> {args.out}")
    _emit(args, payload, lines)


def cmd_gradcheck(args) -> None:
    errors = run_all(args.seed)
    worst = max(errors.values())
    payload = {
        "errors": {k: float(v) for k, v in errors.items()},
        "worst": float(worst),
        "tolerance": GRAD_TOL,
        "pass": bool(worst < GRAD_TOL),
    }
    lines = [f"{name:24s} max rel err {err:.3e}" for name, err in sorted(errors.items())]
    lines.append(f"worst {worst:.3e} (tolerance {GRAD_TOL:.0e})")
    _emit(args, payload, lines)
    if worst >= GRAD_TOL:
        raise NumericError(f"gradient check failed: worst relative error {worst:.3e}")


def cmd_config(args) -> None:
    cfg = _load_config(args.config) if args.config else PipelineConfig()
    text = cfg.to_json()
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.json:
        print(json.dumps(cfg.to_dict(), sort_keys=True))
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tfm",
        description="Traffic-flow-aware lane feature fusion pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--json", action="store_true", help="emit JSON on stdout")
        return p

    p = add("extract", cmd_extract, "parse logs and warp flow into the current frame")
    p.add_argument("--traj", required=True, help="trajectory JSONL path")
    p.add_argument("--poses", required=True, help="ego pose JSONL path")
    p.add_argument("--frame", type=int, required=True, help="current frame index")
    p.add_argument("--window", type=int, default=20, help="historical window length")
    p.add_argument("--range", default=None, help="clip range x0,x1,y0,y1")
    p.add_argument("--out", default=None, help="write the flow set JSON here")

    p = add("encode-temporal", cmd_encode_temporal, "filter/select/encode a flow set")
    p.add_argument("--flow", required=True, help="flow set JSON from `tfm extract`")
    p.add_argument("--tole-pts", type=int, default=5, dest="tole_pts")
    p.add_argument("--n-t", type=int, default=30, dest="n_t")
    p.add_argument("--f-t", type=int, default=20, dest="f_t")
    p.add_argument("--norm", default="on", help="normalize coordinates: on|off")
    p.add_argument("--range", default=None, help="perceptual range x0,x1,y0,y1")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", default=None, help="TFM1 weights to load")
    p.add_argument("--out", required=True, help="output TFM1 file (tf_feat, validity)")

    p = add("fuse", cmd_fuse, "fuse lane features with encoded flow")
    p.add_argument("--lane", required=True, help="TFM1 file with 'l_feat'")
    p.add_argument("--flow", required=True, help="TFM1 file with 'tf_feat' (+ 'validity')")
    p.add_argument("--mask", default=None, help="spatial mask JSON (else built from validity)")
    p.add_argument("--pipe", default="lt-ll", choices=["lt-ll", "all"])
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--paradigm", default="instance", help="instance|point")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", default=None, help="TFM1 weights to load")
    p.add_argument("--out", required=True, help="output TFM1 file (f1..f4, l_feat_prime)")

    p = add("synth", cmd_synth, "generate synthetic scenes with ground truth")
    p.add_argument("--spec", default=None, help="scene spec JSON (else a default scene)")
    p.add_argument("--seed", type=int, default=0, help="seed for the default scene")
    p.add_argument("--count", type=int, default=1, help="scenes at seeds seed..seed+count-1")
    p.add_argument("--out-dir", required=True, dest="out_dir")

    p = add("run", cmd_run, "run the full pipeline on logs + lane features")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--traj", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--lane", required=True, help="TFM1 file with 'l_feat'")
    p.add_argument("--frame", type=int, default=None, help="current frame (default: latest pose)")
    p.add_argument("--weights", default=None, help="TFM1 weights to load")
    p.add_argument("--out", required=True, help="output TFM1 file (l_feat_prime)")
    p.add_argument("--diag", default=None, help="write diagnostics JSON here")

    p = add("experiment", cmd_experiment, "desk-scale with/without-flow training study")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--data-dir", required=True, dest="data_dir")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--train-scenes", type=int, default=None, dest="train_scenes")
    p.add_argument("--eval-scenes", type=int, default=None, dest="eval_scenes")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument(
        "--no-infer-without",
        action="store_true",
        help="skip the train-with/infer-without evaluation",
    )
    p.add_argument("--out", default=None, help="write the report JSON here")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)

    p = add("config", cmd_config, "print (or round-trip) the pipeline config")
    p.add_argument("--default", action="store_true", help="print the default config")
    p.add_argument("--config", default=None, help="config JSON to canonicalize")
    p.add_argument("--out", default=None, help="write the canonical config here")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except TfmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
