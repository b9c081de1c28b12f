"""Command-line entry point: gaussocc {gen-scene,fit,splat,eval,bench,stream-sim}."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numba
import numpy as np

from .blocked import bench, bench_json, splat_forward_blocked
from .core import GaussOccError, VoxelGrid, read_gaussians, read_grid, write_gaussians, write_grid
from .metrics import evaluate, lidar_rays
from .pipeline import PipelineConfig, queries_to_json, run_pipeline, stream_sim
from .scene import PALETTE, SyntheticScene, gen_scene, standard_scene_spec
from .splatting import SplatConfig


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _parse_dims(text: str):
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NXxNYxNZ, got {text!r}") from None
    if len(dims) != 3 or min(dims) <= 0:
        raise argparse.ArgumentTypeError(f"expected three positive sizes, got {text!r}")
    return dims


def _parse_vec3(text: str):
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None
    if len(v) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return v


def _load_json(path):
    return json.loads(Path(path).read_text()) if path else None


def _scene(args) -> SyntheticScene:
    if args.scene:
        return SyntheticScene.load(args.scene)
    spec = _load_json(args.spec) or standard_scene_spec()
    return gen_scene(spec, args.scene_seed)


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_dict(_load_json(args.config) or {})
    cfg.deterministic = args.deterministic
    if args.threads:
        cfg.threads = args.threads
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args):
    spec = _load_json(args.spec) or standard_scene_spec()
    scene = gen_scene(spec, args.seed, args.out)
    _log(f"wrote {len(scene.frames)} frames to {args.out}")
    return 0


def cmd_fit(args):
    from . import plotting

    scene = _scene(args)
    cfg = _config(args)
    if args.init:
        cfg.stage2.init = args.init
    if args.steps is not None:
        cfg.stage2.steps = args.steps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = run_pipeline(scene, cfg, log=None if args.quiet else _log)
    _log(f"fit finished in {time.perf_counter() - t0:.1f} s")
    s2 = res.stage2
    write_gaussians(out / "gaussians.sgau", s2.gaussians.to_set())
    (out / "queries.json").write_text(queries_to_json(s2.queries))
    write_grid(out / "prediction.svox", s2.prediction)
    (out / "metrics.json").write_text(_dump(res.report()))
    (out / "config.json").write_text(_dump(cfg.to_dict()))
    s1_curve = res.stage1.curve if res.stage1 else []
    _write_csv(out / "stage1_curve.csv", s1_curve, ["step", "loss", "denoise", "depth", "rgb"])
    _write_csv(out / "stage2_curve.csv", s2.curve, ["step", "loss"])
    if not args.no_plots:
        plotting.plot_curves({"stage 1": s1_curve, "stage 2": s2.curve}, out / "loss.png")
        palette = PALETTE[np.arange(scene.num_classes) % len(PALETTE)]
        plotting.plot_occupancy(s2.prediction, scene.frames[cfg.frame].gt, out / "occupancy.png", palette, scene.class_names)
    print(_dump(res.report()), end="")
    return 0


def cmd_splat(args):
    gs = read_gaussians(args.gaussians)
    spec = _load_json(args.grid_spec)
    if "class_count" not in spec:
        spec = dict(spec, class_count=gs.num_classes)
    grid = VoxelGrid.from_spec(spec)
    if grid.class_count != gs.num_classes:
        raise GaussOccError(f"grid has {grid.class_count} classes, Gaussians have {gs.num_classes}")
    cfg = SplatConfig(cutoff_sigma=args.cutoff, opacity_weighted=args.opacity_weighted, deterministic=args.deterministic, threads=args.threads)
    field = splat_forward_blocked(gs.to_params(), grid, cfg)
    write_grid(args.out, field.to_grid(grid))
    if args.probs_out:
        np.save(args.probs_out, field.as_float32())
    return 0


def cmd_eval(args):
    pred, gt = read_grid(args.pred), read_grid(args.gt)
    rays = None
    if args.ray_origin is not None:
        rays = lidar_rays(args.ray_origin)
    report = evaluate(pred, gt, rays, tuple(args.thresholds))
    text = _dump(report)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_bench(args):
    spec = {"gaussians": args.gaussians, "grid": args.grid, "voxel_size": args.voxel_size, "num_classes": args.classes, "seed": args.seed}
    cfg = SplatConfig(cutoff_sigma=args.cutoff, deterministic=args.deterministic, threads=args.threads, backward_mode=args.backward_mode)
    report = bench(spec, args.repetitions, cfg)
    text = bench_json(report) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    if args.plot:
        from . import plotting

        plotting.plot_bench(report, args.plot)
    print(text, end="")
    return 0


def cmd_stream_sim(args):
    from . import plotting

    scene = _scene(args)
    cfg = _config(args)
    if args.propagation:
        cfg.stream.propagation = args.propagation
    if args.frames:
        cfg.stream.frames = args.frames
    rows = stream_sim(scene, cfg, log=None if args.quiet else _log)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stream.json").write_text(_dump(rows))
        _write_csv(out / "stream.csv", rows, ["frame", "propagated", "iou", "miou", "rayiou"])
        if not args.no_plots:
            plotting.plot_stream(rows, out / "stream.png")
    print(_dump(rows), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True, help="fixed kernel scheduling (default on)")
    common.add_argument("--threads", type=int, default=None, help="worker threads for the parallel kernels")

    p = argparse.ArgumentParser(prog="gaussocc", description="Semantic Gaussian occupancy toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def scene_args(sp):
        sp.add_argument("--scene", help="directory written by gen-scene")
        sp.add_argument("--spec", help="scene spec JSON (used when --scene is absent)")
        sp.add_argument("--scene-seed", type=int, default=0)
        sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("--no-plots", action="store_true")

    sp = sub.add_parser("gen-scene", parents=[common], help="generate a synthetic scene")
    sp.add_argument("--spec", help="scene spec JSON (default: the standard scene)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_scene)

    sp = sub.add_parser("fit", parents=[common], help="stage 1 + stage 2 fitting on one frame")
    scene_args(sp)
    sp.add_argument("--init", choices=["pretrained", "random"])
    sp.add_argument("--steps", type=int, help="stage-2 steps")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("splat", parents=[common], help="splat a Gaussian file into an argmax-labelled grid")
    sp.add_argument("--gaussians", required=True)
    sp.add_argument("--grid-spec", required=True, help="JSON with origin, voxel_size, dims[, class_count]")
    sp.add_argument("--out", required=True)
    sp.add_argument("--cutoff", type=float, default=3.0)
    sp.add_argument("--opacity-weighted", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--probs-out", help="also save the (V, C+1) field as .npy")
    sp.set_defaults(func=cmd_splat)

    sp = sub.add_parser("eval", parents=[common], help="IoU, mIoU and RayIoU of a prediction")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--ray-origin", type=_parse_vec3, help="LiDAR origin x,y,z (default: grid center)")
    sp.add_argument("--thresholds", type=float, nargs="+", default=[1.0, 2.0, 4.0])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", parents=[common], help="naive vs blocked splatting timings")
    sp.add_argument("--gaussians", type=int, default=9000)
    sp.add_argument("--grid", type=_parse_dims, default=(200, 200, 16))
    sp.add_argument("--voxel-size", type=float, default=0.5)
    sp.add_argument("--classes", type=int, default=16)
    sp.add_argument("--repetitions", type=int, default=5)
    sp.add_argument("--cutoff", type=float, default=3.0)
    sp.add_argument("--backward-mode", choices=["transpose", "fused"], default="transpose")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--plot", help="PNG path for a timing bar chart")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("stream-sim", parents=[common], help="frame-by-frame fitting with query propagation")
    scene_args(sp)
    sp.add_argument("--propagation", choices=["delta", "topk", "none"])
    sp.add_argument("--frames", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_stream_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            build_parser().error("--threads must be >= 1")
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except (GaussOccError, ValueError, OSError, KeyError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
