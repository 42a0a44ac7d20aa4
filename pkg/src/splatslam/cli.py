"""Command line entry points.

    splatslam [run] --config run.cfg --dataset DIR --output OUT [--seed N] [--mesh] [--eval]
    splatslam render --output OUT
    splatslam mesh --output OUT
    splatslam eval --output OUT [--dataset DIR]

The render, mesh and eval subcommands read the global map and trajectory
written by a previous run in OUT, and reuse OUT/config.txt unless --config is
given.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .config import SLAMConfig, load_config
from .evaluation import evaluate_run, read_tum_trajectory
from .mapping import load_submap
from .meshing import write_ply
from .pipeline import PipelineError, build_mesh, camera_intrinsics, load_sequence, run_slam
from .render import render

log = logging.getLogger("splatslam")

COMMANDS = ("run", "render", "mesh", "eval")


def _parse_set(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    common.add_argument("--dataset", help="dataset directory (TUM or generic layout)")
    common.add_argument("--output", type=Path, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value; may repeat")
    common.add_argument("-v", "--verbose", action="store_true", help="log every frame")

    parser = argparse.ArgumentParser(prog="splatslam", description="Dense RGBD SLAM with 3D Gaussian sub-maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run tracking and mapping over a sequence")
    run.add_argument("--seed", type=int, help="overrides run.seed")
    run.add_argument("--mesh", action="store_true", help="also write mesh.ply")
    run.add_argument("--eval", action="store_true", help="also write the metric report")
    sub.add_parser("render", parents=[common], help="render the global map at every trajectory pose")
    sub.add_parser("mesh", parents=[common], help="fuse rendered depth into a TSDF and write mesh.ply")
    sub.add_parser("eval", parents=[common], help="evaluate a finished run against its input frames")
    return parser


def _config(args, output: Optional[Path]) -> SLAMConfig:
    path = args.config
    if path is None and output is not None and (output / "config.txt").is_file():
        path = output / "config.txt"
    return load_config(path, _parse_set(args.set))


def _load_run(out: Path):
    """Global map and estimated poses of a finished run."""
    if not (out / "global_map.bin").is_file():
        raise FileNotFoundError(f"{out / 'global_map.bin'} not found; run the pipeline first")
    if not (out / "trajectory.txt").is_file():
        raise FileNotFoundError(f"{out / 'trajectory.txt'} not found")
    cloud = load_submap(out / "global_map.bin").gaussians
    _, poses = read_tum_trajectory(out / "trajectory.txt")
    return cloud, poses


def cmd_run(args) -> int:
    cfg = _config(args, None)
    result = run_slam(cfg, args.dataset, str(args.output) if args.output else None, seed=args.seed,
                      mesh=args.mesh, evaluate=args.eval)
    failed = sum(r.tracking_failed for r in result.records)
    print(f"{len(result.records)} frames, {len(result.submap_starts)} sub-maps, "
          f"{len(result.global_map)} Gaussians, {failed} tracking failures")
    if result.report is not None:
        print(result.report.table())
    return 0


def cmd_render(args) -> int:
    out = _require_output(args)
    cfg = _config(args, out)
    cloud, poses = _load_run(out)
    cam = camera_intrinsics(cfg)
    scale = cfg.dataset.depth_scale
    for i, pose in enumerate(poses):
        frame = render(cloud, pose, cam, cfg.render)
        if i == 0:
            (out / "renders").mkdir(exist_ok=True)
        rgb = np.rint(np.clip(frame.color, 0, 1) * 255).astype(np.uint8)
        depth = np.clip(np.rint(frame.depth * scale), 0, 65535).astype(np.uint16)
        Image.fromarray(rgb).save(out / "renders" / f"color_{i:05d}.png")
        Image.fromarray(depth).save(out / "renders" / f"depth_{i:05d}.png")
    print(f"rendered {len(poses)} frames")
    return 0


def cmd_mesh(args) -> int:
    out = _require_output(args)
    cfg = _config(args, out)
    cloud, poses = _load_run(out)
    mesh = build_mesh(cloud, poses, camera_intrinsics(cfg), cfg)
    write_ply(out / "mesh.ply", mesh)
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return 0


def cmd_eval(args) -> int:
    out = _require_output(args)
    cfg = _config(args, out)
    cloud, poses = _load_run(out)
    seq, cam = load_sequence(cfg, args.dataset)
    report = evaluate_run(cloud, poses, seq, cam, cfg.eval.every_n, cfg.render)
    (out / "report.txt").write_text(report.table() + "\n")
    (out / "metrics.txt").write_text(report.dumps())
    print(report.table())
    return 0


def _require_output(args) -> Path:
    if args.output is None:
        raise ValueError("--output is required")
    return args.output


HANDLERS = {"run": cmd_run, "render": cmd_render, "mesh": cmd_mesh, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # bare flags mean "run"
    if not argv or (argv[0] not in COMMANDS and argv[0] not in ("-h", "--help")):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(relativeCreated)8.0f %(message)s")
    try:
        return HANDLERS[args.command](args)
    except PipelineError as e:
        print(f"splatslam: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"splatslam: {PipelineError(args.command, None, e)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
