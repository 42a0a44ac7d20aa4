"""End-to-end SLAM driver: tracking every frame, sub-map mapping on keyframes, finalization."""
from __future__ import annotations

import json
import logging
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import SLAMConfig
from .datasets import (RGBDSequence, SyntheticSceneSpec, generate_synthetic, load_generic_sequence, load_tum_sequence,
                       subsampled_intrinsics)
from .evaluation import MetricReport, evaluate_run, write_tum_trajectory
from .geometry import CameraIntrinsics, Pose
from .mapping import (load_submap_cloud, merge_submaps, optimize_submap, refine_global_colors, save_submap,
                      seed_gaussians, should_start_submap)
from .meshing import TriangleMesh, TSDFVolume, extract_mesh, write_ply
from .render import RenderSettings, render
from .scene import GaussianCloud, Keyframe, SubMap
from .tracking import track_frame

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, frame: Optional[int], cause: Exception):
        where = f"frame {frame}, " if frame is not None else ""
        super().__init__(f"[{where}stage {stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.frame = frame


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    tracking_ms: float
    mapping_ms: float
    keyframe: bool
    submap: int
    tracking_failed: bool = False
    tracking_loss: Optional[float] = None


class WorkingSet:
    """Counts Gaussians held in memory, to check that only the active sub-map is resident."""

    def __init__(self):
        self.resident: dict[int, SubMap] = {}
        self.peak_excess = 0
        self.peak_resident = 0

    def add(self, key: int, submap: SubMap) -> None:
        self.resident[key] = submap

    def release(self, key: int) -> None:
        self.resident.pop(key, None)

    def check(self, active_key: int) -> None:
        total = sum(len(s.gaussians) for s in self.resident.values())
        active = len(self.resident[active_key].gaussians) if active_key in self.resident else 0
        self.peak_resident = max(self.peak_resident, total)
        self.peak_excess = max(self.peak_excess, total - active)


@dataclass
class RunResult:
    poses: list[Pose]
    timestamps: list[float]
    records: list[FrameRecord]
    submap_starts: list[int]
    global_map: GaussianCloud
    report: Optional[MetricReport] = None
    mesh: Optional[TriangleMesh] = None
    working_set_excess: int = 0
    files: dict[str, str] = field(default_factory=dict)


def load_sequence(cfg: SLAMConfig, dataset: Optional[str]) -> tuple[RGBDSequence, CameraIntrinsics]:
    d = cfg.dataset
    if d.type == "synthetic":
        spec = synthetic_spec(cfg)
        _, seq = generate_synthetic(spec, cfg.render)
        seq = seq[: d.max_frames * d.stride: d.stride] if d.max_frames >= 0 else seq[:: d.stride]
        return seq, spec.intrinsics()
    if dataset is None:
        raise ValueError(f"dataset.type = {d.type} needs a dataset path")
    cam = cfg.camera.intrinsics()
    if d.type == "tum":
        seq = load_tum_sequence(dataset, d.association_tolerance, d.depth_scale, d.downscale, d.stride,
                                d.max_frames, cam)
    elif d.type == "generic":
        seq = load_generic_sequence(dataset, d.depth_scale, d.downscale, d.stride, d.max_frames, cam)
    else:
        raise ValueError(f"unknown dataset.type {d.type!r}")
    return seq, seq.intrinsics


def synthetic_spec(cfg: SLAMConfig) -> SyntheticSceneSpec:
    s = cfg.synthetic
    return SyntheticSceneSpec(
        gaussian_count=s.gaussian_count, extent=s.extent, trajectory=s.trajectory, frames=s.frames,
        width=s.width, height=s.height, fov_degrees=s.fov_degrees, orbit_radius=s.orbit_radius,
        orbit_degrees=s.orbit_degrees, orbit_bob=s.orbit_bob, depth_noise=s.depth_noise,
        clutter_fraction=s.clutter_fraction, clutter_clean_every=s.clutter_clean_every, seed=s.seed,
    )


def camera_intrinsics(cfg: SLAMConfig) -> CameraIntrinsics:
    """Intrinsics of the images a run on this config sees, without loading any frame."""
    if cfg.dataset.type == "synthetic":
        return synthetic_spec(cfg).intrinsics()
    return subsampled_intrinsics(cfg.camera.intrinsics(), cfg.dataset.downscale)


def build_mesh(cloud: GaussianCloud, poses: list[Pose], cam: CameraIntrinsics, cfg: SLAMConfig) -> TriangleMesh:
    """Fuse rendered depth and color of the map at every n-th pose, then run marching cubes."""
    m = cfg.meshing
    volume = TSDFVolume(m.voxel_size, m.truncation)
    for pose in poses[:: max(1, m.every_n)]:
        out = render(cloud, pose, cam, cfg.render)
        depth = np.where(out.alpha >= m.alpha_min, out.depth, 0.0)
        volume.integrate(depth, np.clip(out.color, 0, 1), pose, cam)
    return extract_mesh(volume)


def _seeds(seed: int, frame: int, purpose: int) -> list[int]:
    return [seed, frame, purpose]


def run_slam(cfg: SLAMConfig, dataset: Optional[str] = None, output: Optional[str] = None,
             seed: Optional[int] = None, mesh: bool = False, evaluate: bool = False,
             sequence: Optional[RGBDSequence] = None, cam: Optional[CameraIntrinsics] = None) -> RunResult:
    """Run tracking and mapping over a sequence and write all outputs to `output`."""
    seed = cfg.run.seed if seed is None else seed
    if sequence is None:
        try:
            sequence, cam = load_sequence(cfg, dataset)
        except Exception as e:
            raise PipelineError("load", None, e) from e
    if cam is None:
        raise ValueError("camera intrinsics are required")
    if len(sequence) == 0:
        raise PipelineError("load", None, ValueError("sequence has no frames"))

    scratch = None
    if output is None:
        scratch = tempfile.TemporaryDirectory(prefix="splatslam-")
        out_dir = Path(scratch.name)
    else:
        out_dir = Path(output)
    sub_dir = out_dir / "submaps"
    sub_dir.mkdir(parents=True, exist_ok=True)

    settings: RenderSettings = cfg.render
    mcfg = cfg.mapping
    poses: list[Pose] = []
    timestamps: list[float] = []
    records: list[FrameRecord] = []
    submap_files: list[Path] = []
    submap_starts: list[int] = []
    keyframe_refs: list[tuple[int, Pose]] = []
    ws = WorkingSet()
    active: Optional[SubMap] = None

    def finalize(sm: SubMap) -> None:
        path = sub_dir / f"submap_{len(submap_files):03d}.bin"
        save_submap(path, sm)
        submap_files.append(path)
        for kf in sm.keyframes:
            kf.frame = None
        ws.release(len(submap_files) - 1)

    for i in range(len(sequence)):
        stage = "load"
        try:
            frame = sequence[i]
            stage = "tracking"
            t0 = time.perf_counter()
            failed, loss = False, None
            if i == 0:
                pose = frame.gt_pose if frame.gt_pose is not None else Pose.identity()
            else:
                res = track_frame(frame, active, poses, cam, cfg.tracking, settings)
                pose, failed, loss = res.pose, res.failed, res.loss
            t1 = time.perf_counter()
            poses.append(pose)
            timestamps.append(frame.timestamp)

            is_kf = i % mcfg.keyframe_every == 0
            if is_kf:
                stage = "mapping"
                new = active is None or should_start_submap(pose, active.anchor_pose, mcfg)
                if new:
                    if active is not None:
                        finalize(active)
                    active = SubMap()
                    submap_starts.append(i)
                    ws.add(len(submap_files), active)
                active.add_keyframe(Keyframe(i, pose, frame))
                keyframe_refs.append((i, pose))
                seed_gaussians(frame, pose, active, new, mcfg, cam, _seeds(seed, i, 0), settings)
                optimize_submap(active, mcfg, cfg.loss, cam, rng_seed=_seeds(seed, i, 1), settings=settings)
                ws.check(len(submap_files))
            t2 = time.perf_counter()
        except Exception as e:
            raise PipelineError(stage, i, e) from e
        records.append(FrameRecord(i, frame.timestamp, 1000 * (t1 - t0), 1000 * (t2 - t1), is_kf,
                                   len(submap_starts) - 1, failed, loss))
        log.info("frame %d: tracking %.0f ms, mapping %.0f ms%s", i, records[-1].tracking_ms,
                 records[-1].mapping_ms, " (tracking failed)" if failed else "")

    try:
        stage = "finalize"
        finalize(active)
        stage = "merge"
        global_map = merge_submaps((load_submap_cloud(p) for p in submap_files), mcfg.rho)
        stage = "refine"
        kfs = [(pose, sequence[idx]) for idx, pose in keyframe_refs]
        refine_global_colors(global_map, kfs, cam, mcfg.refine_iters, mcfg.lr_colors, cfg.loss.lambda_ssim,
                             _seeds(seed, len(sequence), 2), settings)
        del kfs
        stage = "write"
        result = RunResult(poses, timestamps, records, submap_starts, global_map,
                           working_set_excess=ws.peak_excess)
        result.files["trajectory"] = str(out_dir / "trajectory.txt")
        write_tum_trajectory(out_dir / "trajectory.txt", timestamps, poses)
        global_sm = SubMap(global_map, poses[0], [Keyframe(i, p) for i, p in keyframe_refs])
        save_submap(out_dir / "global_map.bin", global_sm)
        result.files["global_map"] = str(out_dir / "global_map.bin")
        (out_dir / "config.txt").write_text(cfg.dumps())
        if evaluate:
            stage = "eval"
            result.report = evaluate_run(global_map, poses, sequence, cam, cfg.eval.every_n, settings)
            (out_dir / "report.txt").write_text(result.report.table() + "\n")
            (out_dir / "metrics.txt").write_text(result.report.dumps())
            result.files["metrics"] = str(out_dir / "metrics.txt")
        if mesh:
            stage = "mesh"
            result.mesh = build_mesh(global_map, poses, cam, cfg)
            write_ply(out_dir / "mesh.ply", result.mesh)
            result.files["mesh"] = str(out_dir / "mesh.ply")
        stage = "manifest"
        write_manifest(out_dir / "manifest.json", cfg, dataset, out_dir, seed, result, submap_files)
        result.files["manifest"] = str(out_dir / "manifest.json")
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(stage, None, e) from e
    finally:
        if scratch is not None:
            scratch.cleanup()
    if scratch is not None:
        result.files = {}
    return result


def write_manifest(path: Path, cfg: SLAMConfig, dataset: Optional[str], out_dir: Path, seed: int,
                   result: RunResult, submap_files: list[Path]) -> None:
    manifest = {
        "config": cfg.dumps(),
        "dataset": None if dataset is None else str(Path(dataset).resolve()),
        "output": str(out_dir.resolve()),
        "seed": seed,
        "submap_starts": result.submap_starts,
        "submap_files": [p.name for p in submap_files],
        "working_set_excess": result.working_set_excess,
        "gaussians": len(result.global_map),
        "frames": [asdict(r) for r in result.records],
    }
    path.write_text(json.dumps(manifest, indent=1) + "\n")
