"""Trajectory and rendering metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datasets import pose_from_tum, pose_to_tum
from .geometry import CameraIntrinsics, Pose
from .losses import ssim
from .render import DEFAULT_SETTINGS, RenderSettings, render
from .scene import GaussianCloud

PSNR_CAP = 100.0


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimizing sum |R src_i + t - dst_i|^2 (no scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate_rmse(estimated: Sequence[Pose], ground_truth: Sequence[Pose]) -> float:
    """RMSE of camera centers after rigid alignment, in centimeters."""
    if len(estimated) != len(ground_truth):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(ground_truth)}")
    if len(estimated) < 2:
        raise ValueError("need at least two poses")
    est = np.array([p.center() for p in estimated])
    gt = np.array([p.center() for p in ground_truth])
    R, t = align_rigid(est, gt)
    err = est @ R.T + t - gt
    return float(np.sqrt((err**2).sum(axis=1).mean()) * 100.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def depth_l1_cm(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute depth error over pixels with valid target depth, in centimeters."""
    valid = target > 0
    if not valid.any():
        return 0.0
    return float(np.abs(rendered[valid] - target[valid]).mean() * 100.0)


@dataclass
class MetricReport:
    ate_rmse: Optional[float]  # cm, None without ground truth
    psnr_mean: float
    ssim_mean: float
    depth_l1_mean: float  # cm
    frame_indices: list[int] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    depth_l1: list[float] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        out = {
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "depth_l1_mean_cm": self.depth_l1_mean,
            "frames": len(self.frame_indices),
        }
        if self.ate_rmse is not None:
            out["ate_rmse_cm"] = self.ate_rmse
        return out

    def table(self) -> str:
        rows = [("metric", "value")] + [(k, f"{v:.4f}" if isinstance(v, float) else str(v))
                                        for k, v in self.summary().items()]
        w = max(len(r[0]) for r in rows)
        lines = [f"{k:<{w}}  {v}" for k, v in rows]
        lines.insert(1, "-" * (w + 12))
        return "\n".join(lines)

    def dumps(self) -> str:
        """Flat key=value text, summary first, then per-frame values."""
        lines = [f"{k}={v!r}" for k, v in self.summary().items()]
        for i, p, s, d in zip(self.frame_indices, self.psnr, self.ssim, self.depth_l1):
            lines.append(f"frame.{i}.psnr={p!r}")
            lines.append(f"frame.{i}.ssim={s!r}")
            lines.append(f"frame.{i}.depth_l1_cm={d!r}")
        return "\n".join(lines) + "\n"


def evaluate_run(cloud: GaussianCloud, poses: Sequence[Pose], frames, cam: CameraIntrinsics, every_n: int = 5,
                 settings: RenderSettings = DEFAULT_SETTINGS,
                 gt_poses: Optional[Sequence[Optional[Pose]]] = None) -> MetricReport:
    """Render every_n-th frame at the estimated pose and compare with the input.

    ATE is reported when every frame has a ground-truth pose.
    """
    if len(poses) != len(frames):
        raise ValueError(f"{len(poses)} poses for {len(frames)} frames")
    idx = list(range(0, len(frames), max(1, every_n)))
    p_vals, s_vals, d_vals = [], [], []
    for i in idx:
        frame = frames[i]
        out = render(cloud, poses[i], cam, settings)
        color = np.clip(out.color, 0.0, 1.0)
        p_vals.append(psnr(color, frame.color))
        s_vals.append(ssim(color, frame.color))
        d_vals.append(depth_l1_cm(out.depth, frame.depth))
    if gt_poses is None:
        gt_poses = frames.gt_poses() if hasattr(frames, "gt_poses") else [f.gt_pose for f in frames]
    have_gt = len(gt_poses) >= 2 and all(p is not None for p in gt_poses)
    ate = ate_rmse(poses, gt_poses) if have_gt else None
    return MetricReport(ate, _mean(p_vals), _mean(s_vals), _mean(d_vals), idx, p_vals, s_vals, d_vals)


def _mean(values) -> float:
    return float(np.mean(values)) if values else 0.0


def write_tum_trajectory(path, timestamps: Sequence[float], poses: Sequence[Pose]) -> None:
    """`timestamp tx ty tz qx qy qz qw` per line, camera-to-world."""
    with open(path, "w") as f:
        for ts, pose in zip(timestamps, poses):
            f.write(f"{ts:.6f} " + " ".join(f"{v:.9f}" for v in pose_to_tum(pose)) + "\n")


def read_tum_trajectory(path) -> tuple[list[float], list[Pose]]:
    timestamps, poses = [], []
    for line in open(path):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) != 8:
            raise ValueError(f"{path}: expected 8 values per line, got {len(fields)}")
        timestamps.append(float(fields[0]))
        poses.append(pose_from_tum([float(v) for v in fields[1:]]))
    return timestamps, poses
