"""Sub-map construction: creation triggers, seeding, optimization, merging and color refinement."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .config import MappingConfig
from .geometry import CameraIntrinsics, Pose
from .losses import LossWeights, color_loss, joint_mapping_loss
from .optim import Adam, ParamGroupConfig
from .render import DEFAULT_SETTINGS, RenderSettings, backward, render
from .scene import GaussianCloud, Keyframe, SubMap, logit
from .spatial import NeighborGrid

log = logging.getLogger(__name__)


class MappingError(RuntimeError):
    pass


def should_start_submap(current: Pose, anchor: Pose, cfg: MappingConfig) -> bool:
    """Camera moved more than d_thre or turned more than theta_thre since the sub-map's first frame."""
    if np.linalg.norm(current.center() - anchor.center()) > cfg.d_thre:
        return True
    if cfg.rotation_mode == "geodesic":
        angle = np.degrees(current.rotation_angle_to(anchor))
        return bool(angle > cfg.theta_thre)
    rel = current.R @ anchor.R.T
    euler = np.degrees(Rotation.from_matrix(rel).as_euler("xyz"))
    return bool(np.any(np.abs(euler) > cfg.theta_thre))


def gradient_mask(color: np.ndarray, valid: np.ndarray, percentile: float) -> np.ndarray:
    """Valid pixels whose grayscale Sobel magnitude is above the given percentile."""
    gray = color @ np.array([0.299, 0.587, 0.114])
    mag = np.hypot(ndimage.sobel(gray, axis=0), ndimage.sobel(gray, axis=1))
    if not valid.any():
        return valid
    thr = np.percentile(mag[valid], percentile)
    return valid & (mag > thr)


def _sample(rng: np.random.Generator, candidates: np.ndarray, count: int) -> np.ndarray:
    """Up to `count` distinct entries of `candidates`, uniformly."""
    if len(candidates) <= count:
        return rng.permutation(candidates)
    return rng.choice(candidates, size=count, replace=False)


def seed_gaussians(frame, T_wc: Pose, submap: SubMap, is_new_submap: bool, cfg: MappingConfig,
                   cam: CameraIntrinsics, rng_seed, settings: RenderSettings = DEFAULT_SETTINGS) -> int:
    """Back-project sampled pixels into new Gaussians; returns how many were added."""
    rng = np.random.default_rng(rng_seed)
    valid = frame.depth > 0
    flat_valid = np.flatnonzero(valid)
    if len(flat_valid) == 0:
        return 0
    if is_new_submap or len(submap.gaussians) == 0:
        picks = [_sample(rng, flat_valid, cfg.M_u)]
        grad = np.flatnonzero(gradient_mask(frame.color, valid, cfg.grad_percentile))
        picks.append(_sample(rng, grad, cfg.M_c))
        chosen = np.concatenate(picks)
    else:
        alpha = render(submap.gaussians, T_wc, cam, settings).alpha
        sparse = np.flatnonzero(valid & (alpha < cfg.alpha_n))
        chosen = _sample(rng, sparse, cfg.M_k)
    if len(chosen) == 0:
        return 0

    pts_cam = cam.backproject(frame.depth).reshape(-1, 3)[chosen]
    pts = T_wc.inverse().apply(pts_cam)
    cloud = submap.gaussians
    grid = NeighborGrid(cfg.rho, cloud.means)
    accepted = grid.insert(pts, reject_radius=cfg.rho)
    if not accepted.any():
        return 0
    pts = pts[accepted]
    colors = frame.color.reshape(-1, 3)[chosen[accepted]]

    # nearest neighbor among everything in the sub-map after this batch
    tree = cKDTree(grid.points)
    dist, _ = tree.query(pts, k=2)
    nn = dist[:, 1] if grid.points.shape[0] > 1 else np.full(len(pts), cfg.scale_max)
    scale = np.clip(nn, cfg.rho / 2, cfg.scale_max)
    n = len(pts)
    new = GaussianCloud(
        means=pts,
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.full(n, logit(cfg.opacity_init)),
        colors=colors,
    )
    cloud.append(new)
    return n


def mapping_groups(cfg: MappingConfig) -> tuple[ParamGroupConfig, ...]:
    return (
        ParamGroupConfig("means", cfg.lr_means),
        ParamGroupConfig("quats", cfg.lr_quats, unit_norm=True),
        ParamGroupConfig("log_scales", cfg.lr_log_scales),
        ParamGroupConfig("opacity_logits", cfg.lr_opacity_logits),
        ParamGroupConfig("colors", cfg.lr_colors),
    )


def prune_submap(submap: SubMap, o_thre: float, optimizer: Optional[Adam] = None) -> int:
    """Drop Gaussians with opacity below o_thre; returns how many were removed."""
    keep = submap.gaussians.opacities >= o_thre
    removed = int((~keep).sum())
    if removed:
        submap.gaussians.keep(keep)
        if optimizer is not None:
            optimizer.keep(keep)
    return removed


@dataclass
class MappingTrace:
    losses: list[float]
    color_losses: list[float]
    keyframe_picks: list[int]
    pruned: int = 0


def optimize_submap(submap: SubMap, cfg: MappingConfig, weights: LossWeights, cam: CameraIntrinsics,
                    iters: Optional[int] = None, rng_seed=0,
                    settings: RenderSettings = DEFAULT_SETTINGS) -> MappingTrace:
    """Jointly optimize every Gaussian of the sub-map against its keyframes.

    The newest keyframe is picked with probability new_kf_fraction, otherwise
    an older one uniformly. Low-opacity Gaussians are pruned halfway and at
    the end.
    """
    if not submap.keyframes:
        raise MappingError("sub-map has no keyframes")
    if iters is None:
        iters = cfg.iters_first_kf if len(submap.keyframes) == 1 else cfg.iters_kf
    trace = MappingTrace([], [], [])
    if iters <= 0 or len(submap.gaussians) == 0:
        return trace
    rng = np.random.default_rng(rng_seed)
    opt = Adam(mapping_groups(cfg))
    kfs = submap.keyframes
    newest = len(kfs) - 1
    midpoint = iters // 2
    for it in range(iters):
        if newest == 0 or rng.random() < cfg.new_kf_fraction:
            k = newest
        else:
            k = int(rng.integers(0, newest))
        kf = kfs[k]
        cloud = submap.gaussians
        out = render(cloud, kf.pose, cam, settings)
        loss = joint_mapping_loss(out.color, out.depth, kf.frame.color, kf.frame.depth, cloud, weights)
        if not np.isfinite(loss.total):
            raise MappingError(
                f"non-finite mapping loss at iteration {it} (keyframe {kf.index}): "
                f"color={loss.color} depth={loss.depth} reg={loss.reg}"
            )
        g = backward(out, loss.d_color, loss.d_depth, np.zeros_like(out.alpha), cloud, kf.pose, cam)
        grads = g.as_dict()
        grads["log_scales"] = grads["log_scales"] + loss.d_log_scales
        opt.step(cloud.params(), grads)
        trace.losses.append(loss.total)
        trace.color_losses.append(loss.color)
        trace.keyframe_picks.append(k)
        if it + 1 == midpoint or it + 1 == iters:
            trace.pruned += prune_submap(submap, cfg.o_thre, opt)
        if len(submap.gaussians) == 0:
            break
    return trace


def merge_submaps(submaps: Iterable[GaussianCloud], rho: float) -> GaussianCloud:
    """Union of sub-maps in order, skipping Gaussians within rho of one already merged."""
    merged = GaussianCloud()
    grid = NeighborGrid(rho)
    for cloud in submaps:
        if len(cloud) == 0:
            continue
        keep = ~grid.has_neighbor(cloud.means, rho)
        part = cloud.select(np.flatnonzero(keep))
        grid.insert(part.means)
        merged.append(part)
    return merged


def refine_global_colors(cloud: GaussianCloud, keyframes: list[tuple[Pose, object]], cam: CameraIntrinsics,
                         iters: int = 10000, lr: float = 2.5e-3, lambda_ssim: float = 0.2, rng_seed=0,
                         settings: RenderSettings = DEFAULT_SETTINGS) -> list[float]:
    """Optimize colors only, against uniformly sampled keyframes; geometry stays fixed."""
    losses = []
    if iters <= 0 or len(cloud) == 0 or not keyframes:
        return losses
    rng = np.random.default_rng(rng_seed)
    opt = Adam([ParamGroupConfig("colors", lr)])
    zeros_depth = np.zeros((cam.height, cam.width))
    for _ in range(iters):
        pose, frame = keyframes[int(rng.integers(0, len(keyframes)))]
        out = render(cloud, pose, cam, settings)
        value, d_color = color_loss(out.color, frame.color, lambda_ssim)
        g = backward(out, d_color, zeros_depth, zeros_depth, cloud, pose, cam)
        opt.step({"colors": cloud.colors}, {"colors": g.colors})
        losses.append(value)
    return losses


# ------------------------------------------------------------- persistence

_HEADER = struct.Struct("<I")


def save_submap(path, submap: SubMap) -> None:
    """Binary Gaussian records (little-endian float32) plus a text sidecar."""
    path = Path(path)
    rows = submap.gaussians.packed().astype("<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(len(rows)))
        f.write(rows.tobytes())
    q, t = submap.anchor_pose.q, submap.anchor_pose.t
    lines = [
        "anchor_q " + " ".join(repr(float(v)) for v in q),
        "anchor_t " + " ".join(repr(float(v)) for v in t),
        "keyframes " + " ".join(str(kf.index) for kf in submap.keyframes),
    ]
    for kf in submap.keyframes:
        lines.append(f"keyframe_pose {kf.index} " + " ".join(repr(float(v)) for v in (*kf.pose.q, *kf.pose.t)))
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n")


def load_submap_cloud(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    (n,) = _HEADER.unpack_from(data)
    expected = _HEADER.size + n * 14 * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {n} Gaussians, found {len(data)}")
    rows = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, 14)
    return GaussianCloud.from_packed(rows.astype(np.float64))


def load_submap(path) -> SubMap:
    path = Path(path)
    cloud = load_submap_cloud(path)
    meta = {}
    kf_poses = {}
    for line in path.with_suffix(".txt").read_text().splitlines():
        key, _, rest = line.partition(" ")
        if key == "keyframe_pose":
            idx, *vals = rest.split()
            kf_poses[int(idx)] = Pose(np.array(vals[:4], dtype=float), np.array(vals[4:], dtype=float))
        else:
            meta[key] = rest.split()
    anchor = Pose(np.array(meta["anchor_q"], dtype=float), np.array(meta["anchor_t"], dtype=float))
    kfs = [Keyframe(int(i), kf_poses.get(int(i), anchor)) for i in meta.get("keyframes", [])]
    return SubMap(cloud, anchor, kfs)
