"""Frame-to-model camera tracking against the active sub-map."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TrackingConfig
from .geometry import CameraIntrinsics, Pose, constant_velocity_init, normalized_quat_vjp, quat_matrix_vjp
from .losses import TrackingMaskError, tracking_loss
from .optim import Adam, ParamGroupConfig
from .render import DEFAULT_SETTINGS, RenderedFrame, RenderSettings, backward, render
from .scene import SubMap

log = logging.getLogger(__name__)


def compute_masks(rendered: RenderedFrame, target, cfg: TrackingConfig):
    """Soft alpha weights and the boolean inlier mask for one candidate pose.

    Pixels without valid input depth never count. The alpha and outlier
    rules can each be switched off for ablations.
    """
    if rendered.alpha.shape != target.depth.shape:
        raise ValueError(f"rendered {rendered.alpha.shape} vs target {target.depth.shape}")
    valid = target.depth > 0
    if not valid.any():
        raise TrackingMaskError("target frame has no valid depth")
    if cfg.use_alpha_mask:
        m_alpha = rendered.alpha**cfg.alpha_exponent
    else:
        m_alpha = np.ones_like(rendered.alpha)
    m_inlier = valid.copy()
    if cfg.use_inlier_mask:
        depth_err = np.abs(rendered.depth - target.depth)
        color_err = np.abs(rendered.color - target.color).mean(axis=-1)
        m_inlier &= depth_err <= cfg.inlier_multiplier * np.median(depth_err[valid])
        m_inlier &= color_err <= cfg.inlier_multiplier * np.median(color_err[valid])
    return m_alpha, m_inlier


@dataclass
class TrackingResult:
    pose: Pose
    init_pose: Pose
    loss: float = np.inf
    iterations: int = 0
    failed: bool = False
    message: str = ""
    best_losses: list[float] = field(default_factory=list)


def track_frame(frame, submap: SubMap, history: list[Pose], cam: CameraIntrinsics, cfg: TrackingConfig,
                settings: RenderSettings = DEFAULT_SETTINGS, init: Pose | None = None) -> TrackingResult:
    """Estimate the world-to-camera pose of `frame` with the sub-map frozen.

    The pose is parameterized as a correction applied on the left of the
    initial guess (constant velocity unless `init` is given). Returns the
    iterate with the lowest loss.
    """
    init = init if init is not None else constant_velocity_init(history)
    result = TrackingResult(init, init)
    cloud = submap.gaussians
    if len(cloud) == 0:
        result.failed, result.message = True, "active sub-map is empty"
        return result
    R0, t0 = init.R, init.t
    params = {"pose_q": np.array([[1.0, 0.0, 0.0, 0.0]]), "pose_t": np.zeros((1, 3))}
    opt = Adam([ParamGroupConfig("pose_q", cfg.lr_q, unit_norm=True), ParamGroupConfig("pose_t", cfg.lr_t)])
    zeros = np.zeros((cam.height, cam.width))
    best = np.inf
    prev = None
    for it in range(cfg.iters):
        delta = Pose(params["pose_q"][0], params["pose_t"][0])
        pose = delta @ init
        out = render(cloud, pose, cam, settings)
        try:
            m_alpha, m_inlier = compute_masks(out, frame, cfg)
            value, g_color, g_depth = tracking_loss(out.color, out.depth, frame.color, frame.depth,
                                                    m_alpha, m_inlier, cfg.lambda_c)
        except TrackingMaskError as e:
            return _failed(result, f"iteration {it}: {e}")
        if not np.isfinite(value):
            return _failed(result, f"iteration {it}: non-finite tracking loss")
        result.iterations = it + 1
        # iterates are ranked by the weighted mean residual: the alpha weights
        # change with the pose, and a raw sum rewards sliding the map out of view
        score = value / float((m_alpha * m_inlier).sum())
        if score < best:
            best = score
            result.pose, result.loss = pose, score
        result.best_losses.append(best)
        if prev is not None and abs(prev - value) < cfg.convergence_eps:
            break
        prev = value
        if it == cfg.iters - 1:
            break
        g = backward(out, g_color, g_depth, zeros, cloud, pose, cam, want_pose_grad=True)
        # chain dL/dR, dL/dt of the full pose to the left correction (R = R_d R0, t = R_d t0 + t_d)
        g_Rd = g.pose_R @ R0.T + np.outer(g.pose_t, t0)
        qd = delta.q
        g_qd = normalized_quat_vjp(params["pose_q"][0], quat_matrix_vjp(qd, g_Rd))
        opt.step(params, {"pose_q": g_qd[None], "pose_t": g.pose_t[None]})
    return result


def _failed(result: TrackingResult, message: str) -> TrackingResult:
    log.warning("tracking failed: %s", message)
    result.pose = result.init_pose
    result.failed = True
    result.message = message
    return result
