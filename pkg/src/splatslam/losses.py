"""Scalar objectives and their gradients w.r.t. rendered maps.

Every function returns ``(value, gradient)`` so callers can chain into the
rasterizer's backward pass.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .scene import GaussianCloud

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class TrackingMaskError(RuntimeError):
    """Raised when no pixel survives the tracking masks."""


@dataclass(frozen=True)
class LossWeights:
    lambda_color: float = 1.0
    lambda_depth: float = 1.0
    lambda_reg: float = 1.0
    lambda_ssim: float = 0.2
    # "per_gaussian": each Gaussian's scales are pulled toward their own mean.
    # "submap": every scale is pulled toward the mean scale of the whole sub-map.
    reg_mode: str = "per_gaussian"

    def __post_init__(self):
        for name in ("lambda_color", "lambda_depth", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.lambda_ssim <= 1:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if self.reg_mode not in ("per_gaussian", "submap"):
            raise ValueError(f"unknown reg_mode {self.reg_mode!r}")


def depth_l1(rendered: np.ndarray, target: np.ndarray, valid: np.ndarray | None = None):
    """Mean absolute depth error over valid pixels."""
    if valid is None:
        valid = target > 0
    n = int(valid.sum())
    grad = np.zeros_like(rendered, dtype=np.float64)
    if n == 0:
        warnings.warn("depth_l1: no valid pixels", RuntimeWarning, stacklevel=2)
        return 0.0, grad
    diff = rendered - target
    grad[valid] = np.sign(diff[valid]) / n
    return float(np.abs(diff[valid]).sum() / n), grad


@lru_cache(maxsize=16)
def _filter_matrix(n: int) -> np.ndarray:
    """Gaussian smoothing along one axis with symmetric ('reflect') borders as an n x n matrix."""
    r = SSIM_WINDOW // 2
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    taps /= taps.sum()
    F = np.zeros((n, n))
    for i in range(n):
        for k, w in zip(range(-r, r + 1), taps):
            j = i + k
            # half-sample symmetric reflection: d c b a | a b c d | d c b a
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            F[i, j] += w
    F.setflags(write=False)
    return F


def _blur(img: np.ndarray, adjoint: bool = False) -> np.ndarray:
    H, W, C = img.shape
    Fh = _filter_matrix(H)
    Fw = _filter_matrix(W)
    if adjoint:
        Fh, Fw = Fh.T, Fw.T
    rows = (Fh @ img.reshape(H, W * C)).reshape(H, W, C)
    return np.matmul(Fw, rows)


def _blur_adjoint(img: np.ndarray) -> np.ndarray:
    return _blur(img, adjoint=True)


def _as_hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim(x: np.ndarray, y: np.ndarray, with_grad: bool = False):
    """Mean SSIM (Gaussian window 11, sigma 1.5, data range 1), averaged over channels.

    Filtering reflects at the borders and the mean skips a border of half a
    window, the same conventions as the reference implementation in
    scikit-image with ``gaussian_weights=True, use_sample_covariance=False``.
    With ``with_grad`` also returns dSSIM/dx.
    """
    x = _as_hwc(x)
    y = _as_hwc(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    H, W, C = x.shape
    pad = SSIM_WINDOW // 2
    if H <= 2 * pad or W <= 2 * pad:
        raise ValueError("image smaller than the SSIM window")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    smap = a1 * a2 / (b1 * b2)
    interior = (slice(pad, H - pad), slice(pad, W - pad))
    value = float(smap[interior].mean())
    if not with_grad:
        return value
    w = np.zeros_like(smap)
    w[interior] = 1.0 / (smap[interior].size)
    ws = w * smap
    d_mx = ws * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    d_xx = -ws / b2
    d_xy = ws * 2 / a2
    grad = _blur_adjoint(d_mx) + 2 * x * _blur_adjoint(d_xx) + y * _blur_adjoint(d_xy)
    return value, grad


def color_loss(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2):
    """(1 - lambda) * mean |I_hat - I| + lambda * (1 - SSIM(I_hat, I))."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = np.abs(diff).mean()
    grad = (1 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, gs = ssim(rendered, target, with_grad=True)
        value += lambda_ssim * (1 - s)
        grad -= lambda_ssim * gs.reshape(grad.shape)
    return float(value), grad


def isotropic_reg(cloud: GaussianCloud, mode: str = "per_gaussian"):
    """Mean over Gaussians of |s - s_bar|_1 with s = exp(log_scales); returns (value, dL/dlog_scales)."""
    n = len(cloud)
    if n == 0:
        return 0.0, np.zeros((0, 3))
    s = np.exp(cloud.log_scales)
    if mode == "per_gaussian":
        mean = s.mean(axis=1, keepdims=True)
        sgn = np.sign(s - mean)
        ds = sgn - sgn.mean(axis=1, keepdims=True)
    elif mode == "submap":
        mean = s.mean()
        sgn = np.sign(s - mean)
        ds = sgn - sgn.mean()
    else:
        raise ValueError(f"unknown reg mode {mode!r}")
    value = np.abs(s - mean).sum() / n
    return float(value), ds * s / n


def tracking_loss(color: np.ndarray, depth: np.ndarray, target_color: np.ndarray, target_depth: np.ndarray,
                  m_alpha: np.ndarray, m_inlier: np.ndarray, lambda_c: float = 0.5):
    """Masked photometric + geometric L1 summed over pixels.

    Returns (value, dL/dcolor, dL/ddepth). The masks are treated as constants.
    """
    weight = m_alpha * m_inlier
    if not np.any(weight > 0):
        raise TrackingMaskError("every pixel is masked out")
    dc = color - target_color
    dd = depth - target_depth
    per_pixel = lambda_c * np.abs(dc).mean(axis=-1) + (1 - lambda_c) * np.abs(dd)
    value = float((weight * per_pixel).sum())
    g_color = (weight * lambda_c / 3.0)[..., None] * np.sign(dc)
    g_depth = weight * (1 - lambda_c) * np.sign(dd)
    return value, g_color, g_depth


@dataclass
class MappingLoss:
    total: float
    color: float
    depth: float
    reg: float
    d_color: np.ndarray
    d_depth: np.ndarray
    d_log_scales: np.ndarray


def joint_mapping_loss(color: np.ndarray, depth: np.ndarray, target_color: np.ndarray, target_depth: np.ndarray,
                       cloud: GaussianCloud, weights: LossWeights = LossWeights()) -> MappingLoss:
    """lambda_color * L_color + lambda_depth * L_depth + lambda_reg * L_reg."""
    lc, gc = color_loss(color, target_color, weights.lambda_ssim)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ld, gd = depth_l1(depth, target_depth, target_depth > 0)
    if weights.lambda_reg > 0:
        lr, gr = isotropic_reg(cloud, weights.reg_mode)
    else:
        lr, gr = 0.0, np.zeros_like(cloud.log_scales)
    total = weights.lambda_color * lc + weights.lambda_depth * ld + weights.lambda_reg * lr
    return MappingLoss(
        total, lc, ld, lr,
        weights.lambda_color * gc,
        weights.lambda_depth * gd,
        weights.lambda_reg * gr,
    )
