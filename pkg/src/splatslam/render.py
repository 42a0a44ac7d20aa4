"""Tile-based differentiable rasterizer for 3D Gaussians.

Forward: project every Gaussian with the local affine (EWA) approximation of
the pinhole projection, bin the 2D footprints into square tiles, sort each
tile's list by camera depth and alpha-composite color, depth and alpha front
to back. Backward: replay each pixel's compositing back to front and chain
the per-pixel gradients down to the Gaussian parameters and the camera pose.

Pixel (row v, column u) sits at image coordinate (u, v).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from .geometry import CameraIntrinsics, Pose, normalized_quat_vjp, quat_matrix_vjp, quat_normalize, quat_to_matrix
from .scene import GaussianCloud, sigmoid


@dataclass(frozen=True)
class RenderSettings:
    tile_size: int = 16
    extent_sigmas: float = 3.0
    dilation: float = 0.3
    alpha_max: float = 0.999
    alpha_min: float = 1.0 / 255.0
    transmittance_min: float = 1e-4


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class ProjectedGaussians:
    """Screen-space footprint of every Gaussian in a cloud (culled ones have radius 0)."""

    p_cam: np.ndarray  # (N, 3) camera-frame means
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 3) packed [A, B, C], dilation included
    conic: np.ndarray  # (N, 3) packed inverse of cov2d
    radius: np.ndarray  # (N,) int64, 0 when culled
    n_nonfinite: int = 0
    n_singular: int = 0

    @property
    def depth(self) -> np.ndarray:
        return self.p_cam[:, 2]

    @property
    def visible(self) -> np.ndarray:
        return self.radius > 0


@dataclass
class RenderedFrame:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)
    final_T: np.ndarray  # (H, W)
    # Compositing state needed to replay a pixel.
    proj: Optional[ProjectedGaussians] = None
    opacities: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    pair_gauss: Optional[np.ndarray] = None
    tile_ranges: Optional[np.ndarray] = None
    last: Optional[np.ndarray] = None  # (H, W) one past the last contributing pair
    tiles_x: int = 0
    settings: RenderSettings = field(default=DEFAULT_SETTINGS)
    reach: Optional[np.ndarray] = None  # (N, 2) pixel offsets beyond which alpha < alpha_min

    @property
    def has_records(self) -> bool:
        return self.pair_gauss is not None

    def records(self, v: int, u: int):
        """Contributors of pixel (v, u) front to back: (indices, alphas, transmittances)."""
        if not self.has_records:
            raise ValueError("frame carries no blending records")
        s = self.settings
        t = (v // s.tile_size) * self.tiles_x + u // s.tile_size
        start = self.tile_ranges[t, 0]
        idx, alphas, trans = [], [], []
        T = 1.0
        for k in range(start, self.last[v, u]):
            g = self.pair_gauss[k]
            a = _pixel_alpha(self, g, u, v)
            if a < s.alpha_min:
                continue
            idx.append(int(g))
            alphas.append(a)
            trans.append(T)
            T *= 1.0 - a
        return np.array(idx, dtype=np.int64), np.array(alphas), np.array(trans)


def alpha_reach(proj: ProjectedGaussians, opac: np.ndarray, alpha_min: float) -> np.ndarray:
    """Per-axis pixel offsets outside of which a Gaussian's alpha is certainly below alpha_min.

    alpha >= alpha_min needs sigma <= log(o / alpha_min), an ellipse whose
    bounding box has half-widths sqrt(2 log(o / alpha_min) cov_xx) and
    likewise for y. Skipping outside the box does not change the image.
    """
    with np.errstate(divide="ignore"):
        level = np.log(opac / alpha_min)
    reach = np.full((len(opac), 2), -1.0)
    ok = level > 0
    cov = proj.cov2d[ok]
    reach[ok, 0] = np.sqrt(2.0 * level[ok] * cov[:, 0])
    reach[ok, 1] = np.sqrt(2.0 * level[ok] * cov[:, 2])
    # slack against round-off at the boundary
    reach[ok] = reach[ok] * (1.0 + 1e-6) + 1e-6
    return reach


def _pixel_alpha(frame: RenderedFrame, g: int, u: int, v: int) -> float:
    a, b, c = frame.proj.conic[g]
    dx = u - frame.proj.mean2d[g, 0]
    dy = v - frame.proj.mean2d[g, 1]
    sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
    if sigma < 0:
        return 0.0
    return min(frame.settings.alpha_max, frame.opacities[g] * np.exp(-sigma))


@nb.njit(cache=True)
def _project_kernel(means, Rs, log_scales, Rwc, t, fx, fy, cx, cy, width, height, z_near, z_far,
                    dilation, extent_sigmas, p_cam, mean2d, cov2d, conic, radius, counters):
    n = means.shape[0]
    for i in range(n):
        x = Rwc[0, 0] * means[i, 0] + Rwc[0, 1] * means[i, 1] + Rwc[0, 2] * means[i, 2] + t[0]
        y = Rwc[1, 0] * means[i, 0] + Rwc[1, 1] * means[i, 1] + Rwc[1, 2] * means[i, 2] + t[1]
        z = Rwc[2, 0] * means[i, 0] + Rwc[2, 1] * means[i, 1] + Rwc[2, 2] * means[i, 2] + t[2]
        p_cam[i, 0] = x
        p_cam[i, 1] = y
        p_cam[i, 2] = z
        radius[i] = 0
        if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
            counters[0] += 1
            continue
        if z < z_near or z > z_far:
            continue
        # World covariance M M^T, M = R diag(s); then camera frame W = Rwc M.
        W = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                acc = 0.0
                for m in range(3):
                    acc += Rwc[r, m] * Rs[i, m, k]
                W[r, k] = acc * np.exp(log_scales[i, k])
        # J rows: [fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]
        j00 = fx / z
        j02 = -fx * x / (z * z)
        j11 = fy / z
        j12 = -fy * y / (z * z)
        A = 0.0
        B = 0.0
        C = 0.0
        for k in range(3):
            u0 = j00 * W[0, k] + j02 * W[2, k]
            u1 = j11 * W[1, k] + j12 * W[2, k]
            A += u0 * u0
            B += u0 * u1
            C += u1 * u1
        A += dilation
        C += dilation
        mx = fx * x / z + cx
        my = fy * y / z + cy
        mean2d[i, 0] = mx
        mean2d[i, 1] = my
        cov2d[i, 0] = A
        cov2d[i, 1] = B
        cov2d[i, 2] = C
        det = A * C - B * B
        if not (np.isfinite(det) and np.isfinite(mx) and np.isfinite(my)):
            counters[0] += 1
            continue
        if det <= 0.0:
            counters[1] += 1
            continue
        conic[i, 0] = C / det
        conic[i, 1] = -B / det
        conic[i, 2] = A / det
        mid = 0.5 * (A + C)
        lam = mid + np.sqrt(max(0.0, mid * mid - det))
        r = int(np.ceil(extent_sigmas * np.sqrt(lam)))
        if mx + r < 0 or mx - r > width - 1 or my + r < 0 or my - r > height - 1:
            continue
        radius[i] = max(r, 1)


def project(cloud: GaussianCloud, pose: Pose, cam: CameraIntrinsics,
            settings: RenderSettings = DEFAULT_SETTINGS) -> ProjectedGaussians:
    n = len(cloud)
    p_cam = np.zeros((n, 3))
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    radius = np.zeros(n, dtype=np.int64)
    counters = np.zeros(2, dtype=np.int64)
    if n:
        Rs = quat_to_matrix(quat_normalize(cloud.quats))
        _project_kernel(
            cloud.means, np.ascontiguousarray(Rs), cloud.log_scales, pose.R, pose.t,
            float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), int(cam.width), int(cam.height),
            float(cam.z_near), float(cam.z_far), float(settings.dilation), float(settings.extent_sigmas),
            p_cam, mean2d, cov2d, conic, radius, counters,
        )
    return ProjectedGaussians(p_cam, mean2d, cov2d, conic, radius, int(counters[0]), int(counters[1]))


@nb.njit(cache=True)
def _count_tiles(mean2d, radius, tile, tiles_x, tiles_y, rect):
    n = mean2d.shape[0]
    total = 0
    for i in range(n):
        r = radius[i]
        if r <= 0:
            rect[i, 0] = 0
            rect[i, 1] = -1
            rect[i, 2] = 0
            rect[i, 3] = -1
            continue
        x0 = max(0, int(np.floor((mean2d[i, 0] - r) / tile)))
        x1 = min(tiles_x - 1, int(np.floor((mean2d[i, 0] + r) / tile)))
        y0 = max(0, int(np.floor((mean2d[i, 1] - r) / tile)))
        y1 = min(tiles_y - 1, int(np.floor((mean2d[i, 1] + r) / tile)))
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        if x1 >= x0 and y1 >= y0:
            total += (x1 - x0 + 1) * (y1 - y0 + 1)
    return total


@nb.njit(cache=True)
def _emit_pairs(rect, tiles_x, pair_tile, pair_gauss):
    k = 0
    for i in range(rect.shape[0]):
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                pair_tile[k] = ty * tiles_x + tx
                pair_gauss[k] = i
                k += 1


def bin_gaussians(proj: ProjectedGaussians, cam: CameraIntrinsics, settings: RenderSettings):
    """Sorted (tile, depth, index) pair list and per-tile [start, end) ranges."""
    tile = settings.tile_size
    tiles_x = (cam.width + tile - 1) // tile
    tiles_y = (cam.height + tile - 1) // tile
    n = len(proj.radius)
    rect = np.zeros((n, 4), dtype=np.int64)
    total = _count_tiles(proj.mean2d, proj.radius, tile, tiles_x, tiles_y, rect) if n else 0
    pair_tile = np.zeros(total, dtype=np.int64)
    pair_gauss = np.zeros(total, dtype=np.int64)
    if total:
        _emit_pairs(rect, tiles_x, pair_tile, pair_gauss)
        order = np.lexsort((pair_gauss, proj.depth[pair_gauss], pair_tile))
        pair_tile = pair_tile[order]
        pair_gauss = pair_gauss[order]
    n_tiles = tiles_x * tiles_y
    bounds = np.searchsorted(pair_tile, np.arange(n_tiles + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64)
    return pair_gauss, ranges, tiles_x, tiles_y


@nb.njit(cache=True)
def _gather_tile(start, end, pair_gauss, mean2d, conic, reach, opac, local):
    """Copy the tile's per-pair quantities into one contiguous (n, 8) block."""
    for j in range(end - start):
        g = pair_gauss[start + j]
        local[j, 0] = mean2d[g, 0]
        local[j, 1] = mean2d[g, 1]
        local[j, 2] = reach[g, 0]
        local[j, 3] = reach[g, 1]
        local[j, 4] = conic[g, 0]
        local[j, 5] = conic[g, 1]
        local[j, 6] = conic[g, 2]
        local[j, 7] = opac[g]


@nb.njit(cache=True)
def _row_candidates(local, n, v, out):
    """Tile-local indices whose vertical reach covers row v, in depth order; returns the count."""
    m = 0
    for j in range(n):
        if abs(v - local[j, 1]) <= local[j, 3]:
            out[m] = j
            m += 1
    return m


@nb.njit(parallel=True, cache=True)
def _forward_kernel(ranges, pair_gauss, mean2d, conic, reach, opac, colors, depths, width, height, tile, tiles_x,
                    alpha_max, alpha_min, t_min, out_color, out_depth, out_alpha, out_T, out_last):
    n_tiles = ranges.shape[0]
    for t in nb.prange(n_tiles):
        start = ranges[t, 0]
        end = ranges[t, 1]
        n = end - start
        ty = t // tiles_x
        tx = t - ty * tiles_x
        local = np.empty((n, 8))
        _gather_tile(start, end, pair_gauss, mean2d, conic, reach, opac, local)
        feat = np.empty((n, 4))
        for j in range(n):
            g = pair_gauss[start + j]
            feat[j, 0] = colors[g, 0]
            feat[j, 1] = colors[g, 1]
            feat[j, 2] = colors[g, 2]
            feat[j, 3] = depths[g]
        row = np.empty(n, dtype=np.int64)
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            n_row = _row_candidates(local, n, v, row)
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                acc = 0.0
                last = start
                for i in range(n_row):
                    j = row[i]
                    dx = u - local[j, 0]
                    if abs(dx) > local[j, 2]:
                        continue
                    dy = v - local[j, 1]
                    sigma = 0.5 * (local[j, 4] * dx * dx + local[j, 6] * dy * dy) + local[j, 5] * dx * dy
                    if sigma < 0.0:
                        continue
                    alpha = min(alpha_max, local[j, 7] * np.exp(-sigma))
                    if alpha < alpha_min:
                        continue
                    w = alpha * T
                    c0 += w * feat[j, 0]
                    c1 += w * feat[j, 1]
                    c2 += w * feat[j, 2]
                    d += w * feat[j, 3]
                    acc += w
                    T *= 1.0 - alpha
                    last = start + j + 1
                    if T < t_min:
                        break
                out_color[v, u, 0] = c0
                out_color[v, u, 1] = c1
                out_color[v, u, 2] = c2
                out_depth[v, u] = d
                out_alpha[v, u] = acc
                out_T[v, u] = T
                out_last[v, u] = last


def render(cloud: GaussianCloud, pose: Pose, cam: CameraIntrinsics,
           settings: RenderSettings = DEFAULT_SETTINGS) -> RenderedFrame:
    """Render color, depth and accumulated alpha of a Gaussian cloud at a world-to-camera pose."""
    H, W = cam.height, cam.width
    proj = project(cloud, pose, cam, settings)
    pair_gauss, ranges, tiles_x, _ = bin_gaussians(proj, cam, settings)
    opac = sigmoid(cloud.opacity_logits)
    reach = alpha_reach(proj, opac, settings.alpha_min)
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    final_T = np.ones((H, W))
    last = np.zeros((H, W), dtype=np.int64)
    if len(pair_gauss):
        _forward_kernel(
            ranges, pair_gauss, proj.mean2d, proj.conic, reach, opac, cloud.colors, proj.depth, W, H,
            settings.tile_size, tiles_x, settings.alpha_max, settings.alpha_min, settings.transmittance_min,
            color, depth, alpha, final_T, last,
        )
    return RenderedFrame(color, depth, alpha, final_T, proj, opac, cloud.colors.copy(), pair_gauss, ranges,
                         last, tiles_x, settings, reach)


@dataclass
class ParamGradients:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    pose_q: Optional[np.ndarray] = None
    pose_t: Optional[np.ndarray] = None
    pose_R: Optional[np.ndarray] = None  # dL/dR_wc, for chaining to other pose parameterizations

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means,
            "quats": self.quats,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }


@nb.njit(parallel=True, cache=True)
def _backward_kernel(ranges, pair_gauss, mean2d, conic, reach, opac, colors, depths, width, height, tile, tiles_x,
                     alpha_max, alpha_min, last, dl_dcolor, dl_ddepth, dl_dalpha,
                     g_mean2d, g_conic, g_opac, g_color, g_depth):
    n_tiles = ranges.shape[0]
    for t in nb.prange(n_tiles):
        start = ranges[t, 0]
        end = ranges[t, 1]
        if end == start:
            continue
        ty = t // tiles_x
        tx = t - ty * tiles_x
        n = end - start
        local = np.empty((n, 8))
        _gather_tile(start, end, pair_gauss, mean2d, conic, reach, opac, local)
        ks = np.empty(n, dtype=np.int64)
        als = np.empty(n)
        Ts = np.empty(n)
        clamped = np.empty(n, dtype=np.bool_)
        row = np.empty(n, dtype=np.int64)
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            n_row = _row_candidates(local, n, v, row)
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                stop = last[v, u] - start
                # Replay front to back.
                cnt = 0
                T = 1.0
                for i in range(n_row):
                    j = row[i]
                    if j >= stop:
                        break
                    dx = u - local[j, 0]
                    if abs(dx) > local[j, 2]:
                        continue
                    dy = v - local[j, 1]
                    sigma = 0.5 * (local[j, 4] * dx * dx + local[j, 6] * dy * dy) + local[j, 5] * dx * dy
                    if sigma < 0.0:
                        continue
                    k = start + j
                    raw = local[j, 7] * np.exp(-sigma)
                    alpha = min(alpha_max, raw)
                    if alpha < alpha_min:
                        continue
                    ks[cnt] = k
                    als[cnt] = alpha
                    Ts[cnt] = T
                    clamped[cnt] = raw > alpha_max
                    cnt += 1
                    T *= 1.0 - alpha
                gc0 = dl_dcolor[v, u, 0]
                gc1 = dl_dcolor[v, u, 1]
                gc2 = dl_dcolor[v, u, 2]
                gd = dl_ddepth[v, u]
                ga = dl_dalpha[v, u]
                # Suffix accumulators: B = sum_{s>j} f_s a_s prod_{j<m<s}(1 - a_m).
                b0 = 0.0
                b1 = 0.0
                b2 = 0.0
                bd = 0.0
                ba = 0.0
                for m in range(cnt - 1, -1, -1):
                    k = ks[m]
                    g = pair_gauss[k]
                    alpha = als[m]
                    T = Ts[m]
                    w = alpha * T
                    g_color[k, 0] += gc0 * w
                    g_color[k, 1] += gc1 * w
                    g_color[k, 2] += gc2 * w
                    g_depth[k] += gd * w
                    col0 = colors[g, 0]
                    col1 = colors[g, 1]
                    col2 = colors[g, 2]
                    z = depths[g]
                    dl_da = T * (gc0 * (col0 - b0) + gc1 * (col1 - b1) + gc2 * (col2 - b2)
                                 + gd * (z - bd) + ga * (1.0 - ba))
                    b0 = col0 * alpha + (1.0 - alpha) * b0
                    b1 = col1 * alpha + (1.0 - alpha) * b1
                    b2 = col2 * alpha + (1.0 - alpha) * b2
                    bd = z * alpha + (1.0 - alpha) * bd
                    ba = alpha + (1.0 - alpha) * ba
                    if clamped[m]:
                        continue
                    dx = u - mean2d[g, 0]
                    dy = v - mean2d[g, 1]
                    ca = conic[g, 0]
                    cb = conic[g, 1]
                    cc = conic[g, 2]
                    sigma = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                    g_opac[k] += dl_da * np.exp(-sigma)
                    dl_ds = -dl_da * alpha
                    g_conic[k, 0] += dl_ds * 0.5 * dx * dx
                    g_conic[k, 1] += dl_ds * dx * dy
                    g_conic[k, 2] += dl_ds * 0.5 * dy * dy
                    g_mean2d[k, 0] -= dl_ds * (ca * dx + cb * dy)
                    g_mean2d[k, 1] -= dl_ds * (cb * dx + cc * dy)


def _segment_sum(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of `values` into n buckets by idx (fixed order, so deterministic)."""
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n)
    return np.stack([np.bincount(idx, weights=values[:, c], minlength=n) for c in range(values.shape[1])], axis=1)


def backward(frame: RenderedFrame, dl_dcolor: np.ndarray, dl_ddepth: np.ndarray, dl_dalpha: np.ndarray,
             cloud: GaussianCloud, pose: Pose, cam: CameraIntrinsics, want_pose_grad: bool = False,
             ) -> ParamGradients:
    """Gradients of a scalar loss w.r.t. every Gaussian parameter (and the pose) given per-pixel gradients."""
    if not frame.has_records:
        raise ValueError("frame carries no blending records; render() must be used")
    n = len(cloud)
    H, W = cam.height, cam.width
    s = frame.settings
    proj = frame.proj
    npairs = len(frame.pair_gauss)
    g_mean2d_p = np.zeros((npairs, 2))
    g_conic_p = np.zeros((npairs, 3))
    g_opac_p = np.zeros(npairs)
    g_color_p = np.zeros((npairs, 3))
    g_depth_p = np.zeros(npairs)
    if npairs:
        _backward_kernel(
            frame.tile_ranges, frame.pair_gauss, proj.mean2d, proj.conic, frame.reach, frame.opacities, frame.colors,
            proj.depth, W, H, s.tile_size, frame.tiles_x, s.alpha_max, s.alpha_min, frame.last,
            np.ascontiguousarray(dl_dcolor, dtype=np.float64).reshape(H, W, 3),
            np.ascontiguousarray(dl_ddepth, dtype=np.float64).reshape(H, W),
            np.ascontiguousarray(dl_dalpha, dtype=np.float64).reshape(H, W),
            g_mean2d_p, g_conic_p, g_opac_p, g_color_p, g_depth_p,
        )
    # Deterministic reduction of per-pair partials.
    idx = frame.pair_gauss
    g_mean2d = _segment_sum(idx, g_mean2d_p, n)
    g_conic = _segment_sum(idx, g_conic_p, n)
    g_opac = _segment_sum(idx, g_opac_p, n)
    g_color = _segment_sum(idx, g_color_p, n)
    g_z = _segment_sum(idx, g_depth_p, n)

    grads = ParamGradients(
        means=np.zeros((n, 3)),
        quats=np.zeros((n, 4)),
        log_scales=np.zeros((n, 3)),
        opacity_logits=np.zeros(n),
        colors=g_color,
    )
    Rwc = pose.R
    g_Rwc = np.zeros((3, 3))
    g_t = np.zeros(3)
    vis = np.flatnonzero(proj.radius > 0)
    if len(vis):
        o = frame.opacities[vis]
        grads.opacity_logits[vis] = g_opac[vis] * o * (1.0 - o)

        x, y, z = proj.p_cam[vis].T
        fx, fy = cam.fx, cam.fy
        # conic gradient (a, b, c) -> symmetric trace-form matrix
        ga, gb, gc = g_conic[vis].T
        Gm = np.empty((len(vis), 2, 2))
        Gm[:, 0, 0] = ga
        Gm[:, 0, 1] = Gm[:, 1, 0] = 0.5 * gb
        Gm[:, 1, 1] = gc
        a, b, c = proj.conic[vis].T
        Mi = np.empty_like(Gm)
        Mi[:, 0, 0] = a
        Mi[:, 0, 1] = Mi[:, 1, 0] = b
        Mi[:, 1, 1] = c
        G2 = -Mi @ Gm @ Mi  # dL/dcov2d

        J = np.zeros((len(vis), 2, 3))
        J[:, 0, 0] = fx / z
        J[:, 0, 2] = -fx * x / z**2
        J[:, 1, 1] = fy / z
        J[:, 1, 2] = -fy * y / z**2
        Rs = quat_to_matrix(quat_normalize(cloud.quats[vis]))
        sc = np.exp(cloud.log_scales[vis])
        M = Rs * sc[:, None, :]
        Sw = M @ np.swapaxes(M, 1, 2)
        Sc = Rwc @ Sw @ Rwc.T
        Gc = np.swapaxes(J, 1, 2) @ G2 @ J  # dL/dSigma_cam
        GJ = 2.0 * G2 @ J @ Sc  # dL/dJ

        gx = g_mean2d[vis, 0] * fx / z - GJ[:, 0, 2] * fx / z**2
        gy = g_mean2d[vis, 1] * fy / z - GJ[:, 1, 2] * fy / z**2
        gz = (
            g_z[vis]
            - g_mean2d[vis, 0] * fx * x / z**2
            - g_mean2d[vis, 1] * fy * y / z**2
            - GJ[:, 0, 0] * fx / z**2
            + GJ[:, 0, 2] * 2 * fx * x / z**3
            - GJ[:, 1, 1] * fy / z**2
            + GJ[:, 1, 2] * 2 * fy * y / z**3
        )
        gp = np.stack([gx, gy, gz], axis=1)
        grads.means[vis] = gp @ Rwc

        Gw = Rwc.T @ Gc @ Rwc  # dL/dSigma_world
        GM = 2.0 * Gw @ M
        grads.log_scales[vis] = np.einsum("nik,nik->nk", GM, Rs) * sc
        GR = GM * sc[:, None, :]
        g_unit = quat_matrix_vjp(quat_normalize(cloud.quats[vis]), GR)
        grads.quats[vis] = normalized_quat_vjp(cloud.quats[vis], g_unit)

        if want_pose_grad:
            g_t = gp.sum(axis=0)
            means = cloud.means[vis]
            g_Rwc = gp.T @ means + 2.0 * np.tensordot(Gc @ Rwc, Sw, axes=([0, 2], [0, 1]))
    if want_pose_grad:
        grads.pose_R = g_Rwc
        grads.pose_t = g_t
        grads.pose_q = normalized_quat_vjp(pose.q, quat_matrix_vjp(pose.q, g_Rwc))
    return grads
