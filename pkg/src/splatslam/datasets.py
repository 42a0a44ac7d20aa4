"""RGBD sequence loaders and the synthetic scene generator."""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose, matrix_to_quat
from .render import DEFAULT_SETTINGS, RenderSettings, render
from .scene import GaussianCloud, SubMap, logit

log = logging.getLogger(__name__)


@dataclass
class RGBDFrame:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    timestamp: float = 0.0
    gt_pose: Optional[Pose] = None  # world-to-camera

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.color.ndim != 3 or self.color.shape[2] != 3 or self.color.shape[:2] != self.depth.shape:
            raise ValueError(f"color {self.color.shape} and depth {self.depth.shape} do not match")
        if not np.all(np.isfinite(self.color)):
            raise ValueError("color has non-finite values")
        bad = ~np.isfinite(self.depth) | (self.depth < 0)
        if bad.any():
            self.depth = np.where(bad, 0.0, self.depth)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


class RGBDSequence(Sequence):
    """Indexable frame sequence; frames are decoded on access when built from a loader."""

    def __init__(self, items: list, load: Optional[Callable[[object], RGBDFrame]] = None,
                 intrinsics: Optional[CameraIntrinsics] = None, skipped: int = 0):
        self._items = list(items)
        self._load = load
        self.intrinsics = intrinsics
        self.skipped = skipped

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return RGBDSequence(self._items[i], self._load, self.intrinsics, self.skipped)
        item = self._items[i]
        return self._load(item) if self._load else item

    def gt_poses(self) -> list[Optional[Pose]]:
        """Ground-truth poses without decoding images."""
        if self._load:
            return [item[-1] for item in self._items]
        return [f.gt_pose for f in self._items]

    def timestamps(self) -> list[float]:
        if self._load:
            return [item[0] for item in self._items]
        return [f.timestamp for f in self._items]


# ---------------------------------------------------------------- TUM layout

def read_index(path: Path) -> list[tuple[float, list[str]]]:
    """Rows of a TUM-style text index: (timestamp, remaining fields)."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.replace(",", " ").split()
        rows.append((float(fields[0]), fields[1:]))
    return rows


def associate(ts_a: np.ndarray, ts_b: np.ndarray, tolerance: float) -> list[tuple[int, int]]:
    """Mutual-nearest timestamp matches within `tolerance`.

    A pair (i, j) is kept only when b[j] is the closest entry to a[i] and a[i]
    the closest entry to b[j], so the result does not depend on which index
    drives the matching.
    """
    ts_a = np.asarray(ts_a, dtype=np.float64)
    ts_b = np.asarray(ts_b, dtype=np.float64)
    if len(ts_a) == 0 or len(ts_b) == 0:
        return []
    nearest_b = _nearest(ts_b, ts_a)
    nearest_a = _nearest(ts_a, ts_b)
    pairs = []
    for i, j in enumerate(nearest_b):
        if nearest_a[j] == i and abs(ts_a[i] - ts_b[j]) <= tolerance:
            pairs.append((i, int(j)))
    return pairs


def _nearest(ref: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Index into `ref` of the closest value for each query (ties go to the earlier entry)."""
    order = np.argsort(ref, kind="stable")
    s = ref[order]
    pos = np.clip(np.searchsorted(s, query), 1, len(s) - 1) if len(s) > 1 else np.zeros(len(query), int)
    if len(s) == 1:
        return order[pos]
    left = s[pos - 1]
    right = s[pos]
    pick_left = np.abs(query - left) <= np.abs(right - query)
    return order[np.where(pick_left, pos - 1, pos)]


def pose_from_tum(fields) -> Pose:
    """World-to-camera pose from a TUM line `tx ty tz qx qy qz qw` (camera-to-world)."""
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in fields[:7])
    c2w = Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
    return c2w.inverse()


def pose_to_tum(pose: Pose) -> list[float]:
    """Inverse of pose_from_tum: camera-to-world `tx ty tz qx qy qz qw`."""
    c2w = pose.inverse()
    w, x, y, z = c2w.q
    return [*c2w.t, x, y, z, w]


def read_color(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_depth(path, depth_scale: float) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    if raw.ndim == 3:
        raw = raw[..., 0]
    return raw / depth_scale


def _subsample(frame: RGBDFrame, step: int) -> RGBDFrame:
    if step <= 1:
        return frame
    return replace(frame, color=frame.color[::step, ::step], depth=frame.depth[::step, ::step])


def subsampled_intrinsics(cam: CameraIntrinsics, step: int) -> CameraIntrinsics:
    """Intrinsics matching `image[::step, ::step]`."""
    if step <= 1:
        return cam
    return CameraIntrinsics(
        cam.fx / step, cam.fy / step, cam.cx / step, cam.cy / step,
        -(-cam.width // step), -(-cam.height // step), cam.z_near, cam.z_far,
    )


def _trim(n: int, stride: int, max_frames: int) -> slice:
    stop = None if max_frames < 0 else max_frames * max(stride, 1)
    return slice(0, stop, max(stride, 1)) if n else slice(0, 0)


def load_tum_sequence(root, association_tolerance: float = 0.02, depth_scale: float = 5000.0,
                      downscale: int = 1, stride: int = 1, max_frames: int = -1,
                      intrinsics: Optional[CameraIntrinsics] = None) -> RGBDSequence:
    """Associated color/depth/ground-truth frames of a TUM-RGBD sequence directory."""
    root = Path(root)
    for name in ("rgb.txt", "depth.txt"):
        if not (root / name).is_file():
            raise FileNotFoundError(f"{root / name} is missing")
    rgb = read_index(root / "rgb.txt")
    depth = read_index(root / "depth.txt")
    pairs = associate([r[0] for r in rgb], [d[0] for d in depth], association_tolerance)
    skipped = len(rgb) - len(pairs)

    gt = []
    if (root / "groundtruth.txt").is_file():
        gt = read_index(root / "groundtruth.txt")
    gt_ts = np.array([g[0] for g in gt])

    items = []
    for i, j in pairs:
        ts = rgb[i][0]
        pose = None
        if len(gt):
            k = int(_nearest(gt_ts, np.array([ts]))[0])
            if abs(gt_ts[k] - ts) <= association_tolerance:
                pose = pose_from_tum(gt[k][1])
        items.append((ts, root / rgb[i][1][0], root / depth[j][1][0], pose))
    if skipped:
        log.info("%s: %d color frames without a depth match were skipped", root, skipped)

    def load(item) -> RGBDFrame:
        ts, cpath, dpath, pose = item
        frame = RGBDFrame(read_color(cpath), read_depth(dpath, depth_scale), ts, pose)
        return _subsample(frame, downscale)

    cam = subsampled_intrinsics(intrinsics, downscale) if intrinsics else None
    return RGBDSequence(items[_trim(len(items), stride, max_frames)], load, cam, skipped)


# ------------------------------------------------------------ generic layout

def _read_poses(path: Path) -> list[Pose]:
    """Camera-to-world poses, one per line: 16 values (row-major 4x4) or 7 (tx ty tz qx qy qz qw)."""
    poses = []
    for line in path.read_text().splitlines():
        fields = line.replace(",", " ").split()
        if not fields or fields[0].startswith("#"):
            continue
        vals = [float(v) for v in fields]
        if len(vals) == 16:
            M = np.array(vals).reshape(4, 4)
            poses.append(Pose(matrix_to_quat(M[:3, :3]), M[:3, 3]).inverse())
        elif len(vals) in (7, 8):
            poses.append(pose_from_tum(vals[-7:]))
        else:
            raise ValueError(f"{path}: cannot parse pose line with {len(vals)} values")
    return poses


def load_generic_sequence(root, depth_scale: float = 6553.5, downscale: int = 1, stride: int = 1,
                          max_frames: int = -1, intrinsics: Optional[CameraIntrinsics] = None,
                          fps: float = 30.0) -> RGBDSequence:
    """Numbered pairs `color/*.png|jpg` and `depth/*.png`, optional `poses.txt`."""
    root = Path(root)
    colors = sorted(p for p in (root / "color").glob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    depths = sorted((root / "depth").glob("*.png"))
    if not colors or len(colors) != len(depths):
        raise FileNotFoundError(f"{root}: expected matching color/ and depth/ image lists")
    poses: list[Optional[Pose]] = [None] * len(colors)
    if (root / "poses.txt").is_file():
        read = _read_poses(root / "poses.txt")
        if len(read) != len(colors):
            raise ValueError(f"{root}/poses.txt has {len(read)} poses for {len(colors)} frames")
        poses = read
    items = [(i / fps, c, d, p) for i, (c, d, p) in enumerate(zip(colors, depths, poses))]

    def load(item) -> RGBDFrame:
        ts, cpath, dpath, pose = item
        return _subsample(RGBDFrame(read_color(cpath), read_depth(dpath, depth_scale), ts, pose), downscale)

    cam = subsampled_intrinsics(intrinsics, downscale) if intrinsics else None
    return RGBDSequence(items[_trim(len(items), stride, max_frames)], load, cam)


# ----------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSceneSpec:
    gaussian_count: int = 500
    extent: float = 1.0  # side of the cube holding the Gaussian centers, meters
    trajectory: str = "orbit"  # orbit | line
    frames: int = 50
    width: int = 128
    height: int = 128
    fov_degrees: float = 60.0
    orbit_radius: float = 2.0
    orbit_degrees: float = 120.0
    orbit_bob: float = 0.3  # amplitude of the vertical oscillation, as a fraction of extent
    scale_range: tuple[float, float] = (0.03, 0.12)
    opacity: float = 0.95
    depth_noise: float = 0.0  # std of additive Gaussian depth noise, meters
    clutter_fraction: float = 0.0  # share of each frame covered by random flat patches
    clutter_clean_every: int = 0  # frames with index % n == 0 stay clutter-free; 0 clutters all
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_count <= 0 or self.frames < 0:
            raise ValueError("gaussian_count must be > 0 and frames >= 0")
        if self.trajectory not in ("orbit", "line"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if not 0 <= self.clutter_fraction < 1:
            raise ValueError("clutter_fraction must lie in [0, 1)")
        if self.clutter_clean_every < 0:
            raise ValueError("clutter_clean_every must be >= 0")

    def intrinsics(self) -> CameraIntrinsics:
        f = 0.5 * self.width / np.tan(np.radians(self.fov_degrees) / 2)
        return CameraIntrinsics(f, f, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera (x right, y down, z forward) at `center` facing `target`."""
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_cw = np.stack([x, y, z], axis=1)
    R = R_cw.T
    return Pose(matrix_to_quat(R), -R @ center)


def synthetic_trajectory(spec: SyntheticSceneSpec) -> list[Pose]:
    n = spec.frames
    if n == 0:
        return []
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    poses = []
    for k in s:
        if spec.trajectory == "orbit":
            phi = np.radians(spec.orbit_degrees) * k
            center = np.array([spec.orbit_radius * np.cos(phi), spec.orbit_radius * np.sin(phi),
                               spec.orbit_bob * spec.extent * np.sin(2 * np.pi * k)])
            poses.append(look_at(center, np.zeros(3)))
        else:
            center = np.array([(k - 0.5) * spec.extent, -spec.orbit_radius, 0.1 * spec.extent])
            poses.append(look_at(center, center + np.array([0.0, 1.0, -0.05])))
    return poses


def synthetic_cloud(spec: SyntheticSceneSpec) -> GaussianCloud:
    rng = np.random.default_rng(spec.seed)
    n = spec.gaussian_count
    means = rng.uniform(-spec.extent / 2, spec.extent / 2, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    lo, hi = spec.scale_range
    log_scales = rng.uniform(np.log(lo), np.log(hi), size=(n, 3))
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    opac = np.full(n, logit(spec.opacity))
    cloud = GaussianCloud(means, quats, log_scales, opac, colors)
    # float32-representable, so a saved ground-truth map reloads bit-exactly
    return GaussianCloud.from_packed(cloud.packed().astype(np.float32))


def _add_clutter(frame: RGBDFrame, fraction: float, rng: np.random.Generator) -> None:
    """Paint flat random-colored rectangles at random depths until `fraction` of pixels are covered."""
    H, W = frame.depth.shape
    covered = np.zeros((H, W), dtype=bool)
    while covered.mean() < fraction:
        h = int(rng.integers(H // 8, H // 3 + 1))
        w = int(rng.integers(W // 8, W // 3 + 1))
        v0 = int(rng.integers(0, H - h + 1))
        u0 = int(rng.integers(0, W - w + 1))
        box = (slice(v0, v0 + h), slice(u0, u0 + w))
        frame.color[box] = rng.uniform(0, 1, size=3)
        frame.depth[box] = rng.uniform(0.8, 3.0)
        covered[box] = True


def generate_synthetic(spec: SyntheticSceneSpec, settings: RenderSettings = DEFAULT_SETTINGS):
    """Ground-truth sub-map and the frames rendered from it along the trajectory."""
    cam = spec.intrinsics()
    cloud = synthetic_cloud(spec)
    poses = synthetic_trajectory(spec)
    truth = SubMap(cloud, poses[0] if poses else Pose.identity())
    noise_rng = np.random.default_rng([spec.seed, 1])
    frames = []
    for i, pose in enumerate(poses):
        out = render(cloud, pose, cam, settings)
        depth = np.where(out.alpha > 0.5, out.depth, 0.0)
        frame = RGBDFrame(np.clip(out.color, 0.0, 1.0), depth, i / 30.0, pose)
        if spec.depth_noise > 0:
            valid = frame.depth > 0
            frame.depth[valid] = np.maximum(
                frame.depth[valid] + noise_rng.normal(0, spec.depth_noise, valid.sum()), 1e-3)
        n = spec.clutter_clean_every
        if spec.clutter_fraction > 0 and not (n and i % n == 0):
            _add_clutter(frame, spec.clutter_fraction, noise_rng)
        frames.append(frame)
    return truth, RGBDSequence(frames, intrinsics=cam)
