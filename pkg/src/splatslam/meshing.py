"""TSDF fusion on a block-sparse voxel grid and mesh extraction."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import measure

from .geometry import CameraIntrinsics, Pose

BLOCK = 8  # voxels per block side


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray  # (V, 3) in [0, 1]

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.faces)


class TSDFVolume:
    """Truncated signed distances sampled at grid points x = index * voxel_size.

    Memory is allocated in cubic blocks of BLOCK^3 voxels around observed
    surfaces. Each voxel keeps a running weighted average of its normalized
    distance and color.
    """

    def __init__(self, voxel_size: float = 0.01, truncation: float = 0.04):
        if not (voxel_size > 0 and truncation > 0):
            raise ValueError("voxel_size and truncation must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self._index: dict[tuple[int, int, int], int] = {}
        self._keys = np.zeros((0, 3), dtype=np.int64)
        self.tsdf = np.zeros((0, BLOCK, BLOCK, BLOCK))
        self.weight = np.zeros((0, BLOCK, BLOCK, BLOCK))
        self.color = np.zeros((0, BLOCK, BLOCK, BLOCK, 3))

    @property
    def block_count(self) -> int:
        return len(self._index)

    def _allocate(self, keys: np.ndarray) -> np.ndarray:
        """Slot of every block key, allocating missing blocks."""
        new = [tuple(k) for k in keys.tolist() if tuple(k) not in self._index]
        if new:
            start = len(self._index)
            for i, k in enumerate(new):
                self._index[k] = start + i
            m = len(new)
            self._keys = np.concatenate([self._keys, np.array(new, dtype=np.int64)])
            self.tsdf = np.concatenate([self.tsdf, np.ones((m, BLOCK, BLOCK, BLOCK))])
            self.weight = np.concatenate([self.weight, np.zeros((m, BLOCK, BLOCK, BLOCK))])
            self.color = np.concatenate([self.color, np.zeros((m, BLOCK, BLOCK, BLOCK, 3))])
        return np.array([self._index[tuple(k)] for k in keys.tolist()], dtype=np.int64)

    def _surface_blocks(self, points: np.ndarray) -> np.ndarray:
        span = self.voxel_size * BLOCK
        keys = []
        for dx in (-1, 1):
            for dy in (-1, 1):
                for dz in (-1, 1):
                    off = self.truncation * np.array([dx, dy, dz])
                    keys.append(np.floor((points + off) / span).astype(np.int64))
        keys.append(np.floor(points / span).astype(np.int64))
        return np.unique(np.concatenate(keys), axis=0)

    def integrate(self, depth: np.ndarray, color: np.ndarray, T_wc: Pose, cam: CameraIntrinsics) -> None:
        """Fuse one depth map (meters, 0 = invalid) and color image seen from world-to-camera pose T_wc."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = depth > 0
        if not valid.any():
            return
        pts = T_wc.inverse().apply(cam.backproject(depth)[valid])
        slots = self._allocate(self._surface_blocks(pts))

        local = np.stack(np.meshgrid(*(np.arange(BLOCK),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        grid = (self._keys[slots][:, None, :] * BLOCK + local[None]).reshape(-1, 3)
        p_cam = T_wc.apply(grid * self.voxel_size)
        z = p_cam[:, 2]
        safe_z = np.where(z > 0, z, 1.0)
        u = np.rint(cam.fx * p_cam[:, 0] / safe_z + cam.cx).astype(np.int64)
        v = np.rint(cam.fy * p_cam[:, 1] / safe_z + cam.cy).astype(np.int64)
        H, W = depth.shape
        ok = (z > 0) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        d = np.zeros_like(z)
        d[ok] = depth[v[ok], u[ok]]
        ok &= d > 0
        sdf = d - z
        ok &= sdf >= -self.truncation
        if not ok.any():
            return
        flat = np.flatnonzero(ok)
        slot = slots[flat // BLOCK**3]
        cell = flat % BLOCK**3
        ix, iy, iz = cell // (BLOCK * BLOCK), (cell // BLOCK) % BLOCK, cell % BLOCK
        value = np.clip(sdf[flat] / self.truncation, -1.0, 1.0)
        rgb = np.asarray(color, dtype=np.float64)[v[flat], u[flat]]
        w = self.weight[slot, ix, iy, iz]
        self.tsdf[slot, ix, iy, iz] = (w * self.tsdf[slot, ix, iy, iz] + value) / (w + 1)
        self.color[slot, ix, iy, iz] = (w[:, None] * self.color[slot, ix, iy, iz] + rgb) / (w + 1)[:, None]
        self.weight[slot, ix, iy, iz] = w + 1

    def set_dense(self, tsdf: np.ndarray, weight: np.ndarray | None = None, color: np.ndarray | None = None,
                  origin_index=(0, 0, 0)) -> None:
        """Overwrite voxels from dense arrays whose [0, 0, 0] entry sits at grid index `origin_index`."""
        tsdf = np.asarray(tsdf, dtype=np.float64)
        weight = np.ones_like(tsdf) if weight is None else np.asarray(weight, dtype=np.float64)
        color = np.zeros(tsdf.shape + (3,)) if color is None else np.asarray(color, dtype=np.float64)
        idx = np.stack(np.nonzero(np.ones(tsdf.shape, dtype=bool)), axis=-1) + np.asarray(origin_index)
        keys = np.floor_divide(idx, BLOCK)
        ukeys, inverse = np.unique(keys, axis=0, return_inverse=True)
        slots = self._allocate(ukeys)[inverse.reshape(-1)]
        lx, ly, lz = (idx - keys * BLOCK).T
        self.tsdf[slots, lx, ly, lz] = np.clip(tsdf.reshape(-1), -1, 1)
        self.weight[slots, lx, ly, lz] = weight.reshape(-1)
        self.color[slots, lx, ly, lz] = color.reshape(-1, 3)

    def dense(self):
        """(tsdf, weight, color, origin_index) over the bounding box of allocated blocks."""
        if not self._index:
            return np.ones((0, 0, 0)), np.zeros((0, 0, 0)), np.zeros((0, 0, 0, 3)), np.zeros(3, dtype=np.int64)
        lo = self._keys.min(axis=0)
        shape = tuple((self._keys.max(axis=0) - lo + 1) * BLOCK)
        tsdf = np.ones(shape)
        weight = np.zeros(shape)
        color = np.zeros(shape + (3,))
        for slot, key in enumerate(self._keys):
            a = (key - lo) * BLOCK
            sl = tuple(slice(a[i], a[i] + BLOCK) for i in range(3))
            tsdf[sl] = self.tsdf[slot]
            weight[sl] = self.weight[slot]
            color[sl] = self.color[slot]
        return tsdf, weight, color, lo * BLOCK

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space corners of the allocated region."""
        if not self._index:
            return np.zeros(3), np.zeros(3)
        lo = self._keys.min(axis=0) * BLOCK
        hi = (self._keys.max(axis=0) + 1) * BLOCK - 1
        return lo * self.voxel_size, hi * self.voxel_size


def extract_mesh(volume: TSDFVolume) -> TriangleMesh:
    """Marching cubes on the zero level set, restricted to cubes whose 8 corners are all observed."""
    tsdf, weight, color, origin = volume.dense()
    if tsdf.size == 0 or min(tsdf.shape) < 2:
        return TriangleMesh.empty()
    seen = weight > 0
    c = seen[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c &= seen[dx : dx + c.shape[0], dy : dy + c.shape[1], dz : dz + c.shape[2]]
    if not c.any():
        return TriangleMesh.empty()
    observed = tsdf[seen]
    if observed.min() >= 0 or observed.max() <= 0:
        return TriangleMesh.empty()
    verts, faces, _, _ = measure.marching_cubes(tsdf, level=0.0, method="lewiner")
    # every triangle lies inside one cube; keep those whose 8 corners were all observed
    cube = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
    cube = np.minimum(cube, np.array(c.shape) - 1)
    faces = faces[c[cube[:, 0], cube[:, 1], cube[:, 2]]]
    if len(faces) == 0:
        return TriangleMesh.empty()
    used, faces = np.unique(faces, return_inverse=True)
    faces = faces.reshape(-1, 3)
    verts = verts[used]
    rgb = np.stack([ndimage.map_coordinates(color[..., k], verts.T, order=1, mode="nearest") for k in range(3)],
                   axis=1)
    world = (verts + origin) * volume.voxel_size
    return TriangleMesh(world, faces.astype(np.int64), np.clip(rgb, 0.0, 1.0))


def write_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY with per-vertex RGB and triangle faces."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vdt = np.dtype([("p", "<f4", 3), ("c", "u1", 3)])
    vrec = np.empty(len(mesh.vertices), dtype=vdt)
    vrec["p"] = mesh.vertices
    vrec["c"] = np.rint(np.clip(mesh.colors, 0, 1) * 255).astype(np.uint8)
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    frec = np.empty(len(mesh.faces), dtype=fdt)
    frec["n"] = 3
    frec["i"] = mesh.faces
    with open(Path(path), "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vrec.tobytes())
        f.write(frec.tobytes())


def read_ply(path) -> TriangleMesh:
    """Reader for the files written by write_ply."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = int(next(line.split()[-1] for line in header if line.startswith("element vertex")))
    nf = int(next(line.split()[-1] for line in header if line.startswith("element face")))
    vdt = np.dtype([("p", "<f4", 3), ("c", "u1", 3)])
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    v = np.frombuffer(data, dtype=vdt, count=nv, offset=end)
    f = np.frombuffer(data, dtype=fdt, count=nf, offset=end + nv * vdt.itemsize)
    return TriangleMesh(v["p"].astype(np.float64), f["i"].astype(np.int64), v["c"] / 255.0)
