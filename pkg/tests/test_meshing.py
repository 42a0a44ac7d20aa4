import numpy as np
import pytest

from splatslam.geometry import CameraIntrinsics, Pose
from splatslam.meshing import TriangleMesh, TSDFVolume, extract_mesh, read_ply, write_ply

CAM = CameraIntrinsics(40.0, 40.0, 23.5, 23.5, 48, 48)


def sphere_volume(radius=0.5, voxel=0.01, trunc=0.04):
    vol = TSDFVolume(voxel, trunc)
    n = int(np.ceil((radius + 2 * trunc) / voxel))
    idx = np.arange(-n, n + 1)
    x, y, z = np.meshgrid(idx, idx, idx, indexing="ij")
    dist = np.sqrt(x**2 + y**2 + z**2) * voxel
    vol.set_dense((radius - dist) / trunc, origin_index=(-n, -n, -n))
    return vol


def edge_counts(faces):
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


def test_empty_depth_leaves_volume_unchanged():
    vol = TSDFVolume()
    vol.integrate(np.zeros((48, 48)), np.zeros((48, 48, 3)), Pose(), CAM)
    assert vol.block_count == 0
    assert len(extract_mesh(vol)) == 0


def test_plane_zero_crossing_near_depth():
    vol = TSDFVolume(0.01, 0.04)
    vol.integrate(np.ones((48, 48)), np.full((48, 48, 3), 0.3), Pose(), CAM)
    mesh = extract_mesh(vol)
    assert len(mesh) > 0
    assert np.all(np.abs(mesh.vertices[:, 2] - 1.0) <= 0.01)
    assert np.allclose(mesh.colors, 0.3, atol=1 / 255)


def test_integrating_twice_keeps_average():
    depth = np.full((48, 48), 1.0)
    depth[10:20, 10:20] = 1.1
    color = np.random.default_rng(0).uniform(size=(48, 48, 3))
    once, twice = TSDFVolume(), TSDFVolume()
    once.integrate(depth, color, Pose(), CAM)
    for _ in range(2):
        twice.integrate(depth, color, Pose(), CAM)
    assert np.allclose(once.tsdf, twice.tsdf, atol=1e-12)
    assert np.allclose(once.color, twice.color, atol=1e-12)
    assert np.array_equal(twice.weight, 2 * once.weight)


def test_volume_invariants_and_order_independence():
    rng = np.random.default_rng(1)
    frames = []
    for i in range(3):
        pose = Pose(t=[0.02 * i, -0.01 * i, 0.0])
        frames.append((rng.uniform(0.8, 1.2, (48, 48)), rng.uniform(size=(48, 48, 3)), pose))
    vols = []
    for order in ([0, 1, 2], [2, 0, 1]):
        vol = TSDFVolume()
        for k in order:
            vol.integrate(*frames[k], CAM)
        vols.append(vol.dense())
    a, b = vols
    assert np.abs(a[0]).max() <= 1 and a[1].min() >= 0
    assert np.array_equal(a[3], b[3])
    for x, y in zip(a[:3], b[:3]):
        assert np.allclose(x, y, atol=1e-6)


def test_all_positive_tsdf_gives_empty_mesh():
    vol = TSDFVolume()
    vol.set_dense(np.full((10, 10, 10), 0.5))
    assert len(extract_mesh(vol)) == 0


def test_sphere_radial_error_and_watertight():
    mesh = extract_mesh(sphere_volume())
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.5).mean() < 0.01
    assert np.all(edge_counts(mesh.faces) == 2)


def test_unobserved_cubes_are_skipped():
    vol = sphere_volume(0.1)
    tsdf, weight, color, origin = vol.dense()
    weight[tsdf.shape[0] // 2:] = 0
    vol.set_dense(tsdf, weight, color, origin)
    mesh = extract_mesh(vol)
    assert len(mesh) > 0 and mesh.vertices[:, 0].max() <= 0.0 + 1e-9


def test_vertices_within_bounds():
    vol = TSDFVolume()
    vol.integrate(np.full((48, 48), 0.7), np.zeros((48, 48, 3)), Pose(t=[0.1, 0, 0]), CAM)
    lo, hi = vol.bounds()
    mesh = extract_mesh(vol)
    assert len(mesh) > 0
    assert np.all(mesh.vertices >= lo - 1e-9) and np.all(mesh.vertices <= hi + 1e-9)


def test_ply_round_trip(tmp_path):
    mesh = extract_mesh(sphere_volume(0.1))
    path = tmp_path / "m.ply"
    write_ply(path, mesh)
    back = read_ply(path)
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.allclose(back.colors, mesh.colors, atol=0.5 / 255 + 1e-12)


def test_empty_ply_has_valid_header(tmp_path):
    path = tmp_path / "e.ply"
    write_ply(path, TriangleMesh.empty())
    text = path.read_bytes().decode("ascii")
    assert text.startswith("ply\nformat binary_little_endian 1.0\n") and text.endswith("end_header\n")
    assert "element vertex 0" in text and "element face 0" in text
    assert len(read_ply(path)) == 0


def test_rejects_bad_sizes():
    with pytest.raises(ValueError):
        TSDFVolume(0.0)
