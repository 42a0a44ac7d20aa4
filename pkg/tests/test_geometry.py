import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatslam.geometry import (CameraIntrinsics, Pose, axis_angle_quat, constant_velocity_init, matrix_to_quat,
                                quat_multiply, quat_normalize, quat_to_matrix)
from splatslam.scene import Gaussian3D, realize_covariance

finite = st.floats(-10, 10, allow_nan=False)
quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)


def test_identity_quaternion():
    assert np.array_equal(quat_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3))


def test_quarter_turn_about_z():
    R = quat_to_matrix(np.array([np.sqrt(0.5), 0, 0, np.sqrt(0.5)]))
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@given(quats)
def test_rotation_is_orthonormal(q):
    R = quat_to_matrix(quat_normalize(q))
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_quat_to_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        quat_to_matrix(np.array([np.nan, 0, 0, 1.0]))


@given(quats)
def test_matrix_to_quat_round_trip(q):
    q = quat_normalize(q)
    back = matrix_to_quat(quat_to_matrix(q))
    assert np.allclose(np.abs(back @ q), 1.0, atol=1e-9)


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(0)
    a, b = quat_normalize(rng.normal(size=4)), quat_normalize(rng.normal(size=4))
    assert np.allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


@given(quats, arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite))
def test_pose_round_trip(q, t, p):
    T = Pose(q, t)
    assert np.isclose(np.linalg.norm(T.q), 1.0, atol=1e-9)
    assert np.allclose(T.inverse().apply(T.apply(p)), p, atol=1e-9)


@settings(max_examples=50)
@given(quats, quats, quats)
def test_pose_composition_is_associative(q1, q2, q3):
    rng = np.random.default_rng(1)
    a, b, c = (Pose(q, rng.normal(size=3)) for q in (q1, q2, q3))
    left, right = (a @ b) @ c, a @ (b @ c)
    assert np.allclose(left.matrix(), right.matrix(), atol=1e-9)


def test_pose_rejects_bad_input():
    with pytest.raises(ValueError):
        Pose(np.zeros(4), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.array([1.0, 0, 0, 0]), np.array([np.inf, 0, 0]))


def test_pose_center():
    T = Pose(axis_angle_quat([0, 0, 1], 0.3), [1.0, 2.0, 3.0])
    assert np.allclose(T.apply(T.center()), 0, atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 0, 0, 10, 10, z_near=1.0, z_far=0.5)


def test_backproject_reprojects():
    cam = CameraIntrinsics(100, 90, 31.5, 20.0, 64, 48)
    depth = np.random.default_rng(0).uniform(0.5, 3, (48, 64))
    p = cam.backproject(depth)
    u = cam.fx * p[..., 0] / p[..., 2] + cam.cx
    v = cam.fy * p[..., 1] / p[..., 2] + cam.cy
    vv, uu = np.mgrid[0:48, 0:64]
    assert np.allclose(u, uu) and np.allclose(v, vv)


def test_covariance_identity():
    assert np.allclose(realize_covariance(Gaussian3D(np.zeros(3))), np.eye(3))


def test_covariance_axis_scaling():
    g = Gaussian3D(np.zeros(3), log_scales=np.array([np.log(2), 0, 0]))
    assert np.allclose(realize_covariance(g), np.diag([4.0, 1, 1]))


def test_covariance_rotated_scaling():
    # 90 degrees about z sends the x axis to y: R diag(4,1,1) R^T = diag(1,4,1)
    g = Gaussian3D(np.zeros(3), rotation=np.array([np.sqrt(0.5), 0, 0, np.sqrt(0.5)]),
                   log_scales=np.array([np.log(2), 0, 0]))
    assert np.allclose(realize_covariance(g), np.diag([1.0, 4, 1]), atol=1e-12)


@given(quats, arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_covariance_is_symmetric_psd(q, s):
    S = realize_covariance(Gaussian3D(np.zeros(3), rotation=q, log_scales=s))
    assert np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max()))
    assert np.linalg.eigvalsh(S).min() >= -1e-9 * np.abs(S).max()


def test_covariance_axis_permutation_invariance():
    # swapping x/y scales together with a quarter turn about z gives the same covariance
    s = np.log([3.0, 0.5, 1.2])
    a = realize_covariance(Gaussian3D(np.zeros(3), log_scales=s))
    b = realize_covariance(Gaussian3D(np.zeros(3), rotation=axis_angle_quat([0, 0, 1], np.pi / 2),
                                      log_scales=s[[1, 0, 2]]))
    assert np.allclose(a, b, atol=1e-12)


def test_constant_velocity_static():
    T = Pose(axis_angle_quat([1, 0, 0], 0.4), [0.1, 0.2, 0.3])
    out = constant_velocity_init([T, T])
    assert np.allclose(out.q, T.q) and np.allclose(out.t, T.t)


def test_constant_velocity_linear_translation():
    out = constant_velocity_init([Pose(t=[0, 0, 1.0]), Pose(t=[0, 0, 2.0])])
    assert np.allclose(out.t, [0, 0, 3.0])
    assert np.allclose(out.q, [1, 0, 0, 0])


def test_constant_velocity_hemisphere_fix():
    q = quat_normalize(np.array([0.9, 0.1, -0.2, 0.3]))
    out = constant_velocity_init([Pose(-q), Pose(q)])
    assert np.allclose(out.q, q, atol=1e-12)


def test_constant_velocity_short_history():
    assert np.allclose(constant_velocity_init([]).matrix(), np.eye(4))
    T = Pose(t=[1.0, 2, 3])
    assert constant_velocity_init([T]) is T


@given(quats, st.floats(-1.5, 1.5))
def test_constant_velocity_returns_unit_quaternion(q, angle):
    # history quaternions less than 90 degrees apart
    q0 = quat_normalize(q)
    q1 = quat_multiply(axis_angle_quat([0.3, -0.2, 0.9], angle), q0)
    out = constant_velocity_init([Pose(q0), Pose(q1)])
    assert np.isclose(np.linalg.norm(out.q), 1.0, atol=1e-9)
