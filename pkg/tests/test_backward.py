import numpy as np
import pytest

from oracles import numeric_derivative, random_scene, rel_err
from splatslam.geometry import CameraIntrinsics, Pose, normalized_quat_vjp
from splatslam.render import backward, render
from splatslam.scene import PARAM_NAMES, GaussianCloud


def weighted_sum_loss(rng, cam):
    """A smooth scalar loss: fixed random weights on color, depth and alpha."""
    wc = rng.normal(size=(cam.height, cam.width, 3))
    wd = rng.normal(size=(cam.height, cam.width))
    wa = rng.normal(size=(cam.height, cam.width))

    def loss(cloud, pose):
        out = render(cloud, pose, cam)
        return float((wc * out.color).sum() + (wd * out.depth).sum() + (wa * out.alpha).sum())

    return loss, wc, wd, wa


def check_cloud_gradients(loss, grads, cloud, pose, rng, per_param=6, tol=1e-4):
    scale = max(np.abs(g).max() for g in grads.as_dict().values())
    worst = 0.0
    for name in PARAM_NAMES:
        arr = getattr(cloud, name)
        analytic = grads.as_dict()[name]
        if name == "quats":
            # only the tangent component of a quaternion gradient is observable
            analytic = normalized_quat_vjp(cloud.quats, analytic)
        flat_idx = rng.choice(arr.size, size=min(per_param, arr.size), replace=False)
        for k in flat_idx:
            pos = np.unravel_index(k, arr.shape)
            x0 = arr[pos]

            def f(x):
                arr[pos] = x
                try:
                    return loss(cloud, pose)
                finally:
                    arr[pos] = x0

            n = numeric_derivative(f, x0)
            worst = max(worst, float(rel_err(analytic[pos], n, scale)))
    assert worst < tol, worst


@pytest.mark.parametrize("seed", range(4))
def test_parameter_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cloud, pose, cam = random_scene(rng, 10)
    loss, wc, wd, wa = weighted_sum_loss(rng, cam)
    out = render(cloud, pose, cam)
    grads = backward(out, wc, wd, wa, cloud, pose, cam)
    check_cloud_gradients(loss, grads, cloud, pose, rng)


@pytest.mark.parametrize("seed", range(3))
def test_pose_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    cloud, pose, cam = random_scene(rng, 10)
    loss, wc, wd, wa = weighted_sum_loss(rng, cam)
    g = backward(render(cloud, pose, cam), wc, wd, wa, cloud, pose, cam, want_pose_grad=True)
    scale = max(np.abs(g.pose_q).max(), np.abs(g.pose_t).max())
    for k in range(3):
        def f(x, k=k):
            t = pose.t.copy()
            t[k] = x
            return loss(cloud, Pose(pose.q, t))

        assert rel_err(g.pose_t[k], numeric_derivative(f, pose.t[k]), scale) < 1e-4
    tangent = normalized_quat_vjp(pose.q, g.pose_q)
    for k in range(4):
        def f(x, k=k):
            q = pose.q.copy()
            q[k] = x
            return loss(cloud, Pose(q / np.linalg.norm(q), pose.t))

        assert rel_err(tangent[k], numeric_derivative(f, pose.q[k]), scale) < 1e-4


def test_raw_quaternion_gradient_is_tangent():
    rng = np.random.default_rng(5)
    cloud, pose, cam = random_scene(rng, 8)
    _, wc, wd, wa = weighted_sum_loss(rng, cam)
    g = backward(render(cloud, pose, cam), wc, wd, wa, cloud, pose, cam, want_pose_grad=True)
    q = cloud.quats / np.linalg.norm(cloud.quats, axis=1, keepdims=True)
    assert np.allclose((g.quats * q).sum(axis=1), 0, atol=1e-9)
    assert abs(g.pose_q @ pose.q) < 1e-9


def test_linearity():
    rng = np.random.default_rng(7)
    cloud, pose, cam = random_scene(rng, 10)
    out = render(cloud, pose, cam)
    maps1 = [rng.normal(size=s) for s in [(32, 32, 3), (32, 32), (32, 32)]]
    maps2 = [rng.normal(size=s) for s in [(32, 32, 3), (32, 32), (32, 32)]]
    a, b = 0.7, -1.3
    g1 = backward(out, *maps1, cloud, pose, cam, want_pose_grad=True)
    g2 = backward(out, *maps2, cloud, pose, cam, want_pose_grad=True)
    g12 = backward(out, *[a * m1 + b * m2 for m1, m2 in zip(maps1, maps2)], cloud, pose, cam, want_pose_grad=True)
    for name in PARAM_NAMES:
        combo = a * g1.as_dict()[name] + b * g2.as_dict()[name]
        assert np.allclose(g12.as_dict()[name], combo, atol=1e-10, rtol=1e-10)
    assert np.allclose(g12.pose_t, a * g1.pose_t + b * g2.pose_t, atol=1e-10, rtol=1e-10)


def test_non_contributing_gaussians_get_zero_gradient():
    rng = np.random.default_rng(2)
    cloud, pose, cam = random_scene(rng, 6)
    # one behind the camera, one far outside the frustum
    hidden = GaussianCloud(means=pose.inverse().apply([[0, 0, -5.0], [50.0, 0, 3.0]]),
                           log_scales=np.full((2, 3), np.log(0.05)))
    cloud.append(hidden)
    out = render(cloud, pose, cam)
    g = backward(out, *[rng.normal(size=s) for s in [(32, 32, 3), (32, 32), (32, 32)]], cloud, pose, cam)
    for name in PARAM_NAMES:
        assert not g.as_dict()[name][-2:].any()


def test_single_contributor_depth_alpha_derivative():
    # one Gaussian covering a pixel: dD/dalpha = mu_z (no successors, T = 1)
    cam = CameraIntrinsics(100.0, 100.0, 16.0, 16.0, 32, 32)
    z = 2.5
    cloud = GaussianCloud(means=[[0, 0, z]], log_scales=[[np.log(0.05)] * 3], opacity_logits=[0.3])
    out = render(cloud, Pose(), cam)
    dl_dd = np.zeros((32, 32))
    dl_dd[16, 16] = 1.0
    g = backward(out, np.zeros((32, 32, 3)), dl_dd, np.zeros((32, 32)), cloud, Pose(), cam)
    o = cloud.opacities[0]
    # pixel-centered, so alpha = o and dD/dlogit = mu_z * o (1 - o)
    assert g.opacity_logits[0] == pytest.approx(z * o * (1 - o), rel=1e-12)


def test_opaque_front_color_derivative():
    cam = CameraIntrinsics(100.0, 100.0, 16.0, 16.0, 32, 32)
    cloud = GaussianCloud(means=[[0, 0, 1.0], [0, 0, 2.0]], log_scales=np.full((2, 3), np.log(0.01)),
                          opacity_logits=[np.inf, 0.0])
    from splatslam.render import RenderSettings

    s = RenderSettings(alpha_max=1.0)
    out = render(cloud, Pose(), cam, s)
    dc = np.zeros((32, 32, 3))
    dc[16, 16] = 1.0
    g = backward(out, dc, np.zeros((32, 32)), np.zeros((32, 32)), cloud, Pose(), cam)
    assert np.allclose(g.colors[0], 1.0) and not g.colors[1].any()


def test_backward_requires_records():
    from splatslam.render import RenderedFrame

    cam = CameraIntrinsics(10, 10, 4, 4, 8, 8)
    frame = RenderedFrame(np.zeros((8, 8, 3)), np.zeros((8, 8)), np.zeros((8, 8)), np.ones((8, 8)))
    with pytest.raises(ValueError):
        backward(frame, np.zeros((8, 8, 3)), np.zeros((8, 8)), np.zeros((8, 8)), GaussianCloud(), Pose(), cam)
