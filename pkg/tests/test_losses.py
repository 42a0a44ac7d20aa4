import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from oracles import numeric_derivative, rel_err
from splatslam.losses import (SSIM_K1, LossWeights, TrackingMaskError, color_loss, depth_l1, isotropic_reg,
                              joint_mapping_loss, ssim, tracking_loss)
from splatslam.scene import GaussianCloud


def test_depth_l1_examples():
    d = np.full((4, 4), 2.0)
    assert depth_l1(d, d)[0] == 0.0
    assert depth_l1(d + 0.5, d)[0] == pytest.approx(0.5)
    valid = np.zeros((4, 4), bool)
    valid[:2] = True
    assert depth_l1(d + 1.0, d, valid)[0] == pytest.approx(1.0)


def test_depth_l1_gradient_on_valid_set():
    rng = np.random.default_rng(0)
    r, t = rng.uniform(1, 2, (6, 5)), rng.uniform(1, 2, (6, 5))
    t[0] = 0.0
    _, g = depth_l1(r, t)
    assert not g[0].any()
    assert np.allclose(np.abs(g[1:]), 1 / 25)


def test_depth_l1_empty_valid_warns():
    with pytest.warns(RuntimeWarning):
        value, g = depth_l1(np.ones((3, 3)), np.zeros((3, 3)))
    assert value == 0.0 and not g.any()


def test_color_loss_identical_is_zero():
    img = np.random.default_rng(1).uniform(size=(20, 20, 3))
    assert color_loss(img, img)[0] == pytest.approx(0.0, abs=1e-12)


def test_color_loss_constant_images():
    # zero variances: SSIM = c1 / (1 + c1)
    value, _ = color_loss(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))
    c1 = SSIM_K1**2
    assert value == pytest.approx(0.8 + 0.2 * (1 - c1 / (1 + c1)), abs=1e-12)


def test_color_loss_shape_mismatch():
    with pytest.raises(ValueError):
        color_loss(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=(24, 20, 3)), rng.uniform(size=(24, 20, 3))
    ref = structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=-1)
    assert ssim(x, y) == pytest.approx(ref, abs=1e-10)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(4)
    x, y = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(x, y) - ssim(y, x)) < 1e-12


def _fd_check(f, x, grad, entries=25, seed=0, tol=1e-5):
    rng = np.random.default_rng(seed)
    scale = np.abs(grad).max()
    for k in rng.choice(x.size, entries, replace=False):
        pos = np.unravel_index(k, x.shape)
        x0 = x[pos]

        def g(v):
            x[pos] = v
            try:
                return f(x)
            finally:
                x[pos] = x0

        assert rel_err(grad[pos], numeric_derivative(g, x0), scale) < tol


def test_ssim_gradient_finite_differences():
    rng = np.random.default_rng(5)
    x, y = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    _, g = ssim(x, y, with_grad=True)
    _fd_check(lambda a: ssim(a, y), x, g)


def test_color_loss_gradient_finite_differences():
    rng = np.random.default_rng(6)
    x, y = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    _, g = color_loss(x, y)
    _fd_check(lambda a: color_loss(a, y)[0], x, g)


def test_isotropic_reg_examples():
    iso = GaussianCloud(means=np.zeros((3, 3)), log_scales=np.log([[0.1] * 3, [0.2] * 3, [0.5] * 3]))
    assert isotropic_reg(iso)[0] == pytest.approx(0.0, abs=1e-15)
    one = GaussianCloud(means=np.zeros((1, 3)), log_scales=np.log([[2.0, 1.0, 1.0]]))
    assert isotropic_reg(one)[0] == pytest.approx(4 / 3)
    many = GaussianCloud(means=np.zeros((7, 3)), log_scales=np.tile(np.log([[2.0, 1.0, 1.0]]), (7, 1)))
    assert isotropic_reg(many)[0] == pytest.approx(4 / 3)
    assert isotropic_reg(GaussianCloud())[0] == 0.0


@pytest.mark.parametrize("mode", ["per_gaussian", "submap"])
def test_isotropic_reg_gradient(mode):
    rng = np.random.default_rng(7)
    cloud = GaussianCloud(means=np.zeros((5, 3)), log_scales=rng.normal(-3, 0.5, (5, 3)))
    _, g = isotropic_reg(cloud, mode)

    def f(ls):
        return isotropic_reg(GaussianCloud(means=np.zeros((5, 3)), log_scales=ls), mode)[0]

    _fd_check(f, cloud.log_scales, g, entries=15)


def test_tracking_loss_examples():
    c, d = np.zeros((2, 2, 3)), np.ones((2, 2))
    ones = np.ones((2, 2))
    assert tracking_loss(c, d, c, d, ones, ones.astype(bool))[0] == 0.0
    with pytest.raises(TrackingMaskError):
        tracking_loss(c, d, c, d, ones, np.zeros((2, 2), bool))
    value, _, _ = tracking_loss(np.full((1, 1, 3), 0.1), np.full((1, 1), 1.2), np.zeros((1, 1, 3)),
                                np.ones((1, 1)), np.full((1, 1), 0.125), np.ones((1, 1), bool), 0.5)
    assert value == pytest.approx(0.01875, abs=1e-15)


def test_tracking_loss_gradient():
    rng = np.random.default_rng(8)
    c, tc = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
    d, td = rng.uniform(1, 2, (6, 6)), rng.uniform(1, 2, (6, 6))
    ma, mi = rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6)) > 0.3
    _, gc, gd = tracking_loss(c, d, tc, td, ma, mi, 0.4)
    _fd_check(lambda a: tracking_loss(a, d, tc, td, ma, mi, 0.4)[0], c, gc, entries=20)
    _fd_check(lambda a: tracking_loss(c, a, tc, td, ma, mi, 0.4)[0], d, gd, entries=20)


def test_joint_loss_is_weighted_sum():
    rng = np.random.default_rng(9)
    c, tc = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    d, td = rng.uniform(1, 2, (16, 16)), rng.uniform(1, 2, (16, 16))
    cloud = GaussianCloud(means=np.zeros((4, 3)), log_scales=rng.normal(-3, 0.5, (4, 3)))
    w = LossWeights(lambda_color=0.7, lambda_depth=1.3, lambda_reg=0.4)
    out = joint_mapping_loss(c, d, tc, td, cloud, w)
    lc, gc = color_loss(c, tc)
    ld, gd = depth_l1(d, td)
    lr, gr = isotropic_reg(cloud)
    assert out.total == pytest.approx(0.7 * lc + 1.3 * ld + 0.4 * lr, abs=1e-12)
    assert np.allclose(out.d_color, 0.7 * gc, atol=1e-12, rtol=0)
    assert np.allclose(out.d_depth, 1.3 * gd, atol=1e-12, rtol=0)
    assert np.allclose(out.d_log_scales, 0.4 * gr, atol=1e-12, rtol=0)


def test_joint_loss_perfect_input_is_zero():
    img = np.random.default_rng(10).uniform(size=(16, 16, 3))
    d = np.ones((16, 16))
    cloud = GaussianCloud(means=np.zeros((2, 3)), log_scales=np.full((2, 3), -3.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert joint_mapping_loss(img, d, img, d, cloud).total == pytest.approx(0.0, abs=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_color=-1)
    with pytest.raises(ValueError):
        LossWeights(lambda_ssim=1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_are_nonnegative(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    assert color_loss(x, y)[0] >= 0
    assert depth_l1(x[..., 0], y[..., 0] + 0.1)[0] >= 0
    cloud = GaussianCloud(means=np.zeros((3, 3)), log_scales=rng.normal(size=(3, 3)))
    assert isotropic_reg(cloud)[0] >= 0
