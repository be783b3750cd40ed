"""Image and progress losses, their gradients, and the Adam optimizer."""

import numpy as np
import pytest

from gsdistill.adam import Adam
from gsdistill.losses import (
    LAMBDA_SSIM,
    loss_alpha_full,
    loss_alpha_masked,
    loss_alpha_per_gaussian,
    loss_rgb,
    loss_rgb_backward,
    ssim,
    ssim_backward,
)
from gsdistill.scene import init_scene, logit, sigmoid

RNG = np.random.default_rng(60)


def brute_force_ssim(pred, gt):
    """Independent SSIM oracle: explicit zero-padded windowed loops."""
    from gsdistill.losses import SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW

    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k1 = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    h, w, c = pred.shape
    half = SSIM_WINDOW // 2
    total = 0.0
    for ch in range(c):
        p = np.pad(pred[..., ch], half)
        g = np.pad(gt[..., ch], half)
        for i in range(h):
            for j in range(w):
                wp = p[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW]
                wg = g[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW]
                mx = (k2 * wp).sum()
                my = (k2 * wg).sum()
                vx = (k2 * wp * wp).sum() - mx * mx
                vy = (k2 * wg * wg).sum() - my * my
                cv = (k2 * wp * wg).sum() - mx * my
                total += ((2 * mx * my + SSIM_C1) * (2 * cv + SSIM_C2)) / (
                    (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
                )
    return total / (h * w * c)


class TestSsim:
    def test_identical_images(self):
        img = RNG.uniform(0.2, 0.8, (12, 12, 3))
        val, _ = ssim(img, img)
        # zero padding depresses border statistics, but interior windows
        # are exactly 1; the mean stays close to 1
        assert val > 0.85

    def test_matches_brute_force_oracle(self):
        pred = RNG.uniform(0, 1, (8, 8, 3))
        gt = np.clip(pred + RNG.normal(0, 0.1, pred.shape), 0, 1)
        fast, _ = ssim(pred, gt)
        slow = brute_force_ssim(pred, gt)
        assert fast == pytest.approx(slow, abs=1e-10)

    def test_backward_matches_fd(self):
        pred = RNG.uniform(0.2, 0.8, (10, 10, 3))
        gt = RNG.uniform(0.2, 0.8, (10, 10, 3))
        _, tape = ssim(pred, gt)
        grad = ssim_backward(tape)
        h = 1e-6
        for _ in range(20):
            i, j = RNG.integers(0, 10, 2)
            c = RNG.integers(0, 3)
            pp = pred.copy()
            pm = pred.copy()
            pp[i, j, c] += h
            pm[i, j, c] -= h
            fd = (ssim(pp, gt)[0] - ssim(pm, gt)[0]) / (2 * h)
            assert grad[i, j, c] == pytest.approx(fd, abs=1e-6)


class TestLossRgb:
    def test_identical_is_zero(self):
        img = RNG.uniform(0.2, 0.8, (16, 16, 3))
        val, _ = loss_rgb(img, img)
        assert val == pytest.approx(0.0, abs=1e-6)

    def test_constant_offset_l1_term(self):
        gt = np.full((16, 16, 3), 0.4)
        pred = gt + 0.1
        val, _ = loss_rgb(pred, gt)
        # SSIM of a constant-offset pair: compute via the oracle
        s = brute_force_ssim(pred, gt)
        expected = (1 - LAMBDA_SSIM) * 0.1 + LAMBDA_SSIM * (1 - s)
        assert val == pytest.approx(expected, rel=1e-6)

    def test_l1_swap_symmetric(self):
        a = RNG.uniform(0, 1, (8, 8, 3))
        b = RNG.uniform(0, 1, (8, 8, 3))
        la = np.abs(a - b).mean()
        lb = np.abs(b - a).mean()
        assert la == lb

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            loss_rgb(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))

    def test_backward_matches_fd(self):
        pred = RNG.uniform(0.2, 0.8, (10, 10, 3))
        gt = RNG.uniform(0.2, 0.8, (10, 10, 3))
        _, tape = loss_rgb(pred, gt)
        grad = loss_rgb_backward(tape)
        h = 1e-6
        for _ in range(15):
            i, j = RNG.integers(0, 10, 2)
            c = RNG.integers(0, 3)
            pp = pred.copy()
            pm = pred.copy()
            pp[i, j, c] += h
            pm[i, j, c] -= h
            fd = (loss_rgb(pp, gt)[0] - loss_rgb(pm, gt)[0]) / (2 * h)
            assert grad[i, j, c] == pytest.approx(fd, abs=1e-5)


class TestAlphaLosses:
    def test_masked_zero_when_equal(self):
        m = (RNG.uniform(0, 1, (8, 8)) > 0.5).astype(float)
        val, _ = loss_alpha_masked(m, m)
        assert val == 0.0

    def test_masked_all_wrong(self):
        val, _ = loss_alpha_masked(np.zeros((8, 8)), np.ones((8, 8)))
        assert val == 1.0

    def test_masked_half(self):
        mask = np.zeros((8, 8))
        mask[:, :4] = 1.0
        val, _ = loss_alpha_masked(np.full((8, 8), 0.5), mask)
        assert val == pytest.approx(0.25)

    def test_full(self):
        assert loss_alpha_full(np.ones((4, 4)))[0] == 0.0
        assert loss_alpha_full(np.zeros((4, 4)))[0] == 1.0
        assert loss_alpha_full(np.full((4, 4), 0.9))[0] == pytest.approx(0.01)

    def test_per_gaussian_inside_perfect(self):
        s = init_scene(RNG.normal(0, 0.5, (10, 3)), light_res=8)
        s.gaussians.alpha[:] = 40.0  # activated ~1
        s.alpha_active = True
        val, _ = loss_alpha_per_gaussian(s, (np.zeros(3), 10.0))
        assert val == pytest.approx(0.0, abs=1e-9)

    def test_per_gaussian_outside_contribution(self):
        s = init_scene(np.array([[0.0, 0, 0], [5.0, 0, 0]]), light_res=8)
        s.gaussians.alpha[:] = logit(np.array([1.0 - 1e-12, 0.5]))
        val, _ = loss_alpha_per_gaussian(s, (np.zeros(3), 1.0))
        assert val == pytest.approx(0.25, abs=1e-6)

    def test_per_gaussian_mixed_matches_closed_form(self):
        s = init_scene(RNG.normal(0, 2.0, (10, 3)), light_res=8)
        s.gaussians.alpha[:] = logit(RNG.uniform(0.1, 0.9, 10))
        sphere = (np.zeros(3), 1.5)
        inside = np.linalg.norm(s.gaussians.pos, axis=1) <= 1.5
        a = sigmoid(s.gaussians.alpha)
        expected = np.abs(1 - a[inside]).sum() + (a[~inside] ** 2).sum()
        val, _ = loss_alpha_per_gaussian(s, sphere)
        assert val == pytest.approx(expected, rel=1e-12)

    def test_per_gaussian_grad_fd(self):
        s = init_scene(RNG.normal(0, 2.0, (10, 3)), light_res=8)
        s.gaussians.alpha[:] = logit(RNG.uniform(0.1, 0.9, 10))
        sphere = (np.zeros(3), 1.5)
        _, grad = loss_alpha_per_gaussian(s, sphere)
        h = 1e-6
        for i in range(10):
            s.gaussians.alpha[i] += h
            lp, _ = loss_alpha_per_gaussian(s, sphere)
            s.gaussians.alpha[i] -= 2 * h
            lm, _ = loss_alpha_per_gaussian(s, sphere)
            s.gaussians.alpha[i] += h
            assert grad[i] == pytest.approx((lp - lm) / (2 * h), abs=1e-6)


class TestAdam:
    def test_converges_on_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])
        x = np.zeros(3)
        opt = Adam({"x": x}, {"x": 0.05})
        for _ in range(2000):
            opt.step({"x": 2 * (x - target)})
        assert np.abs(x - target).max() < 1e-3

    def test_bias_correction_first_step(self):
        x = np.array([0.0])
        opt = Adam({"x": x}, {"x": 0.1})
        opt.step({"x": np.array([3.0])})
        # first Adam step is -lr * g/|g| regardless of magnitude
        assert x[0] == pytest.approx(-0.1, rel=1e-6)

    def test_frozen_groups_not_updated(self):
        x = np.zeros(3)
        y = np.ones(3)
        opt = Adam({"x": x}, {"x": 0.1})
        opt.step({"x": np.ones(3)})
        assert np.all(y == 1.0)

    def test_select_after_prune(self):
        x = RNG.normal(size=(5, 2))
        opt = Adam({"x": x}, {"x": 0.1})
        opt.step({"x": np.ones((5, 2))})
        keep = np.array([True, False, True, True, False])
        opt.select(keep)
        x2 = x[keep]
        opt.rebind({"x": x2})
        opt.step({"x": np.ones((3, 2))})
        assert opt.m["x"].shape == (3, 2)
