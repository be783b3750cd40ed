"""Environment light: sampling, prefiltering, SH projection, white loss."""

import numpy as np
import pytest

from gsdistill import cubemap, envlight, shmath
from gsdistill.envlight import (
    LightModel,
    PrefilterOperator,
    light_white_loss,
    light_white_loss_grad,
    prefilter,
    prefiltered_from_operator,
    project_light_sh,
    sample_dir,
    specular_lookup,
)

RNG = np.random.default_rng(5150)


def random_unit(n):
    v = RNG.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def solid_angle_mean(faces):
    w = cubemap.texel_solid_angles(faces.shape[1])
    total = (faces * w[None, :, :, None]).sum(axis=(0, 1, 2))
    return total / (w.sum() * 6)


class TestSampleDir:
    def test_constant_map(self):
        faces = np.full((6, 16, 16, 3), 3.25)
        for d in random_unit(20):
            assert np.allclose(sample_dir(faces, d), 3.25)

    def test_texel_center_exact(self):
        faces = RNG.uniform(0.0, 1.0, (6, 8, 8, 3))
        dirs = cubemap.all_dirs(8)
        # probe a few texel centers on each face
        for f in range(6):
            for i, j in ((0, 0), (3, 5), (7, 7)):
                got = sample_dir(faces, dirs[f, i, j])
                assert np.allclose(got, faces[f, i, j], atol=1e-12)

    def test_antipodal_linear_function(self):
        dirs = cubemap.all_dirs(32)
        faces = np.repeat(dirs[..., 2:3], 3, axis=-1)
        up = sample_dir(faces, np.array([0.0, 0.0, 1.0]))
        down = sample_dir(faces, np.array([0.0, 0.0, -1.0]))
        assert np.allclose(up, -down, atol=1e-3)

    def test_mapping_self_inverse(self):
        res = 16
        dirs = cubemap.all_dirs(res).reshape(-1, 3)
        face, u, v = cubemap.dir_to_face_uv(dirs)
        back = cubemap.face_uv_to_dir(face, u, v)
        assert np.abs(back - dirs).max() < 1e-12


class TestPrefilter:
    def test_constant_preserved(self):
        base = np.full((6, 16, 16, 3), 1.5)
        env = prefilter(base, levels=4, samples=64)
        for lv in env.levels:
            assert np.abs(lv - 1.5).max() < 1e-4

    def test_requires_levels(self):
        with pytest.raises(ValueError):
            prefilter(np.ones((6, 16, 16, 3)), levels=3)

    def test_energy_preserved_per_level(self):
        base = np.exp(RNG.normal(0.0, 0.6, (6, 16, 16, 3)))
        env = prefilter(base, levels=4, samples=256)
        ref = solid_angle_mean(env.levels[0])
        for lv in env.levels[1:]:
            got = solid_angle_mean(lv)
            assert np.abs(got / ref - 1.0).max() < 0.03

    def test_wide_lobe_approaches_global_average(self):
        base = np.exp(RNG.normal(0.0, 0.5, (6, 16, 16, 3)))
        env = prefilter(base, levels=4, samples=512)
        coarse = env.levels[-1]
        mean = solid_angle_mean(coarse)
        dev = np.abs(coarse - mean[None, None, None, :]) / mean.mean()
        assert dev.mean() < 0.10

    def test_bright_texel_peak_stays_on_axis(self):
        res = 32
        base = np.zeros((6, res, res, 3))
        base[4, res // 2, res // 2] = 100.0  # texel adjacent to +z
        env = prefilter(base, levels=5, samples=512)
        # probe the prefiltered radiance on a dense cone around +z
        theta = np.radians(np.linspace(0.0, 10.0, 41))
        phi = np.linspace(0.0, 2 * np.pi, 60, endpoint=False)
        t, p = np.meshgrid(theta, phi, indexing="ij")
        probes = np.stack(
            [np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1
        ).reshape(-1, 3)
        vals = specular_lookup(env, probes, 0.2)[:, 0]
        peak = probes[np.argmax(vals)]
        angle = np.degrees(np.arccos(np.clip(peak[2], -1, 1)))
        assert angle < 3.0

    def test_operator_matches_streaming(self):
        base = np.exp(RNG.normal(0.0, 0.4, (6, 16, 16, 3)))
        op = PrefilterOperator(16, 4, 128)
        via_op = prefiltered_from_operator(base, op)
        direct = prefilter(base, levels=4, samples=128)
        for a, b in zip(via_op.levels[1:], direct.levels[1:]):
            assert np.abs(a - b).max() < 1e-10


class TestSpecularLookup:
    def test_r0_equals_level0(self):
        base = np.exp(RNG.normal(0.0, 0.4, (6, 16, 16, 3)))
        env = prefilter(base, levels=4, samples=64)
        dirs = random_unit(50)
        got = specular_lookup(env, dirs, 0.0)
        ref = sample_dir(base, dirs)
        assert np.abs(got - ref).max() < 1e-12

    def test_exact_level_roughness(self):
        base = np.exp(RNG.normal(0.0, 0.4, (6, 16, 16, 3)))
        env = prefilter(base, levels=4, samples=64)
        dirs = random_unit(20)
        r = float(env.roughness[2])
        got = specular_lookup(env, dirs, r)
        ref = sample_dir(env.levels[2], dirs)
        assert np.abs(got - ref).max() < 1e-12

    def test_monotone_blur(self):
        base = np.exp(RNG.normal(0.0, 1.0, (6, 32, 32, 3)))  # per-texel noise
        env = prefilter(base, levels=5, samples=2048)
        dirs = random_unit(100)
        vars = [
            specular_lookup(env, dirs, r)[:, 0].var()
            for r in (0.0, 0.25, 0.5, 0.75, 1.0)
        ]
        # non-increasing up to the estimator noise floor of the widest lobes
        slack = 1e-3 * vars[0]
        for prev, nxt in zip(vars, vars[1:]):
            assert nxt <= prev * 1.05 + slack


class TestWhiteLoss:
    def test_gray_is_zero(self):
        base = np.full((6, 8, 8, 3), 0.7)
        assert light_white_loss(base) == pytest.approx(0.0, abs=1e-12)

    def test_pure_red(self):
        base = np.zeros((6, 8, 8, 3))
        base[..., 0] = 1.0
        assert light_white_loss(base) == pytest.approx(4.0 / 3.0, rel=1e-12)

    def test_homogeneous(self):
        base = np.exp(RNG.normal(0.0, 0.5, (6, 8, 8, 3)))
        assert light_white_loss(3.0 * base) == pytest.approx(
            3.0 * light_white_loss(base), rel=1e-9
        )

    def test_grad_matches_fd(self):
        base = np.exp(RNG.normal(0.0, 0.5, (6, 4, 4, 3)))
        grad = light_white_loss_grad(base)
        h = 1e-6
        for _ in range(20):
            f = RNG.integers(0, 6)
            i, j = RNG.integers(0, 4, 2)
            c = RNG.integers(0, 3)
            bp = base.copy()
            bm = base.copy()
            bp[f, i, j, c] += h
            bm[f, i, j, c] -= h
            fd = (light_white_loss(bp) - light_white_loss(bm)) / (2 * h)
            assert grad[f, i, j, c] == pytest.approx(fd, abs=1e-6)


class TestLightModel:
    def test_activation_positive(self):
        model = LightModel(RNG.normal(0.0, 2.0, (6, 16, 16, 3)))
        assert np.all(model.activated() > 0.0)

    def test_project_light_sh_constant(self):
        base = np.full((6, 16, 16, 3), 2.0)
        sh = project_light_sh(base)
        assert sh.shape == (3, 9)
        assert np.allclose(sh[:, 0], 2.0 * shmath.UNOCCLUDED_DC, rtol=1e-3)
        assert np.abs(sh[:, 1:]).max() < 1e-6

    def test_context_sh_matches_projection(self):
        model = LightModel(RNG.normal(0.0, 0.5, (6, 16, 16, 3)))
        ctx = model.build_context()
        ref = project_light_sh(model.activated())
        assert np.abs(ctx.sh - ref).max() < 1e-10

    def test_sh_gradient_through_activation(self):
        # d(sum of SH coeffs)/d(raw texel) via the context adjoint path.
        model = LightModel(RNG.normal(0.0, 0.3, (6, 8, 8, 3)))
        ctx = model.build_context()
        weights = RNG.normal(size=(3, 9))
        ctx.add_sh_adjoint(weights)
        grad = ctx.raw_gradient()
        h = 1e-6
        for _ in range(10):
            f = RNG.integers(0, 6)
            i, j = RNG.integers(0, 8, 2)
            c = RNG.integers(0, 3)
            rp = model.raw.copy()
            rm = model.raw.copy()
            rp[f, i, j, c] += h
            rm[f, i, j, c] -= h
            shp = (np.exp(rp).reshape(-1, 3).T @ model.proj * weights).sum()
            shm = (np.exp(rm).reshape(-1, 3).T @ model.proj * weights).sum()
            fd = (shp - shm) / (2 * h)
            rel = abs(grad[f, i, j, c] - fd) / max(abs(fd), 1e-9)
            assert rel < 1e-3

    def test_specular_gradient_through_prefilter(self):
        # d(lookup)/d(raw texel) through the sparse prefilter operator.
        model = LightModel(RNG.normal(0.0, 0.3, (6, 8, 8, 3)), levels=4, train_samples=32)
        ctx = model.build_context()
        d = np.array([[0.3, -0.2, np.sqrt(1 - 0.09 - 0.04)]])
        r = 0.4
        l0, frac = ctx.env.level_and_frac(np.array([r]))
        lv = int(l0[0])
        taps_a = cubemap.BilinearTaps(d, ctx.env.levels[lv].shape[1])
        taps_b = cubemap.BilinearTaps(d, ctx.env.levels[lv + 1].shape[1])
        adj = np.ones((1, 3))
        ctx.add_level_adjoint(lv, taps_a, adj * (1 - frac[0]))
        ctx.add_level_adjoint(lv + 1, taps_b, adj * frac[0])
        grad = ctx.raw_gradient()
        h = 1e-5
        for _ in range(8):
            f = RNG.integers(0, 6)
            i, j = RNG.integers(0, 8, 2)
            c = RNG.integers(0, 3)

            def value(raw):
                env = prefiltered_from_operator(np.exp(raw), model.op)
                return specular_lookup(env, d, r).sum()

            rp = model.raw.copy()
            rm = model.raw.copy()
            rp[f, i, j, c] += h
            rm[f, i, j, c] -= h
            fd = (value(rp) - value(rm)) / (2 * h)
            assert grad[f, i, j, c] == pytest.approx(fd, abs=1e-6)
