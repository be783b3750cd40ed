"""Shadow-field baking and trilinear queries."""

import numpy as np
import pytest

from gsdistill import shmath
from gsdistill.errors import FormatError
from gsdistill.scene import init_scene, logit
from gsdistill.shmath import UNOCCLUDED_DC, eval_sh_basis, uniform_sphere_dirs
from gsdistill.visibility import (
    VisibilityGrid,
    bake_visibility,
    load_grid,
    save_grid,
    scene_bbox,
    unoccluded_grid,
)

RNG = np.random.default_rng(17)


def transparent_scene():
    s = init_scene(RNG.normal(0, 1, (10, 3)), light_res=8)
    s.gaussians.opacity[:] = logit(1e-4)
    return s


def shell_scene(radius=1.0, n=600):
    dirs = uniform_sphere_dirs(n, seed=4)
    s = init_scene(dirs * radius, light_res=8)
    s.gaussians.opacity[:] = 40.0  # ~1
    s.gaussians.log_scale[:] = np.log(0.35)
    return s


def halfspace_scene():
    gx, gy = np.meshgrid(np.linspace(-12, 12, 48), np.linspace(-12, 12, 48))
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, -1.0)], axis=-1)
    s = init_scene(pts, light_res=8)
    s.gaussians.opacity[:] = 40.0
    s.gaussians.log_scale[:] = np.log([0.6, 0.6, 0.05])[None, :].repeat(gx.size, 0)
    return s


class TestBake:
    def test_transparent_scene_is_exactly_unoccluded(self):
        s = transparent_scene()
        grid = bake_visibility(s, dims=(3, 3, 3), face_res=16)
        expected = np.zeros(9)
        expected[0] = UNOCCLUDED_DC
        assert np.array_equal(grid.cells, np.broadcast_to(expected, grid.cells.shape))

    def test_inside_opaque_shell_dc_near_zero(self):
        s = shell_scene()
        grid = bake_visibility(
            s, dims=(2, 2, 2), face_res=16, bbox=(-np.full(3, 0.1), np.full(3, 0.1))
        )
        # all probes are near the center of the shell
        dc = grid.cells[..., 0]
        assert np.all(dc <= 0.05 * UNOCCLUDED_DC)

    def test_halfspace_directional_split(self):
        s = halfspace_scene()
        grid = bake_visibility(
            s, dims=(2, 2, 2), face_res=32,
            bbox=(np.array([-0.05, -0.05, 1.5]), np.array([0.05, 0.05, 1.6])),
        )
        sh = grid.cells[0, 0, 0]
        dirs = uniform_sphere_dirs(2000, seed=9)
        recon = eval_sh_basis(dirs, 3) @ sh
        up = recon[dirs[:, 2] > 0.3].mean()
        down = recon[dirs[:, 2] < -0.3].mean()
        assert up >= 0.8
        assert down <= 0.2

    def test_deterministic(self):
        s = shell_scene(n=100)
        g1 = bake_visibility(s, dims=(2, 2, 2), face_res=16)
        g2 = bake_visibility(s, dims=(2, 2, 2), face_res=16)
        assert np.array_equal(g1.cells, g2.cells)

    def test_bbox_from_scene(self):
        s = shell_scene(n=50)
        lo, hi = scene_bbox(s)
        assert np.all(lo < s.gaussians.pos.min(axis=0))
        assert np.all(hi > s.gaussians.pos.max(axis=0))

    def test_dims_validation(self):
        with pytest.raises(ValueError):
            bake_visibility(transparent_scene(), dims=(1, 4, 4))


class TestQuery:
    def grid(self):
        g = unoccluded_grid([-1, -1, -1], [1, 1, 1], (3, 3, 3))
        g.cells[:] = RNG.normal(0.5, 0.3, g.cells.shape)
        return g

    def test_grid_point_exact(self):
        g = self.grid()
        pts = np.array([[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        vals, _ = g.query(pts)
        assert np.allclose(vals[0], g.cells[0, 0, 0], atol=1e-12)
        assert np.allclose(vals[1], g.cells[1, 1, 1], atol=1e-12)
        assert np.allclose(vals[2], g.cells[2, 2, 2], atol=1e-12)

    def test_edge_midpoint_average(self):
        g = self.grid()
        v, _ = g.query(np.array([[-0.5, -1.0, -1.0]]))
        expected = 0.5 * (g.cells[0, 0, 0] + g.cells[1, 0, 0])
        assert np.allclose(v[0], expected, atol=1e-12)

    def test_outside_clamps(self):
        g = self.grid()
        v1, _ = g.query(np.array([[-5.0, 0.0, 0.0]]))
        v2, _ = g.query(np.array([[-1.0, 0.0, 0.0]]))
        assert np.allclose(v1, v2, atol=1e-12)

    def test_lipschitz_continuity(self):
        g = self.grid()
        eps = 1e-4
        # coefficient range over a unit cell bounds the directional slope
        span = np.abs(np.diff(g.cells, axis=0)).max() + np.abs(
            np.diff(g.cells, axis=1)
        ).max() + np.abs(np.diff(g.cells, axis=2)).max()
        lip = span / (2.0 / 2)  # cell size is 1 in box units
        for _ in range(50):
            x = RNG.uniform(-1, 1, 3)
            step = RNG.normal(size=3)
            step *= eps / np.linalg.norm(step)
            a, _ = g.query(x[None])
            b, _ = g.query((x + step)[None])
            assert np.abs(b - a).max() <= lip * eps + 1e-12

    def test_position_gradient_matches_fd(self):
        g = self.grid()
        pts = RNG.uniform(-0.9, 0.9, (20, 3))
        vals, tape = g.query(pts)
        w = RNG.normal(size=vals.shape)
        d_x = tape.backward_position(w)
        h = 1e-6
        for axis in range(3):
            pp = pts.copy()
            pm = pts.copy()
            pp[:, axis] += h
            pm[:, axis] -= h
            vp, _ = g.query(pp)
            vm, _ = g.query(pm)
            fd = ((vp - vm) / (2 * h) * w).sum(-1)
            assert np.abs(d_x[:, axis] - fd).max() < 1e-5


class TestUnoccludedPath:
    def test_full_diffuse_reduces_to_no_shadow(self):
        # triple product with the unoccluded vector is the identity, so the
        # diffuse path with a baked-empty grid equals the analytic no-shadow
        # irradiance for any normal.
        s = transparent_scene()
        grid = bake_visibility(s, dims=(2, 2, 2), face_res=16)
        t = shmath.triple_product_tensor(3)
        l0 = 1.3
        light = shmath.SHVector(3, np.concatenate([[2 * np.sqrt(np.pi) * l0], np.zeros(8)]))
        v, _ = grid.query(np.zeros((1, 3)))
        p = shmath.sh_triple_product(light, shmath.SHVector(3, v[0]), t)
        for n in uniform_sphere_dirs(10, seed=3):
            irr = shmath.sh_dot(p, shmath.cosine_lobe_sh(n))
            assert irr == pytest.approx(np.pi * l0, rel=1e-4)


class TestGridIO:
    def test_round_trip(self, tmp_path):
        g = unoccluded_grid([-1, -2, -3], [1, 2, 3], (4, 3, 2))
        g.cells[:] = RNG.normal(0.5, 0.2, g.cells.shape).astype(np.float32)
        path = tmp_path / "grid.visg"
        save_grid(g, path)
        g2 = load_grid(path)
        assert g2.dims == (4, 3, 2)
        np.testing.assert_allclose(g2.bbox_min, g.bbox_min, atol=1e-6)
        assert np.allclose(g2.cells, g.cells, atol=1e-7)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.visg"
        p.write_bytes(b"JUNK" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_grid(p)

    def test_truncated(self, tmp_path):
        g = unoccluded_grid([-1, -1, -1], [1, 1, 1], (3, 3, 3))
        p = tmp_path / "t.visg"
        save_grid(g, p)
        data = p.read_bytes()
        p.write_bytes(data[:50])
        with pytest.raises(FormatError):
            load_grid(p)
