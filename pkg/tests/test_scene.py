"""Scene container: activations, normals, init defaults, serialization."""

import numpy as np
import pytest

from gsdistill import scene as sc
from gsdistill.camera import Camera, cube_face_cameras
from gsdistill.cubemap import face_uv_to_dir
from gsdistill.errors import FormatError
from gsdistill.scene import (
    Scene,
    gaussian_depth,
    gaussian_normal,
    gaussian_normals,
    init_scene,
    load_scene,
    logit,
    normalize_quats,
    quats_to_rotmats,
    save_scene,
    sigmoid,
)

RNG = np.random.default_rng(31)


def small_scene(n=5, light_res=8):
    pts = RNG.normal(size=(n, 3))
    return init_scene(pts, light_res=light_res)


class TestActivations:
    def test_sigmoid_monotone(self):
        x = np.sort(RNG.normal(0, 3, 100))
        s = sigmoid(x)
        assert np.all(np.diff(s) >= 0)
        assert np.all((s > 0) & (s < 1))

    def test_sigmoid_grad_fd(self):
        x = RNG.normal(0, 2, 50)
        h = 1e-6
        fd = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h)
        assert np.abs(sc.sigmoid_grad(x) - fd).max() < 1e-6

    def test_exp_scale_grad_fd(self):
        x = RNG.normal(0, 1, 50)
        h = 1e-7
        fd = (np.exp(x + h) - np.exp(x - h)) / (2 * h)
        assert np.abs(np.exp(x) - fd).max() < 1e-6

    def test_logit_roundtrip(self):
        p = RNG.uniform(0.01, 0.99, 100)
        assert np.abs(sigmoid(logit(p)) - p).max() < 1e-12


class TestQuats:
    def test_rotmat_orthonormal(self):
        q = normalize_quats(RNG.normal(size=(20, 4)))
        r = quats_to_rotmats(q)
        eye = np.einsum("nij,nkj->nik", r, r)
        assert np.abs(eye - np.eye(3)).max() < 1e-12

    def test_rotmat_jacobian_fd(self):
        q = normalize_quats(RNG.normal(size=(10, 4)))
        jac = sc.rotmat_quat_jacobian(q)
        h = 1e-7
        for comp in range(4):
            qp = q.copy()
            qm = q.copy()
            qp[:, comp] += h
            qm[:, comp] -= h
            fd = (quats_to_rotmats(qp) - quats_to_rotmats(qm)) / (2 * h)
            assert np.abs(jac[:, comp] - fd).max() < 1e-6

    def test_normalize_backward_fd(self):
        q = RNG.normal(size=(10, 4)) * 2
        adj = RNG.normal(size=(10, 4))
        grad = sc.quat_normalize_backward(q, adj)
        h = 1e-7
        for comp in range(4):
            qp = q.copy()
            qm = q.copy()
            qp[:, comp] += h
            qm[:, comp] -= h
            fd = ((normalize_quats(qp) - normalize_quats(qm)) / (2 * h) * adj).sum(-1)
            assert np.abs(grad[:, comp] - fd).max() < 1e-6


class TestNormals:
    def test_identity_rotation_shortest_z(self):
        s = small_scene(1)
        s.gaussians.log_scale[0] = np.log([1.0, 1.0, 0.1])
        n = gaussian_normal(s, 0, s.gaussians.pos[0] + np.array([0, 0, 5.0]))
        assert np.allclose(n, [0, 0, 1], atol=1e-12)

    def test_sign_flip(self):
        s = small_scene(1)
        s.gaussians.log_scale[0] = np.log([1.0, 1.0, 0.1])
        n = gaussian_normal(s, 0, s.gaussians.pos[0] + np.array([0, 0, -5.0]))
        assert np.allclose(n, [0, 0, -1], atol=1e-12)

    def test_rotated_axis(self):
        s = small_scene(1)
        s.gaussians.log_scale[0] = np.log([1.0, 1.0, 0.1])
        # 90 degrees about x maps z to y
        s.gaussians.quat[0] = [np.cos(np.pi / 4), np.sin(np.pi / 4), 0, 0]
        n = gaussian_normal(s, 0, s.gaussians.pos[0] + np.array([0, 5.0, 0]))
        assert np.allclose(n, [0, 1, 0], atol=1e-12)

    def test_unit_and_facing(self):
        s = small_scene(50)
        s.gaussians.quat[:] = RNG.normal(size=(50, 4))
        s.gaussians.log_scale[:] = RNG.normal(0, 0.5, (50, 3))
        cam = np.array([1.0, 2.0, 3.0])
        r = quats_to_rotmats(normalize_quats(s.gaussians.quat))
        n, _, _ = gaussian_normals(r, s.activated_scale(), s.gaussians.pos, cam)
        assert np.abs(np.linalg.norm(n, axis=1) - 1).max() < 1e-9
        facing = ((cam[None] - s.gaussians.pos) * n).sum(-1)
        assert np.all(facing >= 0)

    def test_tie_break_priority_z(self):
        s = small_scene(1)
        s.gaussians.log_scale[0] = np.log([0.5, 0.5, 0.5])
        n = gaussian_normal(s, 0, s.gaussians.pos[0] + np.array([0, 0, 2.0]))
        assert np.allclose(n, [0, 0, 1])


class TestDepth:
    def test_basic(self):
        assert gaussian_depth([0, 0, 0], [0, 0, 5]) == 5.0
        assert gaussian_depth([1, 1, 1], [1, 1, 1]) == 0.0
        assert gaussian_depth([3, 4, 0], [0, 0, 0]) == pytest.approx(5.0)


class TestInit:
    def test_material_defaults(self):
        s = small_scene(100)
        assert np.allclose(s.activated_rough(), 0.99, atol=1e-9)
        assert np.allclose(s.activated_albedo(), 0.99, atol=1e-9)

    def test_alpha_inactive_before_stage2(self):
        s = small_scene(10)
        assert np.all(s.activated_alpha() == 0.0)
        s.alpha_active = True
        assert np.allclose(s.activated_alpha(), 0.01, atol=1e-12)

    def test_quaternions_normalized(self):
        pts = RNG.normal(size=(100, 3))
        s = init_scene(pts, light_res=8)
        assert s.count == 100
        norms = np.linalg.norm(s.gaussians.quat, axis=1)
        assert np.abs(norms - 1).max() < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            init_scene(np.zeros((0, 3)))


class TestSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        s = small_scene(7)
        # commit raw params to the file's storage grid first
        p1 = tmp_path / "a.prds"
        save_scene(p1, s)
        s2 = load_scene(p1)
        p2 = tmp_path / "b.prds"
        save_scene(p2, s2)
        assert p1.read_bytes() == p2.read_bytes()
        s3 = load_scene(p2)
        for f in s2.gaussians.FIELDS:
            assert np.array_equal(getattr(s2.gaussians, f), getattr(s3.gaussians, f))
        assert np.array_equal(s2.light.raw, s3.light.raw)

    def test_flags_and_sphere(self, tmp_path):
        s = small_scene(3)
        s.alpha_active = True
        s.stage_completed = sc.STAGE_SPECULAR
        s.domain_sphere = (np.array([1.0, 2.0, 3.0]), 4.0)
        path = tmp_path / "s.prds"
        save_scene(path, s)
        s2 = load_scene(path)
        assert s2.alpha_active
        assert s2.stage_completed == sc.STAGE_SPECULAR
        np.testing.assert_allclose(s2.domain_sphere[0], [1, 2, 3])
        assert s2.domain_sphere[1] == 4.0

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.prds"
        p.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_scene(p)

    def test_truncated(self, tmp_path):
        s = small_scene(5)
        p = tmp_path / "t.prds"
        save_scene(p, s)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(FormatError):
            load_scene(p)

    def test_newer_version_fails(self, tmp_path):
        s = small_scene(2)
        p = tmp_path / "v.prds"
        save_scene(p, s)
        data = bytearray(p.read_bytes())
        data[4] = 99
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_scene(p)

    def test_empty_scene_rejected(self, tmp_path):
        s = small_scene(1)
        s.gaussians = s.gaussians.select(np.zeros(1, dtype=bool))
        with pytest.raises(ValueError):
            save_scene(tmp_path / "e.prds", s)


class TestPrune:
    def test_drops_low_opacity(self):
        s = small_scene(10)
        s.gaussians.opacity[:5] = logit(0.001)
        sc.prune_low_opacity(s)
        assert s.count == 5

    def test_never_empties(self):
        s = small_scene(4)
        s.gaussians.opacity[:] = logit(0.0001)
        sc.prune_low_opacity(s)
        assert s.count == 4


class TestCamera:
    def test_lookat_projects_target_to_center(self):
        cam = Camera.look_at([0, 0, -5], [0, 0, 0], width=32, height=32)
        t = cam.world_to_cam(np.array([[0.0, 0.0, 0.0]]))[0]
        assert t[2] > 0
        u = cam.fx * t[0] / t[2] + cam.cx
        v = cam.fy * t[1] / t[2] + cam.cy
        assert (u, v) == (16.0, 16.0)

    def test_rays_unit_and_through_center(self):
        cam = Camera.look_at([1, 2, -5], [0, 0, 0], width=16, height=16)
        rays = cam.ray_dirs()
        assert np.abs(np.linalg.norm(rays, axis=-1) - 1).max() < 1e-12
        # center ray points at the target
        center = rays[8, 8]
        to_target = -cam.position / np.linalg.norm(cam.position)
        # not exactly the pixel center; just same hemisphere, close angle
        assert center @ to_target > 0.99

    def test_bad_rotation_rejected(self):
        with pytest.raises(ValueError):
            Camera(10, 10, 8, 8, 16, 16, np.eye(3) * 1.1, np.zeros(3))

    def test_cube_face_cameras_match_convention(self):
        center = np.array([0.5, -0.2, 1.0])
        cams = cube_face_cameras(center, 16)
        for f, cam in enumerate(cams):
            rays = cam.ray_dirs()
            for i, j in ((0, 0), (7, 9), (15, 15)):
                u = 2 * (j + 0.5) / 16 - 1
                v = 2 * (i + 0.5) / 16 - 1
                expected = face_uv_to_dir(np.array(f), np.array(u), np.array(v))
                assert np.abs(rays[i, j] - expected).max() < 1e-12
