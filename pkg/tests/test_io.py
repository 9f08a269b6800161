"""File formats, dataset layout, and evaluation metrics."""

import os
import struct

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import ate_alignment_search
from nudba import io as nio
from nudba import synth
from nudba.autodiff import ParamStore
from nudba.errors import (
    BadMagic,
    CountMismatch,
    DimensionMismatch,
    EmptyMesh,
    EmptySamples,
    ParseError,
    TruncatedFile,
)
from nudba.geometry import Box, CameraIntrinsics, SE3Pose


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class TestFlowFiles:
    @staticmethod
    def _random_flow(rng, w=7, h=5):
        flow = _f32(rng.normal(size=(h, w, 2)))
        valid = rng.uniform(size=(h, w)) > 0.4
        return flow, valid

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        flow, valid = self._random_flow(rng)
        p1, p2 = tmp_path / "a.nufl", tmp_path / "b.nufl"
        nio.write_flow(p1, flow, valid)
        got_flow, got_valid = nio.read_flow(p1)
        np.testing.assert_array_equal(got_flow, flow)
        np.testing.assert_array_equal(got_valid, valid)
        nio.write_flow(p2, got_flow, got_valid)
        assert p1.read_bytes() == p2.read_bytes()

    def test_file_size_invariant(self, tmp_path):
        flow, valid = self._random_flow(np.random.default_rng(1), w=9, h=4)
        path = tmp_path / "f.nufl"
        nio.write_flow(path, flow, valid)
        assert path.stat().st_size == 16 + 8 * 9 * 4 + 9 * 4

    def test_wrong_magic_raises(self, tmp_path):
        path = tmp_path / "d.nudp"
        nio.write_disparity(path, np.zeros((3, 3)), np.ones((3, 3), dtype=bool))
        with pytest.raises(BadMagic):
            nio.read_flow(path)

    def test_truncated_payload_raises(self, tmp_path):
        flow, valid = self._random_flow(np.random.default_rng(2))
        path = tmp_path / "f.nufl"
        nio.write_flow(path, flow, valid)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TruncatedFile):
            nio.read_flow(path)

    def test_trailing_bytes_raise(self, tmp_path):
        flow, valid = self._random_flow(np.random.default_rng(3))
        path = tmp_path / "f.nufl"
        nio.write_flow(path, flow, valid)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(DimensionMismatch):
            nio.read_flow(path)

    def test_unexpected_dimensions_raise(self, tmp_path):
        flow, valid = self._random_flow(np.random.default_rng(4))
        path = tmp_path / "f.nufl"
        nio.write_flow(path, flow, valid)
        with pytest.raises(DimensionMismatch):
            nio.read_flow(path, expected_wh=(99, 5))

    def test_unsupported_version_raises(self, tmp_path):
        path = tmp_path / "f.nufl"
        path.write_bytes(b"NUFL" + struct.pack("<III", 2, 1, 1) + b"\x00" * 9)
        with pytest.raises(ParseError):
            nio.read_flow(path)

    def test_shape_validation_on_write(self, tmp_path):
        with pytest.raises(DimensionMismatch):
            nio.write_flow(tmp_path / "f.nufl", np.zeros((3, 3)), np.ones((3, 3), dtype=bool))
        with pytest.raises(DimensionMismatch):
            nio.write_flow(tmp_path / "f.nufl", np.zeros((3, 3, 2)), np.ones((2, 3), dtype=bool))


class TestDisparityFiles:
    def test_round_trip_and_size(self, tmp_path):
        rng = np.random.default_rng(5)
        disp = _f32(rng.uniform(0, 30, size=(6, 8)))
        valid = rng.uniform(size=(6, 8)) > 0.2
        path = tmp_path / "d.nudp"
        nio.write_disparity(path, disp, valid)
        got, got_valid = nio.read_disparity(path)
        np.testing.assert_array_equal(got, disp)
        np.testing.assert_array_equal(got_valid, valid)
        assert path.stat().st_size == 16 + 4 * 48 + 48

    def test_wrong_magic_raises(self, tmp_path):
        path = tmp_path / "f.nufl"
        nio.write_flow(path, np.zeros((2, 2, 2)), np.ones((2, 2), dtype=bool))
        with pytest.raises(BadMagic):
            nio.read_disparity(path)


class TestTrajectoryFiles:
    def test_identity_line(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("0 0 0 0 0 0 0 1\n")
        (fid, pose), = nio.read_trajectory(path)
        assert fid == 0
        np.testing.assert_array_equal(pose.translation, 0.0)
        np.testing.assert_allclose(pose.rotation_matrix(), np.eye(3), atol=1e-15)

    def test_round_trip_precision(self, tmp_path):
        rng = np.random.default_rng(6)
        poses = [
            (i, SE3Pose(Rotation.random(random_state=int(rng.integers(1 << 30))).as_quat(),
                        rng.normal(size=3)))
            for i in range(5)
        ]
        path = tmp_path / "t.txt"
        nio.write_trajectory(path, poses)
        got = nio.read_trajectory(path)
        for (fid, a), (gid, b) in zip(poses, got):
            assert fid == gid
            np.testing.assert_allclose(a.translation, b.translation, atol=1e-9)
            np.testing.assert_allclose(a.rotation_matrix(), b.rotation_matrix(), atol=1e-9)

    def test_quaternion_normalized_on_read(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("3 1 2 3 0 0 0 2\n")
        (_, pose), = nio.read_trajectory(path)
        np.testing.assert_allclose(pose.rotation_matrix(), np.eye(3), atol=1e-15)

    def test_zero_quaternion_raises(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("0 0 0 0 0 0 0 0\n")
        with pytest.raises(ParseError):
            nio.read_trajectory(path)

    def test_field_count_error_carries_line_number(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("0 0 0 0 0 0 0 1\n1 2 3\n")
        with pytest.raises(ParseError, match=":2:"):
            nio.read_trajectory(path)

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("# header\n\n0 0 0 0 0 0 0 1\n")
        assert len(nio.read_trajectory(path)) == 1

    def test_non_numeric_raises(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("0 a b c 0 0 0 1\n")
        with pytest.raises(ParseError):
            nio.read_trajectory(path)


def _traj(positions):
    return [(i, SE3Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.asarray(p, dtype=np.float64)))
            for i, p in enumerate(positions)]


class TestAte:
    def test_identical_trajectories(self):
        rng = np.random.default_rng(7)
        pos = rng.normal(size=(6, 3))
        assert nio.ate(_traj(pos), _traj(pos)) == 0.0

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(8)
        pos = rng.normal(size=(8, 3)) * 2.0
        r = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
        moved = pos @ r.T + np.array([4.0, -1.0, 2.0])
        assert nio.ate(_traj(moved), _traj(pos)) < 1e-9

    def test_single_offset_matches_alignment_search(self):
        """One frame of ten offset by 0.3 m: closed-form ATE equals the
        numeric alignment-search oracle and sits just under the unaligned
        0.3/sqrt(10) bound."""
        rng = np.random.default_rng(9)
        ref = np.cumsum(rng.uniform(0.2, 0.4, size=(10, 3)) * np.array([1.0, 0.2, 0.05]), axis=0)
        est = ref.copy()
        est[4] += np.array([0.0, 0.3, 0.0])
        got = nio.ate(_traj(est), _traj(ref))
        oracle = ate_alignment_search(est, ref)
        assert abs(got - oracle) < 1e-6
        assert 0.05 < got <= 0.3 / np.sqrt(10.0) + 1e-12

    def test_mismatched_ids_raise(self):
        a = _traj(np.zeros((3, 3)))
        b = _traj(np.zeros((4, 3)))
        with pytest.raises(CountMismatch):
            nio.ate(a, b)


def _square_mesh(z, extent=2.0):
    v = np.array([[0.0, 0.0, z], [extent, 0.0, z], [extent, extent, z], [0.0, extent, z]])
    return nio.Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


class TestMeshMetrics:
    def test_self_comparison_is_exact(self):
        mesh = _square_mesh(0.0)
        gt = nio.sample_mesh_surface(mesh, density=10.0, seed=0)
        acc, comp, ratio = nio.mesh_metrics(mesh, gt, threshold=0.2, density=10.0, seed=0)
        assert acc == 0.0 and comp == 0.0 and ratio == 1.0

    def test_offset_plane_distances(self):
        """Mesh at z = 0.1 vs dense ground-truth samples of z = 0: accuracy
        and completion both ~0.1, ratio(0.2) = 1, ratio(0.05) = 0."""
        mesh = _square_mesh(0.1)
        g = np.linspace(0.0, 2.0, 101)
        gx, gy = np.meshgrid(g, g)
        gt = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
        acc, comp, ratio = nio.mesh_metrics(mesh, gt, threshold=0.2, density=3000.0, seed=1)
        assert 0.1 <= acc < 0.102
        assert 0.1 <= comp < 0.102
        assert ratio == 1.0
        _, _, tight = nio.mesh_metrics(mesh, gt, threshold=0.05, density=3000.0, seed=1)
        assert tight == 0.0

    def test_ratio_monotone_in_threshold(self):
        rng = np.random.default_rng(10)
        mesh = _square_mesh(0.0)
        gt = np.column_stack([rng.uniform(0, 2, 50), rng.uniform(0, 2, 50),
                              rng.uniform(0, 0.5, 50)])
        ratios = [nio.mesh_metrics(mesh, gt, threshold=t)[2] for t in (0.05, 0.1, 0.2, 0.6)]
        assert all(a <= b for a, b in zip(ratios, ratios[1:]))

    def test_eval_box_crops_both_sides(self):
        mesh = _square_mesh(0.0)
        gt = np.array([[1.0, 1.0, 0.0], [50.0, 50.0, 50.0]])
        box = Box(np.array([-1.0, -1.0, -1.0]), np.array([3.0, 3.0, 1.0]))
        _, comp, ratio = nio.mesh_metrics(mesh, gt, threshold=0.2, eval_box=box)
        assert comp < 0.05 and ratio == 1.0

    def test_visibility_mask_can_empty_predictions(self):
        mesh = _square_mesh(0.0)
        gt = np.array([[1.0, 1.0, 0.0]])
        with pytest.raises(EmptyMesh):
            nio.mesh_metrics(mesh, gt, visibility=lambda p: np.zeros(p.shape[0], dtype=bool))

    def test_empty_mesh_raises(self):
        mesh = nio.Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(EmptyMesh):
            nio.mesh_metrics(mesh, np.zeros((4, 3)))

    def test_no_gt_in_box_raises(self):
        mesh = _square_mesh(0.0)
        gt = np.array([[50.0, 50.0, 50.0]])
        box = Box(np.array([-1.0, -1.0, -1.0]), np.array([3.0, 3.0, 1.0]))
        with pytest.raises(EmptySamples):
            nio.mesh_metrics(mesh, gt, eval_box=box)


class TestPsnr:
    def test_identical_images_cap(self):
        img = np.full((4, 5, 3), 0.3)
        assert nio.psnr(img, img) == 99.0

    def test_uniform_error_hand_value(self):
        a = np.full((8, 8, 3), 0.5)
        assert nio.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_mask_selects_pixels(self):
        a = np.full((2, 2, 3), 0.5)
        b = a.copy()
        b[0, 0] += 0.1
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True
        assert nio.psnr(a, b, mask) == pytest.approx(20.0, abs=1e-9)
        mask_rest = ~mask
        assert nio.psnr(a, b, mask_rest) == 99.0

    def test_empty_mask_raises(self):
        a = np.zeros((2, 2, 3))
        with pytest.raises(EmptySamples):
            nio.psnr(a, a, np.zeros((2, 2), dtype=bool))

    def test_shape_mismatches_raise(self):
        with pytest.raises(DimensionMismatch):
            nio.psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))
        with pytest.raises(DimensionMismatch):
            nio.psnr(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((3, 3), dtype=bool))


class TestPly:
    def test_mesh_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        mesh = nio.Mesh(rng.normal(size=(5, 3)), np.array([[0, 1, 2], [2, 3, 4]]),
                        rng.normal(size=(5, 3)))
        path = tmp_path / "m.ply"
        nio.write_ply(path, mesh)
        got = nio.read_ply(path)
        np.testing.assert_allclose(got.vertices, mesh.vertices, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(got.normals, mesh.normals, rtol=1e-8, atol=1e-8)
        np.testing.assert_array_equal(got.faces, mesh.faces)

    def test_point_cloud_round_trip(self, tmp_path):
        cloud = nio.Mesh(np.arange(9.0).reshape(3, 3), np.zeros((0, 3), dtype=np.int64))
        path = tmp_path / "c.ply"
        nio.write_ply(path, cloud)
        got = nio.read_ply(path)
        assert got.faces.shape == (0, 3)
        assert got.normals is None
        np.testing.assert_allclose(got.vertices, cloud.vertices, atol=1e-8)

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text("obj\n")
        with pytest.raises(BadMagic):
            nio.read_ply(path)

    def test_binary_format_rejected(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(ParseError):
            nio.read_ply(path)

    def test_missing_end_header_raises(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 1\n")
        with pytest.raises(ParseError):
            nio.read_ply(path)

    def test_truncated_body_raises(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
            "0 0 0\n"
        )
        with pytest.raises(TruncatedFile):
            nio.read_ply(path)

    def test_non_triangle_face_raises(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 4\n"
            "property float x\nproperty float y\nproperty float z\n"
            "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
            "0 0 0\n1 0 0\n1 1 0\n0 1 0\n"
            "4 0 1 2 3\n"
        )
        with pytest.raises(ParseError):
            nio.read_ply(path)


class TestPpm:
    def test_round_trip_exact_on_quantized_values(self, tmp_path):
        rng = np.random.default_rng(12)
        img = rng.integers(0, 256, size=(5, 4, 3)).astype(np.float64) / 255.0
        path = tmp_path / "i.ppm"
        nio.write_ppm(path, img)
        np.testing.assert_array_equal(nio.read_ppm(path), img)

    def test_header_comments_skipped(self, tmp_path):
        path = tmp_path / "i.ppm"
        path.write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0]))
        img = nio.read_ppm(path)
        np.testing.assert_allclose(img[0, 0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(img[0, 1], [0.0, 1.0, 0.0])

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "i.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(BadMagic):
            nio.read_ppm(path)

    def test_truncated_pixels_raise(self, tmp_path):
        path = tmp_path / "i.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
        with pytest.raises(TruncatedFile):
            nio.read_ppm(path)

    def test_unsupported_maxval_raises(self, tmp_path):
        path = tmp_path / "i.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(ParseError):
            nio.read_ppm(path)

    def test_shape_validation_on_write(self, tmp_path):
        with pytest.raises(DimensionMismatch):
            nio.write_ppm(tmp_path / "i.ppm", np.zeros((4, 4)))


class TestCheckpoint:
    @staticmethod
    def _store():
        store = ParamStore()
        rng = np.random.default_rng(13)
        store.add("grid.l0", _f32(rng.normal(size=(16, 2))), "grid")
        store.add("dec.w0", _f32(rng.normal(size=(8, 4))), "decoder")
        store.add("sharpness", np.array([2.302585125]), "sharpness")
        return store

    def test_round_trip_values_and_categories(self, tmp_path):
        store = self._store()
        path = tmp_path / "c.nuck"
        nio.write_checkpoint(path, store, config={"iterations": "500"})
        got, config = nio.read_checkpoint(path)
        assert config == {"iterations": "500"}
        for name, block in store.items():
            np.testing.assert_array_equal(np.asarray(got.get(name)), _f32(block))
            assert got.category(name) == store.category(name)

    def test_write_is_deterministic(self, tmp_path):
        store = self._store()
        p1, p2 = tmp_path / "a.nuck", tmp_path / "b.nuck"
        nio.write_checkpoint(p1, store)
        nio.write_checkpoint(p2, store)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "c.nuck"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(BadMagic):
            nio.read_checkpoint(path)

    def test_bad_version_raises(self, tmp_path):
        path = tmp_path / "c.nuck"
        path.write_bytes(b"NUCK" + struct.pack("<II", 9, 2) + b"{}")
        with pytest.raises(ParseError):
            nio.read_checkpoint(path)

    def test_corrupt_header_raises(self, tmp_path):
        path = tmp_path / "c.nuck"
        path.write_bytes(b"NUCK" + struct.pack("<II", 1, 4) + b"{bad")
        with pytest.raises(ParseError):
            nio.read_checkpoint(path)

    def test_truncated_block_raises(self, tmp_path):
        path = tmp_path / "c.nuck"
        nio.write_checkpoint(path, self._store())
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedFile):
            nio.read_checkpoint(path)


class TestSceneConfig:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "scene.cfg"
        intr = synth.default_intrinsics()
        region = synth.default_region()
        scene = synth.default_scene()
        nio.write_scene_config(path, intr, region, scene, shells=3, r_max=16.0, max_t=14.0)
        intr2, region2, scene2, shells, r_max, max_t = nio.read_scene_config(path)
        assert (intr2.fx, intr2.fy, intr2.cx, intr2.cy) == (intr.fx, intr.fy, intr.cx, intr.cy)
        assert (intr2.width, intr2.height, intr2.baseline) == (intr.width, intr.height, intr.baseline)
        np.testing.assert_array_equal(region2.lo, region.lo)
        np.testing.assert_array_equal(region2.hi, region.hi)
        assert (shells, r_max, max_t) == (3, 16.0, 14.0)
        assert len(scene2.primitives) == len(scene.primitives)
        for a, b in zip(scene.primitives, scene2.primitives):
            assert type(a) is type(b)
            np.testing.assert_allclose(np.asarray(b.albedo), np.asarray(a.albedo), atol=1e-15)

    def test_baseline_optional(self, tmp_path):
        path = tmp_path / "scene.cfg"
        intr = CameraIntrinsics(fx=50.0, fy=50.0, cx=16.0, cy=12.0, width=32, height=24)
        nio.write_scene_config(path, intr, synth.default_region(), None, 3, 16.0, 14.0)
        intr2, _, scene2, *_ = nio.read_scene_config(path)
        assert intr2.baseline is None
        assert scene2 is None

    def test_unknown_primitive_rejected(self, tmp_path):
        path = tmp_path / "scene.cfg"
        nio.write_scene_config(path, synth.default_intrinsics(), synth.default_region(),
                               synth.default_scene(), 3, 16.0, 14.0)
        text = path.read_text().replace("type = sphere", "type = torus")
        path.write_text(text)
        with pytest.raises(ParseError):
            nio.read_scene_config(path)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ParseError):
            nio.read_scene_config(tmp_path / "nope.cfg")

    def test_run_config_requires_optimize_section(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[optimize]\niterations = 100\nseed = 3\n")
        assert nio.read_run_config(path) == {"iterations": "100", "seed": "3"}
        path.write_text("[other]\nx = 1\n")
        with pytest.raises(ParseError):
            nio.read_run_config(path)


class TestDatasetRoundTrip:
    @pytest.fixture(scope="class")
    def small_ds(self):
        intr = CameraIntrinsics(fx=40.0, fy=40.0, cx=15.5, cy=11.5, width=32, height=24,
                                baseline=0.2)
        traj = synth.TrajectorySpec(intrinsics=intr, frame_count=2)
        return synth.generate_dataset(traj=traj, seed=4, sigma_trans=0.02, with_images=True)

    def test_full_round_trip(self, tmp_path, small_ds):
        out = tmp_path / "ds"
        nio.write_dataset(out, small_ds)
        loaded = nio.load_dataset(out)
        assert set(loaded.flows) == set(small_ds.flows)
        flow, valid = small_ds.flows[(0, 1)]
        np.testing.assert_array_equal(loaded.flows[(0, 1)][0], _f32(flow))
        np.testing.assert_array_equal(loaded.flows[(0, 1)][1], valid)
        disp, dvalid = small_ds.disparities[0]
        np.testing.assert_array_equal(loaded.disparities[0][0], _f32(disp))
        np.testing.assert_array_equal(loaded.disparities[0][1], dvalid)
        img = small_ds.images[0]
        np.testing.assert_array_equal(loaded.images[0],
                                      np.clip(np.round(img * 255.0), 0, 255) / 255.0)
        for lf, nf in zip(loaded.frames, small_ds.frames_noisy):
            np.testing.assert_allclose(lf.pose.translation,
                                       nf.effective_pose().translation, atol=1e-12)
        for lf, gf in zip(loaded.gt_frames, small_ds.frames_gt):
            np.testing.assert_allclose(lf.pose.rotation_matrix(),
                                       gf.pose.rotation_matrix(), atol=1e-9)
        np.testing.assert_array_equal(loaded.region.lo, small_ds.region.lo)
        assert (loaded.shells, loaded.r_max, loaded.max_t) == (
            small_ds.shells, small_ds.r_max, small_ds.max_t)
        assert len(loaded.scene.primitives) == len(small_ds.scene.primitives)
        np.testing.assert_allclose(loaded.points, small_ds.points, rtol=1e-7, atol=1e-7)

    def test_flow_referencing_unknown_frame(self, tmp_path, small_ds):
        out = tmp_path / "ds"
        nio.write_dataset(out, small_ds)
        os.rename(out / "flow" / "0_1.nufl", out / "flow" / "0_7.nufl")
        with pytest.raises(CountMismatch):
            nio.load_dataset(out)

    def test_malformed_flow_name(self, tmp_path, small_ds):
        out = tmp_path / "ds"
        nio.write_dataset(out, small_ds)
        os.rename(out / "flow" / "0_1.nufl", out / "flow" / "pair.nufl")
        with pytest.raises(ParseError):
            nio.load_dataset(out)


class TestThreadCap:
    def test_env_parsing(self, monkeypatch):
        monkeypatch.setenv("NUDBA_THREADS", "4")
        assert nio.nudba_threads() == 4
        monkeypatch.setenv("NUDBA_THREADS", "junk")
        assert nio.nudba_threads() >= 1
        monkeypatch.setenv("NUDBA_THREADS", "0")
        assert nio.nudba_threads() >= 1
        monkeypatch.delenv("NUDBA_THREADS")
        assert nio.nudba_threads() == (os.cpu_count() or 1)
