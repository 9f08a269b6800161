"""Alpha conversion, compositing, and differentiable flow/disparity/color."""

import numpy as np
import pytest

from nudba import autodiff as ad
from nudba.autodiff import ParamStore, Tape
from nudba.errors import MissingBaseline, MissingColorModel
from nudba.field import ColorHead, DistantField, HashGridConfig
from nudba.geometry import CameraIntrinsics, Frame, Ray, SE3Pose, cast_ray, project, se3_exp
from nudba.rendering import (
    CompositingWeights,
    RenderConfig,
    composite,
    composite_dense,
    composite_packed,
    render_color,
    render_depth,
    render_disparity,
    render_disparity_batch,
    render_flow,
    render_flow_batch,
    render_opacity,
    render_opacity_batch,
    sdf_to_alpha,
    sdf_to_alpha_packed,
)
from nudba.sampling import RaySamples, ShellSamples


def _intr(fx=100.0, fy=100.0, cx=50.0, cy=50.0, w=100, h=100, baseline=None):
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h, baseline=baseline)


def _frame(fid=0, pose=None, intr=None):
    return Frame(fid, intr or _intr(), pose or SE3Pose.identity(), np.zeros(6))


def _one_ray_samples(t, origin, direction, far=20.0):
    t = np.asarray(t, dtype=np.float64)
    return RaySamples(
        t=t,
        ray_id=np.zeros(t.size, dtype=np.int64),
        num_rays=1,
        far_cap=np.array([far]),
        origins=np.asarray(origin, dtype=np.float64)[None],
        dirs=np.asarray(direction, dtype=np.float64)[None],
    )


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


class TestSdfToAlpha:
    def test_receding_surface_gives_zero(self):
        a = sdf_to_alpha(np.array([0.1, 0.2, 0.3]), np.array([0.1, 0.1, 0.1]), 10.0)
        np.testing.assert_array_equal(np.asarray(a), 0.0)

    def test_sign_change_saturates_at_high_sharpness(self):
        a = np.asarray(sdf_to_alpha(np.array([0.1, -0.1]), np.array([0.2, 0.2]), 1e4))
        assert a[0] > 1.0 - 1e-8

    def test_logistic_ratio_value(self):
        """s = 10 crossing +-0.05: alpha = (Phi(0.5) - Phi(-0.5)) / Phi(0.5),
        which reduces to 1 - exp(-1/2)."""
        a = np.asarray(sdf_to_alpha(np.array([0.05, -0.05]), np.array([0.1, 0.1]), 10.0))
        want = (_logistic(0.5) - _logistic(-0.5)) / _logistic(0.5)
        np.testing.assert_allclose(a[0], want, rtol=1e-12)
        np.testing.assert_allclose(a[0], 1.0 - np.exp(-0.5), rtol=1e-12)

    def test_single_sample_has_zero_alpha(self):
        a = np.asarray(sdf_to_alpha(np.array([0.3]), np.array([0.5]), 10.0))
        np.testing.assert_array_equal(a, [0.0])

    def test_alphas_stay_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 12))
            s = rng.normal(scale=0.5, size=n)
            d = rng.uniform(0.01, 0.5, size=n)
            a = np.asarray(sdf_to_alpha(s, d, float(rng.uniform(1, 200))))
            assert np.all((a >= 0.0) & (a <= 1.0))

    def test_packed_matches_per_ray(self):
        rng = np.random.default_rng(1)
        t = np.sort(rng.uniform(0.5, 9.5, 12))
        ray_id = np.sort(rng.integers(0, 3, 12))
        samples = RaySamples(
            t=t, ray_id=ray_id, num_rays=3, far_cap=np.full(3, 10.0),
            origins=np.zeros((3, 3)), dirs=np.tile([0.0, 0.0, 1.0], (3, 1)),
        )
        sdf = rng.normal(scale=0.3, size=12)
        packed = np.asarray(sdf_to_alpha_packed(sdf, samples, 25.0))
        deltas = samples.deltas()
        for r in range(3):
            sel = ray_id == r
            if not sel.any():
                continue
            alone = np.asarray(sdf_to_alpha(sdf[sel], deltas[sel], 25.0))
            np.testing.assert_allclose(packed[sel], alone, atol=1e-12)


class TestComposite:
    def test_opaque_first_sample(self):
        cw = composite(np.array([1.0]))
        np.testing.assert_array_equal(cw.weights, [1.0])
        assert cw.opacity == 1.0
        assert cw.residual == 0.0

    def test_hand_evaluated_pair(self):
        cw = composite(np.array([0.5, 0.5]))
        np.testing.assert_allclose(cw.weights, [0.5, 0.25], atol=1e-15)
        np.testing.assert_allclose(cw.transmittances, [1.0, 0.5], atol=1e-15)
        np.testing.assert_allclose(cw.opacity, 0.75, atol=1e-15)

    def test_empty_ray(self):
        cw = composite(np.zeros(0))
        assert cw.opacity == 0.0
        assert cw.residual == 1.0

    def test_partition_of_unity(self):
        """Exclusive-product compositing: sum of weights plus the leftover
        transmittance is exactly 1."""
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.uniform(0, 1, int(rng.integers(1, 20)))
            cw = composite(a)
            assert abs(cw.opacity + cw.residual - 1.0) < 1e-12
            assert np.all((cw.weights >= 0) & (cw.weights <= 1))
            assert np.all((cw.transmittances >= 0) & (cw.transmittances <= 1))
            np.testing.assert_allclose(cw.transmittances[0], 1.0)
            np.testing.assert_allclose(
                cw.transmittances[1:], np.cumprod(1.0 - a)[:-1], atol=1e-15
            )

    def test_packed_matches_per_ray(self):
        rng = np.random.default_rng(3)
        ray_id = np.sort(rng.integers(0, 4, 17))
        t = np.sort(rng.uniform(0.5, 9.5, 17))
        order = np.lexsort((t, ray_id))
        samples = RaySamples(
            t=t[order], ray_id=ray_id[order], num_rays=4, far_cap=np.full(4, 10.0),
            origins=np.zeros((4, 3)), dirs=np.tile([0.0, 0.0, 1.0], (4, 1)),
        )
        alpha = rng.uniform(0, 1, 17)
        w = np.asarray(composite_packed(alpha, samples))
        for r in range(4):
            sel = samples.ray_id == r
            np.testing.assert_allclose(w[sel], composite(alpha[sel]).weights, atol=1e-14)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        store = ParamStore()
        store.add("raw", rng.normal(size=8), "grid")
        coeff = rng.normal(size=(2, 4))

        def loss(params):
            tape = Tape()
            a = ad.sigmoid(tape.param(params, "raw"))
            w = composite_dense(ad.reshape(a, (2, 4)))
            return ad.vsum(w * coeff)

        err = ad.check_gradients(loss, store, h=1e-6, sample_count=8, seed=0)
        assert err < 1e-6


class TestRenderFlow:
    @staticmethod
    def _setup():
        f_j = _frame(0)
        f_k = Frame(1, _intr(), se3_exp(np.array([0.0, 0.0, 0.0, 0.5, 0.0, 0.0])), np.zeros(6))
        pix = np.array([60.0, 50.0])
        ray = cast_ray(f_j, pix)
        return f_j, f_k, pix, ray

    def test_identical_frames_full_opacity_zero_flow(self):
        f_j, _, pix, ray = self._setup()
        samples = _one_ray_samples([5.0], ray.origin, ray.direction)
        flow = render_flow(ray, samples, composite(np.array([1.0])), f_j, f_j)
        np.testing.assert_allclose(flow, 0.0, atol=1e-9)

    def test_delta_weight_equals_reprojection(self):
        f_j, f_k, pix, ray = self._setup()
        samples = _one_ray_samples([5.0], ray.origin, ray.direction)
        flow = render_flow(ray, samples, np.array([1.0]), f_j, f_k)
        want = project(ray.origin + 5.0 * ray.direction, f_k) - pix
        np.testing.assert_allclose(flow, want, atol=1e-9)

    def test_two_samples_match_per_sample_projector(self):
        """w = [0.5, 0.25]: flow equals the brute-force weighted sum of the
        independently projected sample points."""
        f_j, f_k, pix, ray = self._setup()
        samples = _one_ray_samples([4.5, 5.5], ray.origin, ray.direction)
        w = np.array([0.5, 0.25])
        flow = render_flow(ray, samples, w, f_j, f_k)
        pts = ray.origin + samples.t[:, None] * ray.direction
        want = sum(w[i] * project(pts[i], f_k) for i in range(2)) - pix
        np.testing.assert_allclose(flow, want, atol=1e-8)

    def test_rejects_multi_ray_samples(self):
        f_j, f_k, pix, ray = self._setup()
        samples = RaySamples(
            t=np.array([5.0]), ray_id=np.zeros(1, dtype=np.int64), num_rays=2,
            far_cap=np.full(2, 20.0), origins=np.tile(ray.origin, (2, 1)),
            dirs=np.tile(ray.direction, (2, 1)),
        )
        with pytest.raises(ValueError):
            render_flow(ray, samples, np.array([1.0]), f_j, f_k)


class TestRenderFlowBatch:
    def test_matches_per_ray_renderer(self):
        f_j = _frame(0)
        f_k = Frame(1, _intr(), se3_exp(np.array([0.0, 0.02, 0.0, 0.5, 0.1, 0.0])), np.zeros(6))
        pix = np.array([60.0, 45.0])
        ray = cast_ray(f_j, pix)
        samples = _one_ray_samples([4.0, 5.0, 6.0], ray.origin, ray.direction)
        w = composite(np.array([0.3, 0.4, 0.2]))
        single = render_flow(ray, samples, w, f_j, f_k)
        pose = f_k.effective_pose()
        batch = render_flow_batch(
            samples, w.weights, pix[None], np.array([0]),
            pose.rotation_matrix()[None], pose.translation[None], f_j.intrinsics,
        )
        np.testing.assert_allclose(np.asarray(batch)[0], single, atol=1e-8)

    def test_identity_frame_zero_flow(self):
        f_j = _frame(0)
        pixels = np.array([[20.0, 30.0], [50.0, 50.0], [75.0, 60.0]])
        origins, dirs = [], []
        for p in pixels:
            r = cast_ray(f_j, p)
            origins.append(r.origin)
            dirs.append(r.direction)
        t = np.array([3.0, 5.0, 7.0])
        samples = RaySamples(
            t=t, ray_id=np.arange(3), num_rays=3, far_cap=np.full(3, 20.0),
            origins=np.array(origins), dirs=np.array(dirs),
        )
        pose = f_j.effective_pose()
        flow = render_flow_batch(
            samples, np.ones(3), pixels, np.zeros(3, dtype=int),
            pose.rotation_matrix()[None], pose.translation[None], f_j.intrinsics,
        )
        np.testing.assert_allclose(np.asarray(flow), 0.0, atol=1e-9)

    def test_behind_target_falls_back_to_source_pixel(self):
        """A sample behind the target camera carries no reprojection signal;
        with w = 1 its flow contribution must cancel to zero, not explode."""
        f_j = _frame(0)
        pix = np.array([60.0, 50.0])
        ray = cast_ray(f_j, pix)
        samples = _one_ray_samples([5.0], ray.origin, ray.direction)
        behind = se3_exp(np.array([0.0, 0.0, 0.0, 0.0, 0.0, 9.0]))  # ahead of sample
        flow = np.asarray(render_flow_batch(
            samples, np.ones(1), pix[None], np.array([0]),
            behind.rotation_matrix()[None], behind.translation[None], f_j.intrinsics,
        ))
        np.testing.assert_allclose(flow, 0.0, atol=1e-12)

    def test_extreme_projection_is_clamped(self):
        f_j = _frame(0)
        pix = np.array([50.0, 50.0])
        ray = cast_ray(f_j, pix)  # optical axis
        samples = _one_ray_samples([5.0], ray.origin, ray.direction)
        # target 4.8 ahead: sample sits 0.2 in front, 2.0 sideways
        near = se3_exp(np.array([0.0, 0.0, 0.0, -2.0, 0.0, 4.8]))
        flow = np.asarray(render_flow_batch(
            samples, np.ones(1), pix[None], np.array([0]),
            near.rotation_matrix()[None], near.translation[None], f_j.intrinsics,
        ))
        k = f_j.intrinsics
        assert flow[0, 0] == pytest.approx(k.cx + 3.0 * k.width - pix[0])


class TestRenderDisparity:
    def test_hand_value(self):
        intr = _intr(baseline=0.5)
        samples = _one_ray_samples([10.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert render_disparity(samples, np.array([1.0]), intr) == pytest.approx(5.0, abs=1e-12)

    def test_empty_gives_zero(self):
        intr = _intr(baseline=0.5)
        samples = _one_ray_samples(np.zeros(0), np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert render_disparity(samples, np.zeros(0), intr) == 0.0

    def test_halves_when_depths_double(self):
        intr = _intr(baseline=0.5)
        w = np.array([0.4, 0.3])
        near = _one_ray_samples([4.0, 8.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        far = _one_ray_samples([8.0, 16.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert render_disparity(near, w, intr) == pytest.approx(
            2.0 * render_disparity(far, w, intr), rel=1e-12
        )

    def test_missing_baseline_raises(self):
        samples = _one_ray_samples([10.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(MissingBaseline):
            render_disparity(samples, np.array([1.0]), _intr(baseline=None))

    def test_consistent_with_depth_for_delta_weight(self):
        intr = _intr(baseline=0.5)
        samples = _one_ray_samples([7.3], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        w = np.array([1.0])
        disp = render_disparity(samples, w, intr)
        depth = render_depth(samples, w)
        assert disp == pytest.approx(intr.fx * intr.baseline / depth, abs=1e-9)

    def test_batch_matches_per_ray(self):
        intr = _intr(baseline=0.5)
        samples = _one_ray_samples([4.0, 9.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        w = np.array([0.5, 0.25])
        batch = np.asarray(render_disparity_batch(samples, w, np.array([intr.fx * intr.baseline])))
        assert batch[0] == pytest.approx(render_disparity(samples, w, intr), abs=1e-12)


class TestRenderDepthOpacity:
    def test_depth_delta_weight(self):
        samples = _one_ray_samples([3.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert render_depth(samples, np.array([1.0])) == 3.0

    def test_depth_hand_value(self):
        samples = _one_ray_samples([2.0, 4.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert render_depth(samples, np.array([0.5, 0.25])) == pytest.approx(2.0, abs=1e-15)

    def test_depth_zero_weights(self):
        samples = _one_ray_samples([2.0, 4.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert render_depth(samples, np.zeros(2)) == 0.0

    def test_opacity_values(self):
        assert render_opacity(composite(np.array([1.0]))) == 1.0
        assert render_opacity(composite(np.array([0.5, 0.5]))) == pytest.approx(0.75)
        assert render_opacity(composite(np.zeros(0))) == 0.0

    def test_opacity_batch_clamps(self):
        samples = _one_ray_samples([2.0, 4.0], np.zeros(3), np.array([0.0, 0.0, 1.0]))
        o = np.asarray(render_opacity_batch(samples, np.array([0.7, 0.7])))
        assert o[0] == 1.0

    def test_render_config_validates_far_cap(self):
        with pytest.raises(ValueError):
            RenderConfig(far_cap=0.0)


def _color_models():
    head = ColorHead.create(seed=0, feature_dim=6)
    cfg = HashGridConfig(box=(np.full(4, -2.0), np.full(4, 2.0)), levels=2,
                         base_resolution=4, per_level_scale=2.0, table_size_log2=10,
                         feature_dim=2, dims=4)
    distant = DistantField.create(cfg, seed=1)
    return head, distant


class TestRenderColor:
    @staticmethod
    def _ray():
        return Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0, np.array([50.0, 50.0]))

    def test_missing_models_raise(self):
        ray = self._ray()
        samples = _one_ray_samples([5.0], ray.origin, ray.direction)
        with pytest.raises(MissingColorModel):
            render_color(ray, samples, np.array([1.0]), np.zeros((1, 6)), None, None, None)

    def test_opaque_close_ray_ignores_distant(self):
        head, distant = _color_models()
        ray = self._ray()
        samples = _one_ray_samples([5.0], ray.origin, ray.direction)
        z = np.random.default_rng(5).normal(size=(1, 6))
        shells = ShellSamples(
            shell_index=np.arange(1, 4),
            x_warped=np.random.default_rng(6).uniform(-1, 1, (3, 4)),
            scales=np.array([1.5, 2.0, 4.0]),
            t=np.array([5.0, 7.0, 9.0]),
        )
        got = render_color(ray, samples, composite(np.array([1.0])), z, shells, head, distant)
        close_only = np.asarray(head.query(ray.direction[None], z))[0]
        np.testing.assert_allclose(got, close_only, atol=1e-12)

    def test_empty_close_samples_render_distant_only(self):
        head, distant = _color_models()
        ray = self._ray()
        samples = _one_ray_samples(np.zeros(0), ray.origin, ray.direction)
        shells = ShellSamples(
            shell_index=np.arange(1, 4),
            x_warped=np.random.default_rng(7).uniform(-1, 1, (3, 4)),
            scales=np.array([1.5, 2.0, 4.0]),
            t=np.array([5.0, 7.0, 9.0]),
        )
        got = render_color(ray, samples, np.zeros(0), np.zeros((0, 6)), shells, head, distant)
        sigma, rgb = (np.asarray(x) for x in distant.query(shells.x_warped))
        deltas = np.array([2.0, 2.0, 2.0])
        dw = composite(1.0 - np.exp(-sigma * deltas))
        want = (dw.weights[:, None] * rgb).sum(axis=0)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_mixed_ray_equals_single_list_compositing(self):
        """Close + distant split must equal one compositing pass over the
        concatenated sample list."""
        head, distant = _color_models()
        ray = self._ray()
        samples = _one_ray_samples([4.0, 6.0], ray.origin, ray.direction)
        rng = np.random.default_rng(8)
        z = rng.normal(size=(2, 6))
        alphas_close = np.array([0.4, 0.3])
        shells = ShellSamples(
            shell_index=np.arange(1, 4),
            x_warped=rng.uniform(-1, 1, (3, 4)),
            scales=np.array([1.5, 2.0, 4.0]),
            t=np.array([8.0, 10.0, 12.0]),
        )
        got = render_color(ray, samples, composite(alphas_close), z, shells, head, distant)

        c_close = np.asarray(head.query(np.tile(ray.direction, (2, 1)), z))
        sigma, rgb = (np.asarray(x) for x in distant.query(shells.x_warped))
        alphas_distant = 1.0 - np.exp(-sigma * np.array([2.0, 2.0, 2.0]))
        joint = composite(np.concatenate([alphas_close, alphas_distant]))
        colors = np.vstack([c_close, rgb])
        want = (joint.weights[:, None] * colors).sum(axis=0)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_color_in_unit_cube(self):
        head, distant = _color_models()
        ray = self._ray()
        samples = _one_ray_samples([4.0, 6.0], ray.origin, ray.direction)
        z = np.random.default_rng(9).normal(size=(2, 6))
        shells = ShellSamples(
            shell_index=np.arange(1, 3),
            x_warped=np.random.default_rng(10).uniform(-1, 1, (2, 4)),
            scales=np.array([2.0, 4.0]),
            t=np.array([8.0, 10.0]),
        )
        got = render_color(ray, samples, composite(np.array([0.5, 0.3])), z, shells, head, distant)
        assert np.all((got >= 0.0) & (got <= 1.0 + 1e-6))


class TestRenderingGradients:
    def test_flow_chain_passes_gradient_check(self):
        """Reverse-mode through sdf -> alpha -> composite -> flow/disparity."""
        f_j = _frame(0)
        f_k = Frame(1, _intr(baseline=0.5), se3_exp(np.array([0.0, 0.01, 0.0, 0.4, 0.0, 0.0])), np.zeros(6))
        pix = np.array([[55.0, 48.0], [40.0, 60.0]])
        origins, dirs = [], []
        for p in pix:
            r = cast_ray(f_j, p)
            origins.append(r.origin)
            dirs.append(r.direction)
        t = np.array([4.0, 5.0, 6.0, 4.5, 5.5])
        ray_id = np.array([0, 0, 0, 1, 1])
        samples = RaySamples(
            t=t, ray_id=ray_id, num_rays=2, far_cap=np.full(2, 20.0),
            origins=np.array(origins), dirs=np.array(dirs),
        )
        rng = np.random.default_rng(11)
        store = ParamStore()
        store.add("sdf_vals", rng.normal(scale=0.2, size=5), "grid")
        store.add("sharp_raw", np.array([np.log(20.0)]), "sharpness")
        pose = f_k.effective_pose()
        r_eff = pose.rotation_matrix()[None]
        t_eff = pose.translation[None]
        gt_flow = rng.normal(scale=2.0, size=(2, 2))
        fxb = np.full(2, f_k.intrinsics.fx * 0.5)

        def loss(params):
            tape = Tape()
            sdf = tape.param(params, "sdf_vals")
            sharp = ad.exp(tape.param(params, "sharp_raw"))
            alpha = sdf_to_alpha_packed(sdf, samples, sharp)
            w = composite_packed(alpha, samples)
            flow = render_flow_batch(samples, w, pix, np.zeros(2, dtype=int), r_eff, t_eff, f_j.intrinsics)
            disp = render_disparity_batch(samples, w, fxb)
            res = flow - gt_flow
            return ad.vsum(res * res) + ad.vsum(disp * disp) * 0.1

        err = ad.check_gradients(loss, store, h=1e-6, sample_count=6, seed=2)
        assert err < 1e-4
