import numpy as np
import pytest

from sparsegs.exceptions import MissingIntermediatesError, RenderError
from sparsegs.rasterizer import (
    RenderSettings,
    blend_pixel,
    project,
    render,
    render_backward,
)
from sparsegs.scene import CameraView, GaussianCloud, look_at_w2c

from conftest import make_cloud, make_view
from oracles import blend_reference, brute_render, central_diff, rel_err


def logit(p):
    return float(np.log(p / (1.0 - p)))


def single_gaussian_cloud(position=(0.0, 0.0, 0.0), scale=0.3, opacity=0.9,
                          dc=(0.5, 0.0, -0.2)):
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = dc
    return GaussianCloud(np.array([position]), np.array([[1.0, 0.0, 0.0, 0.0]]),
                         np.log(scale) * np.ones((1, 3)),
                         np.array([logit(opacity)]), sh, 0)


def axis_view(width=16, height=16, z=4.0, f=24.0):
    """Camera at -z distance on the world y-axis? No: use canonical w2c=identity
    shifted so the origin sits at camera-space depth z, optical axis through
    the principal point."""
    w2c = np.eye(4)
    w2c[2, 3] = z
    return CameraView(width=width, height=height, fx=f, fy=f,
                      cx=width / 2.0, cy=height / 2.0, w2c=w2c)


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

class TestProject:
    def test_on_axis_hits_principal_point(self):
        view = axis_view()
        out = project(single_gaussian_cloud(), view)
        assert len(out) == 1
        np.testing.assert_allclose(out[0].mean2d, [view.cx, view.cy], atol=1e-12)
        assert abs(out[0].depth - 4.0) < 1e-12

    def test_on_axis_isotropic_cov2d(self):
        sigma, z, f = 0.3, 4.0, 24.0
        out = project(single_gaussian_cloud(scale=sigma), axis_view(z=z, f=f))
        want = (f * sigma / z) ** 2
        np.testing.assert_allclose(out[0].cov2d,
                                   np.diag([want + 0.3, want + 0.3]), atol=1e-9)

    def test_behind_camera_culled(self):
        cloud = single_gaussian_cloud(position=(0.0, 0.0, -5.0))  # camera-z = -1
        assert project(cloud, axis_view(z=4.0)) == []
        # z exactly at the near plane is culled too
        cloud2 = single_gaussian_cloud(position=(0.0, 0.0, -3.99))
        assert project(cloud2, axis_view(z=4.0)) == []

    def test_sorted_by_depth_with_stable_ties(self):
        pos = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.1, 0.0, 1.0]])
        cloud = GaussianCloud(pos, np.tile([1.0, 0, 0, 0], (3, 1)),
                              np.full((3, 3), np.log(0.2)), np.zeros(3),
                              np.zeros((3, 1, 3)), 0)
        out = project(cloud, axis_view(z=4.0))
        depths = [g.depth for g in out]
        assert depths == sorted(depths)
        # equal depth -> original index order preserved
        assert [g.index for g in out if abs(g.depth - 5.0) < 1e-9] == [0, 2]

    def test_empty_cloud(self):
        cloud = GaussianCloud.from_primitives([], sh_degree=0)
        assert project(cloud, axis_view()) == []


# --------------------------------------------------------------------------
# pixel blend
# --------------------------------------------------------------------------

class TestBlendPixel:
    def test_single_contributor(self):
        color, depth, accum = blend_pixel([(np.array([1.0, 0, 0]), 0.5, 3.0)])
        np.testing.assert_allclose(color, [0.5, 0.0, 0.0], atol=1e-15)
        assert abs(depth - 1.5) < 1e-15
        assert abs(accum - 0.5) < 1e-15

    def test_two_contributors(self):
        contributors = [(np.array([1.0, 0, 0]), 0.5, 2.0),
                        (np.array([0.0, 1, 0]), 0.5, 4.0)]
        color, depth, accum = blend_pixel(contributors)
        np.testing.assert_allclose(color, [0.5, 0.25, 0.0], atol=1e-15)
        assert abs(depth - 2.0) < 1e-15
        assert abs(accum - 0.75) < 1e-15

    def test_empty(self):
        color, depth, accum = blend_pixel([])
        assert np.all(color == 0) and depth == 0 and accum == 0

    def test_matches_reference_sequence(self, rng):
        contributors = [(rng.random(3), float(rng.uniform(0, 0.9)),
                         float(rng.uniform(1, 5))) for _ in range(12)]
        got = blend_pixel(contributors, stop_transmittance=0.0)
        want = blend_reference(contributors)
        np.testing.assert_allclose(got[0], want[0], atol=1e-14)
        assert abs(got[1] - want[1]) < 1e-14
        assert abs(got[2] - want[2]) < 1e-14

    def test_early_stop(self):
        contributors = [(np.ones(3), 0.99, 1.0)] * 5 + [(np.ones(3) * 100, 0.9, 1.0)]
        color, _, accum = blend_pixel(contributors)
        # transmittance after 5 x 0.99 is 1e-10 < 1e-4: last huge color ignored
        assert np.all(color <= 1.0)


# --------------------------------------------------------------------------
# forward render
# --------------------------------------------------------------------------

class TestRenderForward:
    def test_empty_cloud_renders_zero(self):
        cloud = GaussianCloud.from_primitives([], sh_degree=0)
        out = render(cloud, make_view(), dtype=np.float64)
        assert not np.any(out.color) and not np.any(out.depth)
        assert not np.any(out.accum_alpha)
        np.testing.assert_array_equal(out.transmittance, np.ones((16, 16)))

    def test_single_opaque_center_depth(self):
        cloud = single_gaussian_cloud(scale=1.5, opacity=0.999)
        view = axis_view(z=4.0)
        out = render(cloud, view, dtype=np.float64)
        cy, cx = view.height // 2, view.width // 2
        assert out.accum_alpha[cy, cx] > 0.5
        assert abs(out.depth_norm[cy, cx] - 4.0) < 1e-6

    def test_coplanar_scene_normalized_depth(self, rng):
        # world z=-1 with the camera 4 units back: camera-z is 3 for all of
        # them, so alpha-normalized depth must be exactly 3
        n = 8
        pos = np.column_stack([rng.uniform(-0.5, 0.5, (n, 2)), np.full(n, -1.0)])
        cloud = GaussianCloud(pos, rng.normal(0, 1, (n, 4)),
                              np.full((n, 3), np.log(0.3)),
                              rng.uniform(0.0, 2.0, n), 0.2 * rng.normal(0, 1, (n, 1, 3)), 0)
        out = render(cloud, axis_view(z=4.0), dtype=np.float64)
        sel = out.accum_alpha > 0.5
        assert np.any(sel)
        assert np.max(np.abs(out.depth_norm[sel] - 3.0)) < 1e-6

    def test_accum_plus_transmittance_is_one(self, rng):
        cloud = make_cloud(15, seed=4)
        out = render(cloud, make_view(), dtype=np.float64)
        np.testing.assert_allclose(out.accum_alpha + out.transmittance, 1.0,
                                   atol=1e-12)

    def test_tiling_self_consistency_bit_exact(self):
        cloud = make_cloud(20, seed=9, sh_degree=2)
        view = make_view(width=33, height=17)   # non-multiple of both tilings
        small = render(cloud, view, dtype=np.float64,
                       settings=RenderSettings(tile_size=16))
        whole = render(cloud, view, dtype=np.float64,
                       settings=RenderSettings(tile_size=64))
        assert np.array_equal(small.color, whole.color)
        assert np.array_equal(small.depth, whole.depth)
        assert np.array_equal(small.accum_alpha, whole.accum_alpha)

    def test_thread_count_bit_exact(self):
        cloud = make_cloud(20, seed=10)
        view = make_view(width=48, height=48)
        a = render(cloud, view, dtype=np.float64,
                   settings=RenderSettings(threads=1))
        b = render(cloud, view, dtype=np.float64,
                   settings=RenderSettings(threads=4))
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)

    def test_two_renders_bit_identical(self):
        cloud = make_cloud(12, seed=5)
        view = make_view()
        a = render(cloud, view, dtype=np.float64)
        b = render(cloud, view, dtype=np.float64)
        assert np.array_equal(a.color, b.color)

    def test_saving_intermediates_does_not_change_outputs(self):
        # The plain render drops stopped pixels from the working set; the
        # intermediate-keeping render holds every pixel resident.  Both must
        # blend to the same bits.  Opacities are pushed high so plenty of
        # pixels actually stop and the two traversals genuinely diverge.
        cloud = make_cloud(60, seed=21, sh_degree=2, spread=0.5)
        cloud.opacities[:] = np.linspace(2.5, 4.0, len(cloud))
        view = make_view(width=40, height=56)
        plain = render(cloud, view, dtype=np.float32)
        assert (plain.transmittance < 1e-4).any()   # early stop engaged
        kept = render(cloud, view, dtype=np.float32, save_ctx=True)
        assert np.array_equal(plain.color, kept.color)
        assert np.array_equal(plain.depth, kept.depth)
        assert np.array_equal(plain.depth_norm, kept.depth_norm)
        assert np.array_equal(plain.accum_alpha, kept.accum_alpha)
        assert np.array_equal(plain.transmittance, kept.transmittance)

    def test_brute_force_oracle_agreement(self):
        for seed in (0, 1, 2):
            cloud = make_cloud(10, seed=seed, sh_degree=1)
            view = make_view(azimuth=0.7 * seed)
            got = render(cloud, view, dtype=np.float64)
            want = brute_render(cloud, view)
            # precondition for exact agreement: early stop never engaged
            assert np.min(got.transmittance) >= 1e-4
            assert np.max(np.abs(got.color - want["color"])) < 1e-6
            assert np.max(np.abs(got.depth - want["depth_raw"])) < 1e-6
            assert np.max(np.abs(got.accum_alpha - want["accum"])) < 1e-6

    def test_output_color_clamped(self):
        sh = np.zeros((1, 1, 3))
        sh[0, 0] = [30.0, 30.0, 30.0]      # overdriven DC
        cloud = GaussianCloud(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]),
                              np.log(1.0) * np.ones((1, 3)), np.array([3.0]), sh, 0)
        out = render(cloud, axis_view(), dtype=np.float64)
        assert np.max(out.color) <= 1.0

    def test_nonfinite_attribute_names_primitive(self):
        cloud = make_cloud(4, seed=1)
        cloud.positions[2, 1] = np.nan
        with pytest.raises(RenderError) as ei:
            render(cloud, make_view())
        assert ei.value.details["index"] == 2


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def _loss_and_grads(cloud, view, wc, wd, settings=None):
    """Scalar loss sum(wc*color) + sum(wd*depth_norm) and its param grads."""
    out = render(cloud, view, dtype=np.float64, settings=settings, save_ctx=True)
    loss = float(np.sum(out.color * wc) + np.sum(out.depth_norm * wd))
    grads = render_backward(out.ctx, grad_color=wc, grad_depth_norm=wd)
    return loss, grads


def _fd_param(cloud, view, wc, wd, name, h=1e-4, settings=None):
    base = cloud.params()[name]

    def f(x):
        c = cloud.copy()
        c.params()[name][...] = x
        out = render(c, view, dtype=np.float64, settings=settings)
        return float(np.sum(out.color * wc) + np.sum(out.depth_norm * wd))

    return central_diff(f, base.copy(), h=h)


class TestRenderBackward:
    def test_zero_grad_field_gives_zero_grads(self):
        cloud = make_cloud(6, seed=2)
        out = render(cloud, make_view(), dtype=np.float64, save_ctx=True)
        g = render_backward(out.ctx, grad_color=np.zeros((16, 16, 3)))
        for arr in (g.positions, g.rotations, g.log_scales, g.opacities, g.sh):
            assert not np.any(arr)

    def test_missing_context_raises(self):
        with pytest.raises(MissingIntermediatesError):
            render_backward(None, grad_color=np.zeros((4, 4, 3)))
        cloud = make_cloud(2)
        out = render(cloud, make_view())        # save_ctx defaults to False
        assert out.ctx is None

    def test_single_gaussian_color_grad_fd(self, rng):
        cloud = make_cloud(1, seed=7)
        view = make_view()
        wc = np.zeros((16, 16, 3))
        wc[8, 7, 0] = 1.0                      # one pixel, red channel
        _, grads = _loss_and_grads(cloud, view, wc, np.zeros((16, 16)))
        fd = _fd_param(cloud, view, wc, np.zeros((16, 16)), "sh")
        assert rel_err(grads.sh, fd, floor=1e-6) < 1e-4

    def test_depth_only_two_stacked_gaussians(self):
        pos = np.array([[0.05, 0.0, -0.5], [-0.05, 0.0, 0.5]])
        cloud = GaussianCloud(pos, np.tile([1.0, 0, 0, 0], (2, 1)),
                              np.full((2, 3), np.log(0.35)),
                              np.array([0.5, 0.5]), np.zeros((2, 1, 3)), 0)
        view = axis_view(z=4.0)
        wd = np.ones((16, 16))
        _, grads = _loss_and_grads(cloud, view, np.zeros((16, 16, 3)), wd)
        fd = _fd_param(cloud, view, np.zeros((16, 16, 3)), wd, "positions")
        assert rel_err(grads.positions, fd, floor=1e-5) < 1e-4

    @pytest.mark.parametrize("name,tol", [
        ("positions", 1e-4), ("rotations", 1e-4), ("log_scales", 1e-4),
        ("opacities", 1e-4), ("sh", 1e-4),
    ])
    def test_fd_all_attributes_random_scene(self, name, tol, rng):
        cloud = make_cloud(8, seed=12, sh_degree=1)
        view = make_view()
        wc = rng.normal(0.0, 1.0, (16, 16, 3))
        wd = 0.1 * rng.normal(0.0, 1.0, (16, 16))
        _, grads = _loss_and_grads(cloud, view, wc, wd)
        fd = _fd_param(cloud, view, wc, wd, name)
        assert rel_err(getattr(grads, name), fd, floor=1e-5) < tol

    def test_grad_accum_route(self, rng):
        cloud = make_cloud(5, seed=3)
        view = make_view()
        wa = rng.normal(0.0, 1.0, (16, 16))
        out = render(cloud, view, dtype=np.float64, save_ctx=True)
        grads = render_backward(out.ctx, grad_accum=wa)

        def f(x):
            c = cloud.copy()
            c.opacities[...] = x
            o = render(c, view, dtype=np.float64)
            return float(np.sum(o.accum_alpha * wa))

        fd = central_diff(f, cloud.opacities.copy())
        assert rel_err(grads.opacities, fd, floor=1e-6) < 1e-4

    def test_visibility_flags(self):
        pos = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -10.0]])  # second behind cam
        cloud = GaussianCloud(pos, np.tile([1.0, 0, 0, 0], (2, 1)),
                              np.full((2, 3), np.log(0.3)), np.zeros(2),
                              np.zeros((2, 1, 3)), 0)
        out = render(cloud, axis_view(z=4.0), dtype=np.float64, save_ctx=True)
        g = render_backward(out.ctx, grad_color=np.ones((16, 16, 3)))
        assert g.visible[0] and not g.visible[1]

    def test_backward_threads_bit_exact(self, rng):
        cloud = make_cloud(15, seed=21)
        view = make_view(width=48, height=48)
        wc = rng.normal(0.0, 1.0, (48, 48, 3))
        for threads in (1, 4):
            out = render(cloud, view, dtype=np.float64, save_ctx=True,
                         settings=RenderSettings(threads=threads))
            g = render_backward(out.ctx, grad_color=wc)
            if threads == 1:
                ref = g
        assert np.array_equal(ref.positions, g.positions)
        assert np.array_equal(ref.sh, g.sh)
