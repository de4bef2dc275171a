import logging

import numpy as np
import pytest

from sparsegs.dataio import write_pfm
from sparsegs.exceptions import (
    DegenerateStatisticsError,
    MalformedFrameError,
    MissingPriorFileError,
    ProviderError,
    ProviderTimeoutError,
    ValidationError,
)
from sparsegs.priors import (
    DiffusionSchedule,
    FileDenoiser,
    FileDepthProvider,
    OracleDenoiser,
    OracleDepthProvider,
    SubprocessDenoiser,
    SubprocessDepthProvider,
    ZeroDenoiser,
    add_noise,
    add_noise_at,
    decode_frame,
    draw_noise,
    encode_frame,
    geo_loss,
    make_denoiser,
    make_depth_provider,
    minmax_normalize,
    pearson_corr,
    sds_residual,
)

from oracles import central_diff, pearson_reference, rel_err

# Stub that echoes the first frame of the request (i.e. the input image)
# back on stdout, exercising the full wire protocol.
ECHO_STUB = (
    "python3 -c \"import sys,struct;"
    "d=sys.stdin.buffer.read();(l,)=struct.unpack_from('<I',d,0);"
    "sys.stdout.buffer.write(d[:4+l])\""
)


class TestSchedule:
    def test_alpha_bar_strictly_decreasing(self):
        s = DiffusionSchedule()
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_default_schedule_reaches_deep_noise(self):
        s = DiffusionSchedule(n_steps=1000, beta_start=1e-4, beta_end=0.02)
        assert s.alpha_bar_at(1000) < 1e-4

    def test_alpha_bar_bounded(self):
        s = DiffusionSchedule(n_steps=50)
        assert np.all(s.alpha_bar > 0) and np.all(s.alpha_bar <= 1)

    def test_first_step(self):
        s = DiffusionSchedule(n_steps=10, beta_start=1e-4, beta_end=0.02)
        assert s.alpha_bar_at(1) == pytest.approx(1 - 1e-4, abs=1e-15)

    @pytest.mark.parametrize("t", [0, 1001, -3])
    def test_timestep_range_enforced(self, t):
        with pytest.raises(ValidationError):
            DiffusionSchedule().alpha_bar_at(t)

    def test_constructor_validation(self):
        with pytest.raises(ValidationError):
            DiffusionSchedule(n_steps=0)
        with pytest.raises(ValidationError):
            DiffusionSchedule(beta_start=0.0)
        with pytest.raises(ValidationError):
            DiffusionSchedule(beta_start=0.5, beta_end=0.1)
        with pytest.raises(ValidationError):
            DiffusionSchedule(beta_end=1.0)


class TestAddNoise:
    def test_no_noise_endpoint_exact(self, rng):
        img = rng.uniform(0, 1, (5, 4, 3))
        eps = rng.standard_normal(img.shape)
        out = add_noise(img, eps, 1.0)
        assert np.array_equal(out, img)
        assert out is not img                      # caller gets a fresh array

    def test_pure_noise_endpoint_exact(self, rng):
        img = rng.uniform(0, 1, (5, 4, 3)).astype(np.float32)
        eps = rng.standard_normal(img.shape)
        out = add_noise(img, eps, 0.0)
        assert np.array_equal(out, eps.astype(np.float32))
        assert out.dtype == np.float32

    def test_hand_evaluated_scalar(self):
        out = add_noise(np.array(0.8), np.array(0.2), 0.25)
        assert float(out) == pytest.approx(0.5732051, abs=1e-7)

    def test_mean_preserved_monte_carlo(self):
        # E[sqrt(ab)*c + sqrt(1-ab)*eps] = sqrt(ab)*c; check to 3 sigma.
        rng = np.random.default_rng(42)
        ab = 0.6
        c = 0.37
        n = 10_000
        draws = add_noise(np.full(n, c), rng.standard_normal(n), ab)
        want = np.sqrt(ab) * c
        sigma = np.sqrt(1 - ab) / np.sqrt(n)
        assert abs(draws.mean() - want) < 3 * sigma

    def test_alpha_bar_range_enforced(self):
        with pytest.raises(ValidationError):
            add_noise(np.zeros(3), np.zeros(3), -0.1)
        with pytest.raises(ValidationError):
            add_noise(np.zeros(3), np.zeros(3), 1.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            add_noise(np.zeros((4, 4, 3)), np.zeros((4, 4)), 0.5)

    def test_add_noise_at_uses_schedule(self, rng):
        sched = DiffusionSchedule(n_steps=10)
        img = rng.uniform(0, 1, (3, 3))
        draw = draw_noise(rng, img.shape, sched)
        a = add_noise_at(img, draw, sched)
        b = add_noise(img, draw.eps, sched.alpha_bar_at(draw.t))
        assert np.array_equal(a, b)


class TestDrawNoise:
    def test_timestep_within_schedule(self):
        sched = DiffusionSchedule(n_steps=7)
        rng = np.random.default_rng(0)
        ts = {draw_noise(rng, (2, 2), sched).t for _ in range(300)}
        assert min(ts) >= 1 and max(ts) <= 7
        assert len(ts) == 7                        # all steps reachable

    def test_shape_and_determinism(self):
        sched = DiffusionSchedule(n_steps=100)
        a = draw_noise(np.random.default_rng(5), (4, 6, 3), sched)
        b = draw_noise(np.random.default_rng(5), (4, 6, 3), sched)
        assert a.eps.shape == (4, 6, 3)
        assert a.t == b.t
        assert np.array_equal(a.eps, b.eps)


class TestSDSResidual:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_oracle_denoiser_zero_gradient_exact(self, dtype):
        sched = DiffusionSchedule()
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (8, 8, 3)).astype(dtype)
        for _ in range(5):
            draw = draw_noise(rng, img.shape, sched)
            res = sds_residual(img, OracleDenoiser(sched), sched, draw)
            assert res.loss == 0.0
            assert not res.residual.any()
            assert not res.grad_image.any()

    def test_zero_denoiser_loss_is_mean_squared_noise(self):
        sched = DiffusionSchedule()
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (6, 6, 3))
        draw = draw_noise(rng, img.shape, sched)
        res = sds_residual(img, ZeroDenoiser(), sched, draw)
        assert res.loss == pytest.approx(float(np.mean(draw.eps ** 2)), abs=1e-7)

    def test_gradient_magnitude_and_sign(self):
        sched = DiffusionSchedule()
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, (4, 4, 3))
        draw = draw_noise(rng, img.shape, sched)
        res = sds_residual(img, ZeroDenoiser(), sched, draw)
        ab = sched.alpha_bar_at(draw.t)
        want = np.sqrt(ab) / img.size * res.residual
        assert np.allclose(res.grad_image, want, atol=1e-15)

    def test_gradient_matches_fd_with_frozen_provider(self):
        # Stop-gradient convention: the denoiser output is a constant target,
        # so the differentiated quantity is sum(residual * noised)/n, whose
        # dependence on the image runs through the noising step alone.
        sched = DiffusionSchedule()
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, (5, 5, 3))
        draw = draw_noise(rng, img.shape, sched)
        res = sds_residual(img, ZeroDenoiser(), sched, draw)
        ab = sched.alpha_bar_at(draw.t)
        frozen = res.residual.copy()

        def surrogate(x):
            noised = add_noise(x, draw.eps, ab)
            return float(np.sum(frozen * noised) / x.size)

        want = central_diff(surrogate, img.copy(), h=1e-6)
        assert rel_err(res.grad_image, want, floor=1e-8) < 1e-4

    def test_mask_excludes_pixels_bit_exactly(self):
        sched = DiffusionSchedule()
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 1, (6, 6, 3))
        draw = draw_noise(rng, img.shape, sched)
        mask = np.zeros((6, 6))
        mask[2:4, 1:5] = 1
        res = sds_residual(img, ZeroDenoiser(), sched, draw, mask=mask)
        assert not res.grad_image[mask == 1].any()
        assert res.grad_image[mask == 0].any()

    def test_fully_masked_treated_as_zero(self, caplog):
        sched = DiffusionSchedule()
        rng = np.random.default_rng(8)
        img = rng.uniform(0, 1, (3, 3, 3))
        draw = draw_noise(rng, img.shape, sched)
        with caplog.at_level(logging.WARNING):
            res = sds_residual(img, ZeroDenoiser(), sched, draw,
                               mask=np.ones((3, 3)))
        assert res.loss == 0.0 and not res.grad_image.any() and res.degenerate
        assert any("unmasked" in r.message for r in caplog.records)

    def test_bad_provider_shape_rejected(self):
        class Bad:
            def predict_noise(self, noised, t, conditioning=None, draw=None):
                return np.zeros((2, 2))

        sched = DiffusionSchedule()
        rng = np.random.default_rng(9)
        img = rng.uniform(0, 1, (4, 4, 3))
        draw = draw_noise(rng, img.shape, sched)
        with pytest.raises(ProviderError):
            sds_residual(img, Bad(), sched, draw)


class TestPearson:
    def test_self_correlation_is_one(self, rng):
        d = rng.uniform(1, 5, (8, 8))
        assert pearson_corr(d, d) == pytest.approx(1.0, abs=1e-12)

    def test_positive_affine_invariance(self, rng):
        a = rng.uniform(0, 1, (10, 10))
        b = rng.uniform(0, 1, (10, 10))
        base = pearson_corr(a, b)
        assert pearson_corr(1.7 * a + 0.3, b) == pytest.approx(base, abs=1e-12)
        assert pearson_corr(a, 42.0 * b + 5.0) == pytest.approx(base, abs=1e-12)

    def test_power_of_two_scaling_exact(self, rng):
        # Scaling by 2 shifts every intermediate's exponent without touching
        # mantissas, so the correlation is reproduced bit for bit.
        a = rng.uniform(0, 1, (6, 6))
        b = rng.uniform(0, 1, (6, 6))
        assert pearson_corr(2.0 * a, b) == pearson_corr(a, b)

    def test_hand_computed_anticorrelation(self):
        r = pearson_corr(np.array([1.0, 2.0, 3.0, 4.0]),
                         np.array([4.0, 3.0, 2.0, 1.0]))
        assert r == -1.0

    def test_affine_example_from_definition(self, rng):
        d = rng.uniform(0, 3, (5, 5))
        assert pearson_corr(2.0 * d + 5.0, d) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry_exact(self, rng):
        a = rng.normal(size=30)
        b = rng.normal(size=30)
        assert pearson_corr(a, b) == pearson_corr(b, a)

    def test_bounded_on_random_pairs(self, rng):
        for _ in range(20):
            a = rng.normal(size=50)
            b = rng.normal(size=50)
            assert abs(pearson_corr(a, b)) <= 1.0 + 1e-12

    def test_reference_agreement(self, rng):
        for _ in range(5):
            a = rng.normal(size=(7, 7))
            b = rng.normal(size=(7, 7))
            assert pearson_corr(a, b) == pytest.approx(
                pearson_reference(a.ravel(), b.ravel()), abs=1e-12)

    def test_valid_mask_restricts_statistics(self, rng):
        a = rng.normal(size=(4, 4))
        b = a.copy()
        b[0, 0] = 100.0                            # poison one pixel
        valid = np.ones((4, 4), dtype=bool)
        valid[0, 0] = False
        assert pearson_corr(a, b, valid=valid) == pytest.approx(1.0, abs=1e-12)

    def test_too_few_valid_pixels(self):
        valid = np.zeros((3, 3), dtype=bool)
        valid[0, 0] = True
        with pytest.raises(DegenerateStatisticsError):
            pearson_corr(np.ones((3, 3)), np.ones((3, 3)), valid=valid)

    def test_zero_variance_rejected(self, rng):
        with pytest.raises(DegenerateStatisticsError):
            pearson_corr(np.full(9, 2.0), rng.normal(size=9))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            pearson_corr(np.zeros((3, 3)), np.zeros((4, 4)))


class TestMinmaxNormalize:
    def test_unit_range(self, rng):
        d = rng.uniform(3, 9, (5, 5))
        n = minmax_normalize(d)
        assert n.min() == 0.0 and n.max() == 1.0

    def test_constant_map_rejected(self):
        with pytest.raises(DegenerateStatisticsError):
            minmax_normalize(np.full((3, 3), 1.5))

    def test_valid_subset_defines_range(self):
        d = np.array([[0.0, 10.0], [2.0, 4.0]])
        valid = np.array([[False, False], [True, True]])
        n = minmax_normalize(d, valid)
        assert n[1, 0] == 0.0 and n[1, 1] == 1.0


class TestGeoLoss:
    def test_identical_maps_zero_loss_zero_grad(self, rng):
        d = rng.uniform(1, 4, (8, 8))
        res = geo_loss(d, d.copy())
        assert res.loss == pytest.approx(0.0, abs=1e-12)
        assert not res.grad.any()                  # (y-x̄)-(x-x̄) cancels exactly

    def test_anticorrelated_loss_two(self):
        res = geo_loss(np.array([[1.0, 2.0], [3.0, 4.0]]),
                       np.array([[4.0, 3.0], [2.0, 1.0]]))
        assert res.loss == 2.0
        assert res.corr == -1.0

    def test_gradient_matches_fd(self, rng):
        d = rng.uniform(0.5, 3.0, (8, 8))
        prior = rng.uniform(0.2, 2.0, (8, 8))
        res = geo_loss(d, prior)

        def loss(x):
            return geo_loss(x, prior).loss

        want = central_diff(loss, d.copy(), h=1e-6)
        assert rel_err(res.grad, want, floor=1e-6) < 1e-5

    def test_gradient_respects_valid_mask(self, rng):
        d = rng.uniform(0.5, 3.0, (6, 6))
        prior = rng.uniform(0.2, 2.0, (6, 6))
        valid = rng.uniform(size=(6, 6)) > 0.3
        res = geo_loss(d, prior, valid=valid)
        assert not res.grad[~valid].any()

        def loss(x):
            return geo_loss(x, prior, valid=valid).loss

        want = central_diff(loss, d.copy(), h=1e-6)
        assert rel_err(res.grad, want, floor=1e-6) < 1e-5

    def test_affine_warped_prior_same_loss(self, rng):
        d = rng.uniform(0.5, 3.0, (7, 7))
        prior = rng.uniform(0.2, 2.0, (7, 7))
        a = geo_loss(d, prior)
        b = geo_loss(d, 3.0 * prior + 1.0)
        assert b.loss == pytest.approx(a.loss, abs=1e-12)
        assert np.allclose(a.grad, b.grad, atol=1e-12)

    def test_degenerate_statistics_zeroed_and_logged(self, caplog, rng):
        with caplog.at_level(logging.WARNING):
            res = geo_loss(np.full((4, 4), 2.0), rng.uniform(size=(4, 4)))
        assert res.loss == 0.0 and not res.grad.any() and res.degenerate
        assert any("degenerate" in r.message for r in caplog.records)


class TestFrameProtocol:
    def test_roundtrip_2d_bit_exact(self, rng):
        arr = rng.uniform(-5, 5, (3, 7)).astype(np.float32)
        out, off = decode_frame(encode_frame(arr))
        assert np.array_equal(out, arr)
        assert off == len(encode_frame(arr))

    def test_roundtrip_3d_bit_exact(self, rng):
        arr = rng.uniform(0, 1, (4, 5, 3)).astype(np.float32)
        out, _ = decode_frame(encode_frame(arr))
        assert np.array_equal(out, arr)

    def test_truncated_length_prefix(self):
        with pytest.raises(MalformedFrameError):
            decode_frame(b"\x01\x02")

    def test_truncated_payload(self, rng):
        buf = encode_frame(rng.uniform(size=(2, 2)).astype(np.float32))
        with pytest.raises(MalformedFrameError):
            decode_frame(buf[:-3])

    def test_bad_magic(self, rng):
        buf = bytearray(encode_frame(rng.uniform(size=(2, 2)).astype(np.float32)))
        buf[4:9] = b"WRONG"
        with pytest.raises(MalformedFrameError):
            decode_frame(bytes(buf))

    def test_payload_size_mismatch(self):
        import struct
        body = b"ESPR1" + struct.pack("<III", 2, 2, 1) + b"\x00" * 8   # 8 != 16
        with pytest.raises(MalformedFrameError):
            decode_frame(struct.pack("<I", len(body)) + body)


class TestFileProviders:
    def test_file_depth_two_by_two_bit_exact(self, tmp_path):
        arr = np.array([[0.25, 1.5], [-3.0, 7.0]], dtype=np.float32)
        write_pfm(tmp_path / "depth_0002.pfm", arr)
        prov = FileDepthProvider(tmp_path)

        class V:
            view_id = 2

        assert np.array_equal(prov.predict_depth(None, V()), arr)

    def test_file_depth_missing(self, tmp_path):
        class V:
            view_id = 9

        with pytest.raises(MissingPriorFileError):
            FileDepthProvider(tmp_path).predict_depth(None, V())

    def test_file_depth_requires_view_id(self, tmp_path):
        class V:
            view_id = None

        with pytest.raises(ProviderError):
            FileDepthProvider(tmp_path).predict_depth(None, V())

    def test_file_denoiser_roundtrip(self, tmp_path, rng):
        arr = rng.standard_normal((4, 4, 3)).astype(np.float32)
        write_pfm(tmp_path / "noise_t0042.pfm", arr)
        got = FileDenoiser(tmp_path).predict_noise(np.zeros((4, 4, 3)), 42)
        assert np.array_equal(got, arr)

    def test_file_denoiser_missing(self, tmp_path):
        with pytest.raises(MissingPriorFileError):
            FileDenoiser(tmp_path).predict_noise(np.zeros((2, 2)), 7)


class TestSubprocessProviders:
    def test_echo_stub_returns_image_unchanged(self, rng):
        img = rng.uniform(0, 1, (5, 6, 3)).astype(np.float32)
        prov = SubprocessDepthProvider(ECHO_STUB, timeout=20.0)
        got = prov.predict_depth(img, None)
        assert np.array_equal(got, img)

    def test_echo_stub_denoiser_with_conditioning(self, rng):
        noised = rng.uniform(0, 1, (3, 4, 3)).astype(np.float32)
        prov = SubprocessDenoiser(ECHO_STUB, timeout=20.0)
        got = prov.predict_noise(noised, 17, conditioning=np.ones_like(noised))
        assert np.array_equal(got, noised)

    def test_timeout_is_distinct_error(self):
        prov = SubprocessDepthProvider("sleep 5", timeout=0.3)
        with pytest.raises(ProviderTimeoutError):
            prov.predict_depth(np.zeros((2, 2), dtype=np.float32), None)

    def test_nonzero_exit_is_provider_error(self):
        prov = SubprocessDepthProvider("python3 -c \"import sys; sys.exit(3)\"")
        with pytest.raises(ProviderError) as ei:
            prov.predict_depth(np.zeros((2, 2), dtype=np.float32), None)
        assert "3" in str(ei.value)

    def test_garbage_output_is_malformed_frame(self):
        prov = SubprocessDepthProvider(
            "python3 -c \"import sys; sys.stdout.buffer.write(b'XY')\"")
        with pytest.raises(MalformedFrameError):
            prov.predict_depth(np.zeros((2, 2), dtype=np.float32), None)

    def test_unlaunchable_command(self):
        prov = SubprocessDepthProvider("/no/such/binary-xyz")
        with pytest.raises(ProviderError):
            prov.predict_depth(np.zeros((2, 2), dtype=np.float32), None)


class TestOracleDepth:
    class FakeScene:
        def __init__(self, depth):
            self.depth = depth

        def render_depth(self, view):
            return self.depth.copy()

    def test_returns_scene_depth(self, rng):
        d = rng.uniform(1, 3, (4, 4))
        prov = OracleDepthProvider(self.FakeScene(d))
        assert np.array_equal(prov.predict_depth(None, None), d)

    def test_affine_warp_applied(self, rng):
        d = rng.uniform(1, 3, (4, 4))
        prov = OracleDepthProvider(self.FakeScene(d), warp=(2.0, -1.0))
        assert np.allclose(prov.predict_depth(None, None), 2.0 * d - 1.0)


class TestProviderFactories:
    def test_denoiser_dispatch(self, tmp_path):
        sched = DiffusionSchedule()
        assert isinstance(make_denoiser("oracle", sched), OracleDenoiser)
        assert isinstance(make_denoiser("zero", sched), ZeroDenoiser)
        assert isinstance(make_denoiser(f"file:{tmp_path}", sched), FileDenoiser)
        assert isinstance(make_denoiser("subprocess:cat", sched), SubprocessDenoiser)
        with pytest.raises(ValidationError):
            make_denoiser("nonsense", sched)

    def test_depth_dispatch(self, tmp_path):
        scene = TestOracleDepth.FakeScene(np.ones((2, 2)))
        assert isinstance(make_depth_provider("oracle", scene), OracleDepthProvider)
        assert isinstance(make_depth_provider(f"file:{tmp_path}"), FileDepthProvider)
        assert isinstance(make_depth_provider("subprocess:cat"), SubprocessDepthProvider)
        with pytest.raises(ValidationError):
            make_depth_provider("oracle")          # oracle needs the scene
        with pytest.raises(ValidationError):
            make_depth_provider("bogus")
