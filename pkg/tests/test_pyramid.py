"""Pyramid decompositions: shapes, DC rejection, linearity, invertibility,
shift covariance, impulse responses vs an explicit filter oracle."""

import numpy as np
import pytest

from pim import pyramid


def reflect_correlate2d(img, kernel):
    """Reference correlation with reflect padding, float64 loops."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(img.astype(np.float64), ((ph, ph), (pw, pw)), mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = (xp[i:i + kh, j:j + kw] * kernel).sum()
    return out


BLUR_2D = np.outer([1, 4, 6, 4, 1], [1, 4, 6, 4, 1]) / 256.0
DX_2D = np.outer([1, 2, 1], [-1, 0, 1]) / 8.0   # smooth vertically, diff horizontally
DY_2D = DX_2D.T


class TestSteerable:
    def test_constant_image_rejected_by_band_levels(self):
        img = np.full((1, 3, 64, 64), 0.5, dtype=np.float32)
        pyr = pyramid.steerable_decompose(img)
        for level in pyr.levels[:4]:
            assert np.abs(level).max() < 1e-5
        # the DC content lands in the lowpass
        np.testing.assert_allclose(pyr.levels[4], 0.5, atol=1e-5)

    def test_level_extents_64(self, rng):
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        pyr = pyramid.steerable_decompose(img)
        extents = [lv.shape[2] for lv in pyr.levels]
        assert extents == [64, 64, 32, 16, 8]
        chans = [lv.shape[1] for lv in pyr.levels]
        assert chans == [3, 6, 6, 6, 3]
        assert pyr.factors == [1, 1, 2, 4, 8]

    def test_linearity(self, rng):
        x = rng.random((1, 3, 32, 32)).astype(np.float64)
        y = rng.random((1, 3, 32, 32)).astype(np.float64)
        a, b = 1.7, -0.6
        pa = pyramid.steerable_decompose(x)
        pb = pyramid.steerable_decompose(y)
        pc = pyramid.steerable_decompose(a * x + b * y)
        for la, lb, lc in zip(pa.levels, pb.levels, pc.levels):
            np.testing.assert_allclose(lc, a * la + b * lb, atol=1e-5)

    def test_impulse_response_matches_filter_oracle(self):
        """Full-resolution levels of a centered impulse equal explicit
        convolutions with the composed filters."""
        img = np.zeros((1, 1, 32, 32), dtype=np.float64)
        img[0, 0, 16, 16] = 1.0
        img3 = np.repeat(img, 3, axis=1)
        pyr = pyramid.steerable_decompose(img3)

        low0 = reflect_correlate2d(img[0, 0], BLUR_2D)
        high_ref = img[0, 0] - low0
        np.testing.assert_allclose(pyr.levels[0][0, 0], high_ref, atol=1e-6)
        np.testing.assert_allclose(pyr.levels[1][0, 0],
                                   reflect_correlate2d(low0, DX_2D), atol=1e-6)
        np.testing.assert_allclose(pyr.levels[1][0, 3],
                                   reflect_correlate2d(low0, DY_2D), atol=1e-6)

    def test_shift_covariance_full_resolution(self, rng):
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        shifted = np.roll(img, 4, axis=3)
        p0 = pyramid.steerable_decompose(img)
        p1 = pyramid.steerable_decompose(shifted)
        # interior comparison, boundary band excluded
        a = np.roll(p0.levels[0], 4, axis=3)[:, :, 8:-8, 8:-8]
        b = p1.levels[0][:, :, 8:-8, 8:-8]
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="at least 32"):
            pyramid.steerable_decompose(np.zeros((1, 3, 16, 16), dtype=np.float32))
        with pytest.raises(ValueError, match="divisible by 8"):
            pyramid.steerable_decompose(np.zeros((1, 3, 36, 36), dtype=np.float32))
        bad = np.zeros((1, 3, 32, 32), dtype=np.float32)
        bad[0, 0, 0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            pyramid.steerable_decompose(bad)


class TestLaplacian:
    def test_constant_image_gives_zero_details(self):
        img = np.full((1, 3, 64, 64), 0.25, dtype=np.float32)
        pyr = pyramid.laplacian_decompose(img)
        for level in pyr.levels[:4]:
            assert np.abs(level).max() == 0.0
        np.testing.assert_allclose(pyr.levels[4], 0.25, atol=1e-6)

    def test_level_extents_and_count(self, rng):
        img = rng.random((2, 3, 64, 64)).astype(np.float32)
        pyr = pyramid.laplacian_decompose(img)
        assert [lv.shape[2] for lv in pyr.levels] == [64, 32, 16, 8, 4]
        assert pyr.n_levels == 5

    def test_roundtrip_identity(self, rng):
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        rec = pyramid.laplacian_reconstruct(pyramid.laplacian_decompose(img))
        assert np.abs(rec - img).max() < 1e-5

    def test_roundtrip_psnr_on_textured_image(self, rng):
        from pim.data import make_scene
        img = make_scene(rng, 64)[None]
        rec = pyramid.laplacian_reconstruct(pyramid.laplacian_decompose(img))
        mse = float(np.mean((rec - img) ** 2))
        psnr = 10.0 * np.log10(1.0 / max(mse, 1e-30))
        assert psnr > 100.0

    def test_zero_pyramid_reconstructs_to_zero(self):
        img = np.zeros((1, 3, 32, 32), dtype=np.float32)
        pyr = pyramid.laplacian_decompose(img)
        rec = pyramid.laplacian_reconstruct(pyr)
        assert np.abs(rec).max() == 0.0

    def test_wrong_kind_rejected(self, rng):
        pyr = pyramid.steerable_decompose(rng.random((1, 3, 32, 32)).astype(np.float32))
        with pytest.raises(ValueError, match="steerable"):
            pyramid.laplacian_reconstruct(pyr)

    def test_two_scale_hand_computation_on_ramp(self):
        """blur/downsample/upsample chain vs a hand-rolled oracle on a ramp."""
        ramp = np.tile(np.linspace(0.0, 1.0, 16, dtype=np.float64), (16, 1))
        img = np.broadcast_to(ramp, (1, 3, 16, 16)).copy()

        def blur_1d_reflect(v, taps):
            p = len(taps) // 2
            vp = np.pad(v, p, mode="reflect")
            return np.array([(vp[i:i + len(taps)] * taps).sum() for i in range(len(v))])

        taps = np.array([1, 4, 6, 4, 1]) / 16.0
        ref_rows = np.stack([blur_1d_reflect(r, taps) for r in ramp])
        ref_blur = np.stack([blur_1d_reflect(c, taps) for c in ref_rows.T]).T
        got_blur = pyramid.blur(img)[0, 0]
        np.testing.assert_allclose(got_blur, ref_blur, atol=1e-10)

        small = ref_blur[::2, ::2]
        np.testing.assert_allclose(pyramid.downsample2(pyramid.blur(img))[0, 0],
                                   small, atol=1e-10)

        up_taps = 2.0 * taps
        z = np.zeros((16, 8))
        z[::2, :] = small
        up_rows = np.stack([blur_1d_reflect(c, up_taps) for c in z.T]).T
        z2 = np.zeros((16, 16))
        z2[:, ::2] = up_rows
        ref_up = np.stack([blur_1d_reflect(r, up_taps) for r in z2])
        got_up = pyramid.upsample2(small[None, None])[0, 0]
        np.testing.assert_allclose(got_up, ref_up, atol=1e-10)

        detail = img[0, 0] - ref_up
        energy_ref = float((detail ** 2).sum() + (small ** 2).sum())
        d0 = img[0, 0] - pyramid.upsample2(small[None, None])[0, 0]
        energy_got = float((d0 ** 2).sum() + (small ** 2).sum())
        assert energy_got == pytest.approx(energy_ref, rel=1e-12)


class TestHelpers:
    def test_scale_channels(self):
        assert pyramid.scale_channels("steerable") == [3, 6, 6, 6, 3]
        assert pyramid.scale_channels("laplacian") == [3, 3, 3, 3, 3]
        with pytest.raises(ValueError):
            pyramid.scale_channels("gabor")

    def test_level_extents(self):
        assert pyramid.level_extents("steerable", 64, 64) == \
            [(64, 64), (64, 64), (32, 32), (16, 16), (8, 8)]
        assert pyramid.level_extents("laplacian", 64, 64) == \
            [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]

    def test_decompose_dispatch(self, rng):
        img = rng.random((1, 3, 32, 32)).astype(np.float32)
        assert pyramid.decompose(img, "steerable").kind == "steerable"
        assert pyramid.decompose(img, "laplacian").kind == "laplacian"
        with pytest.raises(ValueError, match="unknown pyramid"):
            pyramid.decompose(img, "wavelet")
