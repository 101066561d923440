"""Encoder architecture: shapes, hand-composed oracles, initialization,
equivariance and parameter-sharing properties."""

import numpy as np
import pytest
from conftest import tiny_params

from pim import encoders
from pim.autodiff import Tensor
from pim.encoders import (Architecture, ModelParameters, frontend, frontend_cropped,
                          full_encode, init_parameters, marginal_encode)
from pim.objective import center_crop_aligned


@pytest.fixture(scope="module")
def small_params():
    return init_parameters(7, Architecture(cnn_depth=2))


class TestArchitecture:
    def test_describe_roundtrip(self):
        arch = Architecture(pyramid_kind="laplacian", cnn_depth=3, components=1)
        back = Architecture.from_description(arch.describe())
        assert back == arch

    def test_validation(self):
        with pytest.raises(ValueError):
            Architecture(pyramid_kind="dct")
        with pytest.raises(ValueError):
            Architecture(components=0)


class TestFrontend:
    def test_output_shapes_follow_pyramid_layout(self, small_params, rng):
        img = rng.random((2, 3, 64, 64)).astype(np.float32)
        feats = frontend(img, small_params)
        assert len(feats) == 5
        assert [f.shape for f in feats] == [
            (2, 3, 64, 64), (2, 3, 64, 64), (2, 3, 32, 32), (2, 3, 16, 16), (2, 3, 8, 8)]

    def test_zero_parameters_give_zero_features(self, rng):
        params = init_parameters(0, Architecture(cnn_depth=2))
        for layers in params.theta:
            for layer in layers:
                layer.weight.data[:] = 0.0
                layer.bias.data[:] = 0.0
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        feats = frontend(img, params)
        for f in feats:
            assert np.abs(f.data).max() == 0.0

    def test_single_location_matches_hand_composed_conv(self, rng):
        """One frontend scale vs an oracle composed directly from numpy."""
        params = tiny_params(rng, chans=3, depth=2)
        x = rng.standard_normal((1, 3, 12, 12)).astype(np.float32)
        crops = [(x, "same")]
        feats = encoders.frontend_from_crops(crops, params, 12)
        w1 = params.theta[0][0].weight.data.astype(np.float64)
        b1 = params.theta[0][0].bias.data.astype(np.float64)
        w2 = params.theta[0][1].weight.data.astype(np.float64)
        b2 = params.theta[0][1].bias.data.astype(np.float64)

        from test_autodiff import conv2d_loop_oracle
        h = conv2d_loop_oracle(x, w1, padding="same") + b1[None]
        h = np.maximum(h, 0.0)
        ref = conv2d_loop_oracle(h, w2, padding="same") + b2[None]
        np.testing.assert_allclose(feats[0].data, ref, atol=1e-4)


class TestMarginalEncoder:
    def test_weights_form_simplex(self, small_params, rng):
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        field = marginal_encode(frontend(img, small_params), small_params)
        for w in field.weights:
            s = w.data.sum(axis=1)
            np.testing.assert_allclose(s, 1.0, atol=1e-5)
            assert (w.data >= 0).all()

    def test_zero_head_gives_uniform_weights_and_zero_means(self, rng):
        params = init_parameters(3, Architecture(cnn_depth=2))
        for layers in params.phi:
            layers[-1].weight.data[:] = 0.0
            layers[-1].bias.data[:] = 0.0
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        field = marginal_encode(frontend(img, params), params)
        for w, mu in zip(field.weights, field.means):
            np.testing.assert_allclose(w.data, 0.2, atol=1e-6)
            assert np.abs(mu.data).max() == 0.0

    def test_single_location_matches_mlp_oracle(self, rng):
        params = tiny_params(rng, components=2, latent=2, head=4)
        f = rng.standard_normal((1, 3, 1, 1)).astype(np.float32)
        field = marginal_encode([Tensor(f)], params)

        def lin(w, b, v):
            return w.data.reshape(w.shape[0], -1).astype(np.float64) @ v + \
                b.data.ravel().astype(np.float64)

        l0, l1, l2 = params.phi[0]
        v = f.ravel().astype(np.float64)
        h = np.maximum(lin(l0.weight, l0.bias, v), 0.0)
        h = np.maximum(lin(l1.weight, l1.bias, h), 0.0)
        out = lin(l2.weight, l2.bias, h)
        logits, means = out[:2], out[2:]
        ref_w = np.exp(logits - logits.max())
        ref_w /= ref_w.sum()
        np.testing.assert_allclose(field.weights[0].data[0, :, 0, 0], ref_w, atol=1e-5)
        np.testing.assert_allclose(field.means[0].data[0].ravel(), means, atol=1e-5)

    def test_swapping_inputs_swaps_encodings_exactly(self, small_params, rng):
        x = rng.random((1, 3, 64, 64)).astype(np.float32)
        y = rng.random((1, 3, 64, 64)).astype(np.float32)
        qx = marginal_encode(frontend(x, small_params), small_params)
        qy = marginal_encode(frontend(y, small_params), small_params)
        qx2 = marginal_encode(frontend(y, small_params), small_params)
        qy2 = marginal_encode(frontend(x, small_params), small_params)
        for a, b in zip(qx.weights, qy2.weights):
            assert (a.data == b.data).all()
        for a, b in zip(qy.means, qx2.means):
            assert (a.data == b.data).all()


class TestFullEncoder:
    def test_affine_identity_start_ignores_y(self, rng):
        params = init_parameters(11, Architecture(cnn_depth=2))
        x = rng.random((1, 3, 64, 64)).astype(np.float32)
        y1 = rng.random((1, 3, 64, 64)).astype(np.float32)
        y2 = rng.random((1, 3, 64, 64)).astype(np.float32)
        fx = frontend(x, params)
        m1 = full_encode(fx, frontend(y1, params), params)
        m2 = full_encode(fx, frontend(y2, params), params)
        for a, b in zip(m1.means, m2.means):
            assert (a.data == b.data).all()

    def test_output_shapes(self, small_params, rng):
        img = rng.random((2, 3, 64, 64)).astype(np.float32)
        fx = frontend(img, small_params)
        field = full_encode(fx, fx, small_params)
        assert [m.shape for m in field.means] == [
            (2, 10, 64, 64), (2, 10, 64, 64), (2, 10, 32, 32),
            (2, 10, 16, 16), (2, 10, 8, 8)]

    def test_single_location_matches_oracle_with_affine(self, rng):
        params = tiny_params(rng, latent=2, full=3)
        fe = params.psi[0]
        # break the identity start so the affine path is exercised
        fe.y_layer.weight.data[:] = rng.standard_normal(fe.y_layer.weight.shape) * 0.3
        fx = rng.standard_normal((1, 3, 1, 1)).astype(np.float32)
        fy = rng.standard_normal((1, 3, 1, 1)).astype(np.float32)
        out = full_encode([Tensor(fx)], [Tensor(fy)], params)

        def lin(layer, v):
            return layer.weight.data.reshape(layer.weight.shape[0], -1).astype(np.float64) \
                @ v + layer.bias.data.ravel().astype(np.float64)

        h = np.maximum(lin(fe.x_layers[0], fx.ravel().astype(np.float64)), 0.0)
        h = np.maximum(lin(fe.x_layers[1], h), 0.0)
        yo = lin(fe.y_layer, fy.ravel().astype(np.float64))
        a = h * yo[:3] + yo[3:]
        ref = lin(fe.x_layers[2], a)
        np.testing.assert_allclose(out.means[0].data[0, :, 0, 0], ref, atol=1e-5)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_parameters(42, Architecture())
        b = init_parameters(42, Architecture())
        for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb
            assert (ta.data == tb.data).all()

    def test_different_seeds_differ(self):
        a = init_parameters(1, Architecture())
        b = init_parameters(2, Architecture())
        diffs = [np.abs(ta.data - tb.data).max()
                 for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors())]
        assert max(diffs) > 0.0

    def test_parameter_count_closed_form(self):
        arch = Architecture()  # steerable, depth 4
        params = init_parameters(0, arch)

        def conv_count(cin, cout, k):
            return cout * cin * k * k + cout

        expected = 0
        for cin in [3, 6, 6, 6, 3]:  # theta
            chain = [cin, 64, 64, 64]
            for a, b in zip(chain, chain[1:]):
                expected += conv_count(a, b, 5)
            expected += conv_count(64, 3, 5)
        for _ in range(5):  # phi
            expected += conv_count(3, 50, 1) + conv_count(50, 50, 1) \
                + conv_count(50, 55, 1)
        for _ in range(5):  # psi
            expected += conv_count(3, 10, 1) + conv_count(10, 10, 1) \
                + conv_count(10, 10, 1) + conv_count(3, 20, 1)
        assert params.parameter_count() == expected

    def test_affine_branch_starts_at_identity(self):
        params = init_parameters(5, Architecture())
        for fe in params.psi:
            assert np.abs(fe.y_layer.weight.data).max() == 0.0
            b = fe.y_layer.bias.data.ravel()
            np.testing.assert_array_equal(b[:10], 1.0)
            np.testing.assert_array_equal(b[10:], 0.0)


class TestStructure:
    def test_scale_independence_of_marginal_heads(self, rng):
        params = init_parameters(9, Architecture(cnn_depth=2))
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        feats = frontend(img, params)
        before = marginal_encode(feats, params)
        params.phi[2][0].weight.data += 0.5
        after = marginal_encode(feats, params)
        for s in range(5):
            same = (before.means[s].data == after.means[s].data).all()
            assert same == (s != 2)

    def test_translation_equivariance_by_one_lowpass_stride(self):
        """An 8-pixel input shift moves each scale by 8/factor, interior."""
        rng = np.random.default_rng(5)
        params = init_parameters(3, Architecture())
        canvas = rng.random((1, 3, 256, 264)).astype(np.float32)
        xa = canvas[:, :, :, 0:256]
        xb = canvas[:, :, :, 8:264]
        fa = frontend(xa, params)
        fb = frontend(xb, params)
        factors = [1, 1, 2, 4, 8]
        for s, f in enumerate(factors):
            shift = 8 // f
            a = fa[s].data[:, :, :, shift:]
            b = fb[s].data[:, :, :, :a.shape[3]]
            m = 14  # clear of both crops' boundary effects
            inner_a = a[:, :, m:-m, m:-m]
            inner_b = b[:, :, m:-m, m:-m]
            assert inner_a.size > 0
            np.testing.assert_allclose(inner_a, inner_b, atol=1e-4)


class TestCroppedFrontend:
    @pytest.mark.parametrize("kind,depth", [("steerable", 4), ("steerable", 3),
                                            ("steerable", 2), ("laplacian", 3)])
    def test_fused_path_equals_crop_of_full_frontend(self, rng, kind, depth):
        params = init_parameters(21, Architecture(pyramid_kind=kind, cnn_depth=depth))
        img = rng.random((2, 3, 64, 64)).astype(np.float32)
        size = 8 if kind == "steerable" else 4
        full = center_crop_aligned(frontend(img, params), size)
        fused = frontend_cropped(img, params, size)
        for a, b in zip(full, fused):
            assert a.shape == b.shape
            np.testing.assert_allclose(a.data, b.data, atol=1e-5)

    def test_crop_size_exceeding_scale_rejected(self, small_params, rng):
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        with pytest.raises(ValueError, match="crop size"):
            frontend_cropped(img, small_params, 16)
