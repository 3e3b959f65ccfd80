import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from codaf import oracle
from codaf import primitives as P
from codaf.primitives import OffsetBundle


def rand(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


def degenerate_bundle(B, H, W, K=9, dtype=torch.float64):
    return OffsetBundle(
        base=torch.zeros(B, 2, H, W, dtype=dtype),
        residual=torch.zeros(B, 2 * K, H, W, dtype=dtype),
        modulation=torch.ones(B, K, H, W, dtype=dtype),
    )


class TestConv2d:
    def test_identity_1x1(self):
        x = rand(2, 3, 5, 6)
        w = torch.eye(3, dtype=torch.float64).view(3, 3, 1, 1)
        torch.testing.assert_close(P.conv2d(x, w, torch.zeros(3, dtype=torch.float64)), x)

    def test_zero_weights_give_bias(self):
        x = rand(1, 2, 4, 4)
        out = P.conv2d(x, torch.zeros(3, 2, 3, 3, dtype=torch.float64), torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
        for c, b in enumerate((1.0, -2.0, 0.5)):
            assert torch.all(out[:, c] == b)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive(self, seed):
        x, w, b = rand(2, 3, 5, 6, seed=seed), rand(4, 3, 3, 3, seed=seed + 100), rand(4, seed=seed + 200)
        ref = oracle.naive_conv(x.numpy(), w.numpy(), b.numpy())
        np.testing.assert_allclose(P.conv2d(x, w, b).numpy(), ref, atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(P.ShapeError):
            P.conv2d(rand(1, 2, 4, 4), rand(1, 3, 3, 3))


class TestPointwise:
    def test_sigmoid_zero(self):
        assert torch.all(P.pointwise(torch.zeros(1, 2, 3, 3), "sigmoid") == 0.5)

    def test_relu_negative(self):
        x = rand(1, 2, 3, 3).abs() + 0.1
        assert torch.all(P.pointwise(-x, "relu") == 0)

    def test_sigmoid_one(self):
        assert P.pointwise(torch.ones(1, 1, 1, 1, dtype=torch.float64), "sigmoid").item() == pytest.approx(0.7310586, abs=1e-7)

    def test_unknown(self):
        with pytest.raises(P.ConfigError):
            P.pointwise(torch.zeros(1), "tanh")


class TestSoftmax:
    def test_equal_logits(self):
        out = P.softmax_over_channels(torch.full((1, 4, 3, 3), 2.5))
        torch.testing.assert_close(out, torch.full_like(out, 0.25))

    def test_limit(self):
        x = torch.zeros(1, 2, 2, 2)
        x[:, 1] = 200.0
        out = P.softmax_over_channels(x)
        assert torch.allclose(out[:, 0], torch.zeros(1, 2, 2), atol=1e-30)
        assert torch.allclose(out[:, 1], torch.ones(1, 2, 2))

    @given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
    @settings(max_examples=30, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, seed, shift):
        x = rand(2, 3, 4, 4, seed=seed) * 5
        per_pixel = rand(2, 1, 4, 4, seed=seed + 1) * shift
        a = P.softmax_over_channels(x)
        b = P.softmax_over_channels(x + per_pixel)
        torch.testing.assert_close(a.sum(1), torch.ones(2, 4, 4, dtype=torch.float64), atol=1e-6, rtol=0)
        torch.testing.assert_close(a, b, atol=1e-6, rtol=0)

    def test_needs_two_channels(self):
        with pytest.raises(P.ShapeError):
            P.softmax_over_channels(torch.zeros(1, 1, 2, 2))


class TestGlobalPool:
    def test_constant(self):
        x = torch.full((2, 3, 4, 5), 1.7)
        assert torch.allclose(P.global_pool(x, "avg"), torch.full((2, 3, 1, 1), 1.7))
        assert torch.all(P.global_pool(x, "max") == 1.7)

    def test_single_pixel(self):
        x = torch.zeros(1, 1, 4, 5, dtype=torch.float64)
        x[0, 0, 2, 3] = 3.0
        assert P.global_pool(x, "max").item() == 3.0
        assert P.global_pool(x, "avg").item() == pytest.approx(3.0 / 20)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_avg_le_max(self, seed):
        x = rand(2, 3, 4, 4, seed=seed)
        assert torch.all(P.global_pool(x, "avg") <= P.global_pool(x, "max"))


class TestMLP:
    def test_zero_weights(self):
        C, h = 8, 2
        z = torch.zeros
        out = P.mlp_bottleneck(rand(3, C), z(h, C, dtype=torch.float64), z(h, dtype=torch.float64),
                               z(C, h, dtype=torch.float64), z(C, dtype=torch.float64))
        assert out.shape == (3, C) and torch.all(out == 0)

    def test_ratio_divisibility(self):
        assert P.bottleneck_width(32, 4) == 8
        with pytest.raises(P.ConfigError):
            P.bottleneck_width(30, 4)

    def test_gradient(self):
        C, h = 8, 2
        args = [rand(3, C, seed=1, dtype=torch.float32), rand(h, C, seed=2, dtype=torch.float32),
                rand(h, seed=3, dtype=torch.float32), rand(C, h, seed=4, dtype=torch.float32),
                rand(C, seed=5, dtype=torch.float32)]
        args = [a.requires_grad_() for a in args]
        report = P.grad_check(P.mlp_bottleneck, args, tol=1e-3)
        assert report.passed, str(report)


class TestBilinear:
    def test_lattice_points_exact(self):
        x = rand(2, 3, 5, 6)
        grid = P.base_grid(2, 5, 6, torch.float64)
        torch.testing.assert_close(P.bilinear_sample(x, grid), x, atol=1e-12, rtol=0)

    def test_half_pixel_on_ramp(self):
        x = torch.arange(6, dtype=torch.float64).view(1, 1, 1, 6).expand(1, 1, 4, 6).contiguous() * 2.0
        coords = torch.tensor([[[[2.0, 1.5]]]], dtype=torch.float64)
        assert P.bilinear_sample(x, coords).item() == pytest.approx((x[0, 0, 2, 1] + x[0, 0, 2, 2]).item() / 2)

    def test_outside_is_zero(self):
        x = rand(1, 2, 4, 4) + 5
        coords = torch.tensor([[[[-3.0, 1.0], [1.0, 9.5]]]], dtype=torch.float64)
        assert torch.all(P.bilinear_sample(x, coords) == 0)

    @given(seed=st.integers(0, 10_000), t=st.floats(0, 1))
    @settings(max_examples=30, deadline=None)
    def test_affine_between_lattice_points(self, seed, t):
        x = rand(1, 2, 4, 5, seed=seed)
        i, j = 1, 2
        coords = torch.tensor([[[[float(i), j + t]]]], dtype=torch.float64)
        expected = (1 - t) * x[0, :, i, j] + t * x[0, :, i, j + 1]
        torch.testing.assert_close(P.bilinear_sample(x, coords)[0, :, 0, 0], expected)


class TestDeformable:
    @pytest.mark.parametrize("seed", range(5))
    def test_degenerate_equals_conv(self, seed):
        x, w, b = rand(2, 3, 5, 5, seed=seed), rand(4, 3, 3, 3, seed=seed + 1), rand(4, seed=seed + 2)
        out = P.deformable_sample(x, w, b, degenerate_bundle(2, 5, 5))
        torch.testing.assert_close(out, P.conv2d(x, w, b), atol=1e-5, rtol=0)

    def test_integer_translation(self):
        x = rand(1, 2, 4, 5)
        w = torch.zeros(2, 2, 3, 3, dtype=torch.float64)
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        bundle = degenerate_bundle(1, 4, 5)
        bundle.base[:, 1] = 1.0
        out = P.deformable_sample(x, w, None, bundle)
        expected = torch.zeros_like(x)
        expected[..., :-1] = x[..., 1:]
        torch.testing.assert_close(out, expected)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_matches_naive(self, seed):
        B, C, H, W = 1, 2, 4, 5
        x, w, b = rand(B, C, H, W, seed=seed), rand(3, C, 3, 3, seed=seed + 1), rand(3, seed=seed + 2)
        bundle = OffsetBundle(rand(B, 2, H, W, seed=seed + 3) * 1.5, rand(B, 18, H, W, seed=seed + 4),
                              torch.sigmoid(rand(B, 9, H, W, seed=seed + 5)))
        ref = oracle.naive_deformable_sample(x.numpy(), w.numpy(), b.numpy(), bundle.base.numpy(),
                                             bundle.residual.numpy(), bundle.modulation.numpy())
        np.testing.assert_allclose(P.deformable_sample(x, w, b, bundle).numpy(), ref, atol=1e-5)

    def test_K_mismatch(self):
        with pytest.raises(P.ShapeError):
            P.deformable_sample(rand(1, 2, 4, 4), rand(2, 2, 3, 3), None, degenerate_bundle(1, 4, 4, K=4))


class TestGradCheck:
    def test_conv_float32(self):
        args = [rand(1, 2, 5, 5, seed=1, dtype=torch.float32), rand(3, 2, 3, 3, seed=2, dtype=torch.float32),
                rand(3, seed=3, dtype=torch.float32)]
        report = P.grad_check(P.conv2d, [a.requires_grad_() for a in args], tol=1e-3, names=["x", "w", "b"])
        assert report.passed, str(report)
        assert set(report.max_rel_err) == {"x", "w", "b"}

    def test_bilinear_coords(self):
        x = rand(1, 2, 5, 5, seed=4, dtype=torch.float32).requires_grad_()
        g = torch.Generator().manual_seed(0)
        coords = (torch.randint(0, 4, (1, 3, 3, 2), generator=g) + 0.1 + 0.8 * torch.rand(1, 3, 3, 2, generator=g))
        report = P.grad_check(P.bilinear_sample, [x, coords.requires_grad_()], tol=1e-3, names=["x", "coords"])
        assert report.passed, str(report)

    def test_sigmoid_float64(self):
        x = rand(1, 2, 3, 3, seed=5).requires_grad_()
        report = P.grad_check(lambda t: P.pointwise(t, "sigmoid"), [x], tol=1e-5)
        assert report.passed, str(report)
        assert report.dtype == torch.float64

    def test_wrong_gradient_detected(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, g):
                return -g  # wrong on purpose

        x = rand(1, 1, 3, 3, seed=6).requires_grad_()
        assert not P.grad_check(Bad.apply, [x]).passed

    def test_nonfinite_gradient_reported(self):
        x = torch.zeros(1, 1, 2, 2, dtype=torch.float64).requires_grad_()
        report = P.grad_check(torch.sqrt, [x])
        assert not report.passed and "non-finite" in report.failure


def test_deterministic_outputs():
    x, w = rand(1, 2, 5, 5), rand(2, 2, 3, 3, seed=1)
    bundle = OffsetBundle(rand(1, 2, 5, 5, seed=2), rand(1, 18, 5, 5, seed=3), torch.sigmoid(rand(1, 9, 5, 5, seed=4)))
    a = P.deformable_sample(x, w, None, bundle)
    b = P.deformable_sample(x, w, None, bundle)
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()
    assert math.isfinite(a.sum().item())
