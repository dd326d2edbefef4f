import math

import numpy as np
import pytest

from hlseg import autodiff as ad
from hlseg.autodiff import Tensor, grad_check


def rand(shape, seed, scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


def scalar_bilinear(img, H, W):
    """Plain-loop bilinear resize, half-pixel centres, edge clamped."""
    h, w = len(img), len(img[0])
    out = [[0.0] * W for _ in range(H)]
    for i in range(H):
        sy = max((i + 0.5) * h / H - 0.5, 0.0)
        y0 = min(int(sy), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(W):
            sx = max((j + 0.5) * w / W - 0.5, 0.0)
            x0 = min(int(sx), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
            bot = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
            out[i][j] = top * (1 - fy) + bot * fy
    return out


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal((Tensor([1, 2]) + Tensor([3, 4])).data, [4, 6])

    def test_mul_by_zero(self):
        x = Tensor(rand(5, 0), requires_grad=True)
        y = x * 0
        assert not y.data.any()
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros(5))

    def test_div_by_zero_is_inf(self):
        y = Tensor([1.0]) / Tensor([0.0])
        assert np.isposinf(y.data[0])

    def test_grad_check_flags_division_by_zero(self):
        with pytest.raises(FloatingPointError):
            grad_check(lambda x: (Tensor([1.0]) / x).sum(), Tensor([0.0]))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
            Tensor([1, 2]) + Tensor([1, 2, 3])

    def test_scalar_operands(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (2.0 * x - 1.0) / 4.0 + 3.0
        np.testing.assert_allclose(y.data, [3.25, 3.75])
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [0.5, 0.5])

    def test_fan_out_accumulates(self):
        x = Tensor(rand(4, 1), requires_grad=True)
        (x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0, np.float32))

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow", "exp", "log", "relu"])
    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check(self, op, seed):
        a = rand((4, 8, 8), seed)
        b = rand((4, 8, 8), seed + 100)
        w = rand((4, 8, 8), seed + 200)
        pos = np.abs(a) + 0.5
        fns = {
            "add": (lambda x: ((x + Tensor(b)) * Tensor(w)).sum(), a),
            "sub": (lambda x: ((Tensor(b) - x) * Tensor(w)).sum(), a),
            "mul": (lambda x: (x * x * Tensor(w)).sum(), a),
            "div": (lambda x: (Tensor(w) / x).sum(), pos),
            "pow": (lambda x: (x**2.5 * Tensor(w)).sum(), pos),
            "exp": (lambda x: (ad.exp(x) * Tensor(w)).sum(), a),
            "log": (lambda x: (ad.log(x) * Tensor(w)).sum(), pos),
            # keep inputs away from the kink
            "relu": (lambda x: (ad.relu(x) * Tensor(w)).sum(), np.where(np.abs(a) < 0.05, 0.5, a)),
        }
        f, x = fns[op]
        assert grad_check(f, Tensor(x)) < 1e-3


class TestSigmoid:
    def test_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_saturation(self):
        with np.errstate(over="raise"):
            y = ad.sigmoid(Tensor([100.0, -100.0]))
        assert y.data[0] == np.float32(1.0)
        assert 0.0 <= y.data[1] < 1e-40

    def test_slope_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        ad.sigmoid(x).sum().backward()
        eps = 1e-3
        fd = (1 / (1 + math.exp(-eps)) - 1 / (1 + math.exp(eps))) / (2 * eps)
        assert x.grad[0] == pytest.approx(0.25, rel=1e-6)
        assert abs(x.grad[0] - fd) / fd < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check(self, seed):
        assert grad_check(lambda x: (ad.sigmoid(x) * Tensor(rand((4, 8, 8), seed + 1))).sum(), rand((4, 8, 8), seed, 3)) < 1e-3


class TestConv2d:
    def test_identity_kernel(self):
        x = rand((3, 5, 6), 0).astype(np.float32)
        w = np.zeros((3, 3, 1, 1), np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1
        y = ad.conv2d(Tensor(x), Tensor(w), stride=1, pad=0)
        np.testing.assert_array_equal(y.data, x)

    def test_ones_kernel_on_constant_image(self):
        y = ad.conv2d(Tensor(np.full((1, 6, 6), 2.0)), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), pad=1)
        np.testing.assert_array_equal(y.data[0, 1:-1, 1:-1], 18.0)
        assert y.data[0, 0, 0] == 8.0  # corner sees 4 of 9 taps

    @pytest.mark.parametrize("h,k,stride,pad", [(8, 3, 1, 1), (8, 3, 2, 1), (7, 1, 1, 0), (9, 5, 2, 2)])
    def test_output_size(self, h, k, stride, pad):
        y = ad.conv2d(Tensor(np.zeros((2, h, h))), Tensor(np.zeros((3, 2, k, k))), stride=stride, pad=pad)
        assert y.shape == (3, (h + 2 * pad - k) // stride + 1, (h + 2 * pad - k) // stride + 1)

    def test_channel_mismatch(self):
        with pytest.raises(ad.ShapeError, match="channels"):
            ad.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_batched_matches_single(self):
        x = rand((3, 2, 6, 6), 1).astype(np.float32)
        w = Tensor(rand((4, 2, 3, 3), 2))
        b = Tensor(rand(4, 3))
        batched = ad.conv2d(Tensor(x), w, b, stride=2, pad=1).data
        for n in range(3):
            np.testing.assert_array_equal(batched[n], ad.conv2d(Tensor(x[n]), w, b, stride=2, pad=1).data)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("stride", [1, 2])
    def test_grad_check_all_inputs(self, seed, stride):
        x, w, b = rand((2, 5, 5), seed), rand((3, 2, 3, 3), seed + 1), rand(3, seed + 2)
        r = rand((3, 5 if stride == 1 else 3, 5 if stride == 1 else 3), seed + 3)
        conv = lambda x_, w_, b_: (ad.conv2d(x_, w_, b_, stride=stride, pad=1) * Tensor(r)).sum()
        assert grad_check(lambda t: conv(t, Tensor(w), Tensor(b)), x) < 1e-3
        assert grad_check(lambda t: conv(Tensor(x), t, Tensor(b)), w) < 1e-3
        assert grad_check(lambda t: conv(Tensor(x), Tensor(w), t), b) < 1e-3


class TestUpsample:
    def test_constant(self):
        y = ad.upsample_bilinear(Tensor(np.full((2, 3, 4), 1.5)), (9, 10))
        np.testing.assert_allclose(y.data, 1.5, rtol=0, atol=1e-6)

    def test_single_pixel_replicates(self):
        y = ad.upsample_bilinear(Tensor([[[0.7]]]), (5, 5))
        np.testing.assert_array_equal(y.data, np.full((1, 5, 5), np.float32(0.7)))

    def test_2x2_to_4x4_against_scalar_oracle(self):
        src = [[0.0, 1.0], [2.0, 3.0]]
        y = ad.upsample_bilinear(Tensor([src]), (4, 4)).data[0]
        np.testing.assert_allclose(y, scalar_bilinear(src, 4, 4), atol=1e-6)
        # interior values, frozen from the oracle
        np.testing.assert_allclose(y[1:3, 1:3], [[0.75, 1.25], [1.75, 2.25]], atol=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_against_scalar_oracle(self, seed):
        src = rand((3, 5), seed)
        y = ad.upsample_bilinear(Tensor(src[None]), (7, 12)).data[0]
        np.testing.assert_allclose(y, scalar_bilinear(src.tolist(), 7, 12), atol=1e-5)

    def test_downscale_rejected(self):
        with pytest.raises(ad.ShapeError, match="downscale"):
            ad.upsample_bilinear(Tensor(np.zeros((1, 4, 4))), (2, 8))

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check(self, seed):
        r = Tensor(rand((2, 8, 8), seed + 1))
        assert grad_check(lambda x: (ad.upsample_bilinear(x, (8, 8)) * r).sum(), rand((2, 3, 4), seed)) < 1e-3


class TestReductions:
    def test_sum_of_uniform_map(self):
        assert ad.tsum(Tensor(np.full((1, 4, 4), 1 / 16))).item() == pytest.approx(1.0, abs=1e-7)

    def test_mean(self):
        assert ad.mean(Tensor([2.0, 4.0])).item() == 3.0

    def test_sum_grad_is_ones(self):
        x = Tensor(rand((2, 3), 0), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    @pytest.mark.parametrize("axis", [0, (1, 2), -1])
    def test_axes_and_keepdims(self, axis):
        x = rand((2, 3, 4), 0)
        np.testing.assert_allclose(ad.tsum(Tensor(x), axis, keepdims=True).data, x.sum(axis=axis, keepdims=True), rtol=1e-6)
        np.testing.assert_allclose(ad.mean(Tensor(x), axis).data, x.mean(axis=axis), rtol=1e-5)

    def test_invalid_axis(self):
        with pytest.raises(ad.ShapeError, match="axis"):
            ad.tsum(Tensor(np.zeros((2, 2))), 2)

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check(self, seed):
        r = Tensor(rand((4, 1, 8), seed + 1))
        assert grad_check(lambda x: (ad.tsum(x, 1, keepdims=True) * r).sum() + ad.mean(x * x), rand((4, 8, 8), seed)) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_concat_grad_check(self, seed):
        b = Tensor(rand((2, 3, 4), seed + 1))
        r = Tensor(rand((2, 5, 4), seed + 2))
        assert grad_check(lambda x: (ad.concat([x, b], axis=1) * r).sum(), rand((2, 2, 4), seed)) < 1e-3


class TestCrossEntropyMap:
    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check(self, seed):
        labels = np.random.default_rng(seed).integers(0, 3, (2, 4, 4))
        labels[0, 0, 0] = 255
        r = Tensor(rand((2, 1, 4, 4), seed + 1))
        f = lambda x: (ad.cross_entropy_map(x, labels) * r).sum()
        assert grad_check(f, rand((2, 3, 4, 4), seed, 2.0)) < 1e-3


class TestDetach:
    def test_forward_identical(self):
        x = Tensor(rand((3, 3), 0), requires_grad=True)
        d = ad.detach(x * 2.0)
        assert d.node is None and not d.requires_grad
        np.testing.assert_array_equal(d.data, (x * 2.0).data)

    def test_blocks_gradient(self):
        x = Tensor(rand(4, 0), requires_grad=True)
        y = ad.sigmoid(ad.detach(ad.exp(x))) * 3.0 + 1.0
        y.sum().backward()
        assert x.grad is None

    def test_partial_path(self):
        x = Tensor(rand(4, 0), requires_grad=True)
        (x * ad.detach(x)).sum().backward()
        np.testing.assert_array_equal(x.grad, x.data)

    def test_grad_check_replays_detached_values(self):
        # d/dx [x * stop(x)] is stop(x), not 2x
        x = rand(6, 3)
        assert grad_check(lambda t: (t * ad.detach(t)).sum(), x) < 1e-6


class TestBackward:
    def test_deterministic(self):
        x = rand((2, 3, 8, 8), 0).astype(np.float32)
        w = rand((4, 3, 3, 3), 1).astype(np.float32)
        grads = []
        for _ in range(2):
            wt = Tensor(w, requires_grad=True)
            y = ad.relu(ad.conv2d(Tensor(x), wt, pad=1))
            (ad.upsample_bilinear(y, (16, 16)) ** 2).mean().backward()
            grads.append(wt.grad)
        assert grads[0].tobytes() == grads[1].tobytes()

    def test_grad_has_own_shape(self):
        a = Tensor(rand((2, 1, 3), 0), requires_grad=True)
        b = Tensor(rand((2, 4, 3), 1), requires_grad=True)
        ((a * b) / (a.sum() + 10.0)).sum().backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_deep_chain_has_no_recursion_limit(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad[0] == 1.0

    def test_constant_function_grad_check(self):
        assert grad_check(lambda x: x.sum() * 0.0 + 3.0, rand(5, 0)) == 0.0

    def test_grad_check_squares(self):
        x = rand((3, 4), 7)
        assert grad_check(lambda t: (t * t).sum(), x) < 1e-3
        t = Tensor(x, requires_grad=True)
        (t * t).sum().backward()
        np.testing.assert_allclose(t.grad, 2 * x.astype(np.float32), rtol=1e-6)

    def test_grad_check_rejects_nonfinite(self):
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            grad_check(lambda x: ad.log(x).sum(), np.array([-1.0, 1.0]))
