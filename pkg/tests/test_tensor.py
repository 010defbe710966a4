import numpy as np
import pytest

from smbea import tensor as T
from smbea import tsr
from smbea.tensor import Tensor

from oracles import (bilinear_loops, conv2d_loops, grad_check, group_mean_loops,
                     softmax_loops)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_zero_input_gives_zero(self, rng):
        out = T.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(rng.normal(size=(2, 1, 3, 3))),
                       Tensor(np.zeros(2)), padding=1)
        assert np.all(out.data == 0)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 4, 5))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_dilated_matches_loop_reference(self, rng):
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=1, padding=1, dilation=2)
        ref = conv2d_loops(x, k, b, 1, 1, 2)
        assert out.shape == ref.shape == (4, 3, 3)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (2, 2, 2), (1, 2, 3)])
    def test_output_size_formula(self, rng, stride, padding, dilation):
        x = rng.normal(size=(3, 9, 8))
        k = rng.normal(size=(2, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding, dilation=dilation)
        ho = (9 + 2 * padding - dilation * 2 - 1) // stride + 1
        wo = (8 + 2 * padding - dilation * 2 - 1) // stride + 1
        assert out.shape == (2, ho, wo)
        np.testing.assert_allclose(out.data, conv2d_loops(x, k, np.zeros(2), stride, padding, dilation),
                                   atol=1e-12)

    def test_dilation_one_exact_on_integers(self, rng):
        # integer data keeps every partial sum exact, so accumulation order cannot matter
        x = rng.integers(-5, 6, size=(3, 7, 7)).astype(float)
        k = rng.integers(-3, 4, size=(2, 3, 3, 3)).astype(float)
        b = rng.integers(-2, 3, size=2).astype(float)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), padding=1, dilation=1)
        np.testing.assert_array_equal(out.data, conv2d_loops(x, k, b, 1, 1, 1))

    def test_channel_mismatch_names_dimension(self, rng):
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(Tensor(rng.normal(size=(3, 5, 5))), Tensor(rng.normal(size=(2, 4, 3, 3))))

    def test_batched_equals_per_image(self, rng):
        x = rng.normal(size=(3, 2, 6, 6))
        k = Tensor(rng.normal(size=(4, 2, 3, 3)))
        batched = T.conv2d(Tensor(x), k, padding=1, stride=2).data
        for n in range(3):
            np.testing.assert_array_equal(batched[n], T.conv2d(Tensor(x[n]), k, padding=1, stride=2).data)


class TestBilinear:
    def test_same_size_identity(self, rng):
        x = rng.normal(size=(2, 4, 5))
        np.testing.assert_array_equal(T.bilinear_resize(Tensor(x), 4, 5).data, x)

    def test_two_to_three(self):
        out = T.bilinear_resize(Tensor(np.array([[[0.0, 1.0]]])), 1, 3)
        np.testing.assert_allclose(out.data, [[[0.0, 0.5, 1.0]]], atol=1e-15)

    def test_constant_preserved(self):
        out = T.bilinear_resize(Tensor(np.full((1, 3, 4), 0.7)), 7, 2)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-15)

    def test_corners_exact_and_loop_oracle(self, rng):
        x = rng.normal(size=(3, 5, 4))
        out = T.bilinear_resize(Tensor(x), 8, 9).data
        np.testing.assert_allclose(out, bilinear_loops(x, 8, 9), atol=1e-12)
        for a, b in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
            np.testing.assert_allclose(out[:, a, b], x[:, a, b], atol=1e-15)

    def test_zero_extent_rejected(self, rng):
        with pytest.raises(ValueError):
            T.bilinear_resize(Tensor(rng.normal(size=(1, 3, 3))), 0, 3)


class TestSoftmax2d:
    def test_uniform(self):
        out = T.softmax2d(Tensor(np.full((2, 3, 4), 5.0)))
        np.testing.assert_allclose(out.data, 1.0 / 12, atol=1e-15)

    def test_closed_form(self):
        out = T.softmax2d(Tensor(np.array([[[0.0, np.log(3.0)]]])))
        np.testing.assert_allclose(out.data, [[[0.25, 0.75]]], atol=1e-15)

    def test_shift_invariance_and_sums(self, rng):
        x = rng.normal(size=(3, 4, 4)) * 10
        a = T.softmax2d(Tensor(x)).data
        b = T.softmax2d(Tensor(x + 123.4)).data
        np.testing.assert_allclose(a, b, atol=1e-14)
        np.testing.assert_allclose(a.sum(axis=(1, 2)), 1.0, atol=1e-9)
        assert np.all(a > 0)
        np.testing.assert_allclose(a, softmax_loops(x), atol=1e-14)

    def test_no_overflow(self):
        out = T.softmax2d(Tensor(np.array([[[1e4, 0.0], [-1e4, 2.0]]])))
        assert np.all(np.isfinite(out.data))


class TestChannelAvgPool:
    def test_singleton_groups(self, rng):
        x = rng.normal(size=(4, 3, 3))
        np.testing.assert_array_equal(T.channel_avg_pool(Tensor(x), 4).data, x)

    def test_mean_of_two(self, rng):
        x = rng.normal(size=(2, 3, 3))
        np.testing.assert_allclose(T.channel_avg_pool(Tensor(x), 1).data[0], (x[0] + x[1]) / 2, atol=1e-15)

    def test_loop_oracle(self, rng):
        x = rng.normal(size=(8, 4, 5))
        np.testing.assert_allclose(T.channel_avg_pool(Tensor(x), 4).data, group_mean_loops(x, 4), atol=1e-14)

    def test_not_divisible(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            T.channel_avg_pool(Tensor(rng.normal(size=(6, 2, 2))), 4)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        (g,) = T.grad(lambda x: x.sum(), rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_quadratic_minimum(self, rng):
        y = rng.normal(size=(5,))
        (g,) = T.grad(lambda x: ((x - y) ** 2).mean(), y.copy())
        np.testing.assert_array_equal(g, np.zeros(5))

    def test_conv_relu_mean_matches_fd(self, rng):
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        fn = lambda a, b: T.relu(T.conv2d(a, b, padding=1)).mean()
        assert grad_check(fn, [x, k]) < 1e-4

    def test_unused_input_zero(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        ga, gb = T.backward((a * 2.0).sum(), [a, b])
        np.testing.assert_array_equal(ga, 2.0)
        np.testing.assert_array_equal(gb, 0.0)

    def test_backward_without_graph_errors(self):
        with pytest.raises(T.GraphError):
            T.backward(Tensor(np.array(1.0)))
        with pytest.raises(T.GraphError):
            T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)  # non-scalar loss

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x
        (g,) = T.backward((y + y).sum(), [x])
        np.testing.assert_allclose(g, [12.0])

    def test_leaf_grad_accumulation(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])


class TestFiniteDiff:
    def test_sum(self, rng):
        g = T.finite_diff_grad(lambda v: v.sum(), rng.normal(size=4), 1e-4)
        np.testing.assert_allclose(g, 1.0, atol=1e-9)

    def test_square(self):
        g = T.finite_diff_grad(lambda v: (v ** 2).sum(), np.array([1.0, 2.0]), 1e-4)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            T.finite_diff_grad(lambda v: v.sum(), np.ones(2), 0.0)


def _away_from_kinks(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


OPS = {
    "add": (lambda a, b: (a + b * b).sum(), [(3, 4), (3, 4)]),
    "sub_broadcast": (lambda a, b: ((a - b) ** 2).sum(), [(2, 3, 4), (3, 1)]),
    "mul": (lambda a, b: (a * b).sum(), [(2, 5), (2, 5)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [(4,), (4,)]),
    "scale": (lambda a: T.scale(a, -2.5).sum(), [(3, 3)]),
    "relu": (lambda a: (T.relu(a) ** 2).sum(), [(2, 3, 3)]),
    "sigmoid": (lambda a: (T.sigmoid(a) * a).sum(), [(2, 3, 3)]),
    "abs": (lambda a: T.tabs(a).sum(), [(5,)]),
    "sqrt_log_exp": (lambda a: T.log(T.exp(a) + 1.0).sum() + T.sqrt(a * a + 1.0).sum(), [(6,)]),
    "mean_axes": (lambda a: (a.mean(axis=(1, 2), keepdims=True) * a).sum(), [(2, 3, 4)]),
    "clip01": (lambda a: (T.clip01(a * 0.2 + 0.5) ** 2).sum(), [(3, 3)]),
    "conv2d": (lambda a, k, b: (T.conv2d(a, k, b, stride=2, padding=1) ** 2).sum(),
               [(2, 2, 6, 6), (3, 2, 3, 3), (3,)]),
    "conv2d_dilated": (lambda a, k: (T.conv2d(a, k, padding=2, dilation=2) ** 2).sum(),
                       [(2, 5, 5), (2, 2, 3, 3)]),
    "bilinear": (lambda a: (T.bilinear_resize(a, 5, 3) ** 2).sum(), [(2, 3, 4)]),
    "upsample": (lambda a: (T.upsample_nearest(a, 2) ** 2).sum(), [(1, 2, 3, 3)]),
    "softmax2d": (lambda a: (T.softmax2d(a) * T.softmax2d(a * 0.5 + 1.0)).sum() * 10.0, [(2, 3, 3)]),
    "channel_avg_pool": (lambda a: (T.channel_avg_pool(a, 2) ** 2).sum(), [(4, 2, 3)]),
    "index_channels": (lambda a: (T.index_channels(a, [0, 2, 2]) ** 2).sum(), [(1, 4, 2, 2)]),
    "channel_affine": (lambda a, g, b: (T.relu(T.channel_affine(a, g, b, np.array([0.1, -0.2]),
                                                                np.array([2.0, 0.5]))) ** 2).sum(),
                       [(1, 2, 3, 3), (2,), (2,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_matches_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    worst = 0.0
    for _ in range(100):
        arrays = [_away_from_kinks(rng, s) for s in shapes]
        err = grad_check(fn, arrays, h=1e-6)
        worst = max(worst, err)
    assert worst < 1e-4, f"{name}: worst relative error {worst:.2e}"


def test_forward_determinism(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    a = T.softmax2d(T.conv2d(Tensor(x), Tensor(k), padding=1)).data
    b = T.softmax2d(T.conv2d(Tensor(x.copy()), Tensor(k.copy()), padding=1)).data
    np.testing.assert_array_equal(a, b)


class TestTSR:
    def test_round_trip(self, rng, tmp_path):
        arr = rng.normal(size=(2, 3, 4))
        tsr.save(tmp_path / "a.tsr", arr)
        back = tsr.load(tmp_path / "a.tsr")
        np.testing.assert_array_equal(arr, back)
        blob = (tmp_path / "a.tsr").read_bytes()
        assert blob[:4] == b"TSR1"
        assert int.from_bytes(blob[4:8], "little") == 3
        assert len(blob) == 8 + 12 + 8 * 24

    def test_truncated(self, rng):
        blob = tsr.encode(rng.normal(size=(3, 3)))
        with pytest.raises(tsr.TSRFormatError):
            tsr.decode(blob[:-1])
        with pytest.raises(tsr.TSRFormatError):
            tsr.decode(b"XXXX" + blob[4:])
