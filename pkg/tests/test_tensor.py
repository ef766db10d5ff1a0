import numpy as np
import pytest

from xyz_scgan import oracles
from xyz_scgan import tensor as T
from xyz_scgan.gradcheck import run_suite
from xyz_scgan.tensor import DimensionError, NumericError, Parameter, Tensor


class TestConvolution:

    def test_conv2d_matches_loop(self, rng):
        x, w, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        fast = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
        np.testing.assert_allclose(fast, oracles.conv2d_loop(x, w, b, 1, 1), rtol=0, atol=1e-10)

    def test_conv2d_strided_shape(self, rng):
        out = T.conv2d(Tensor(rng.standard_normal((1, 2, 7, 6))), Tensor(rng.standard_normal((3, 2, 3, 3))), stride=2)
        assert out.shape == (1, 3, 3, 2)

    def test_conv2d_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w), pad=1).data, x)

    def test_conv2d_channel_mismatch(self, rng):
        with pytest.raises(DimensionError, match='channels'):
            T.conv2d(Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((3, 3, 3, 3))))

    def test_conv2d_kernel_larger_than_input(self, rng):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(rng.standard_normal((1, 1, 2, 2))), Tensor(rng.standard_normal((1, 1, 3, 3))))

    def test_transposed_matches_zero_stuffing(self, rng):
        x, w, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3)
        fast = T.conv2d_transposed(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
        ref = oracles.conv2d_transposed_zero_stuffing(x, w, b, 2, 1)
        np.testing.assert_allclose(fast, ref, rtol=0, atol=1e-10)

    def test_transposed_doubles_size(self, rng):
        out = T.conv2d_transposed(Tensor(rng.standard_normal((1, 4, 8, 8))), Tensor(rng.standard_normal((4, 5, 4, 4))),
                                  stride=2, pad=1)
        assert out.shape == (1, 5, 16, 16)

    @pytest.mark.parametrize('seed', range(3))
    def test_adjoint_identity(self, seed):
        r = np.random.default_rng(seed)
        x, w, y = r.standard_normal((2, 3, 8, 8)), r.standard_normal((4, 3, 4, 4)), r.standard_normal((2, 4, 4, 4))
        lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data * y)
        rhs = np.sum(x * T.conv2d_transposed(Tensor(y), Tensor(w), None, 2, 1).data)
        assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))

    def test_conv2d_is_linear(self, rng):
        x, y, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
        a, b = 0.7, -1.9
        conv = lambda v: T.conv2d(Tensor(v), Tensor(w), None, 1, 1).data
        np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), rtol=0, atol=1e-10)


class TestResampling:

    def test_avg_pool(self):
        x = Tensor(np.arange(1, 5, dtype=float).reshape(1, 1, 2, 2))
        assert T.avg_pool2d(x, 2).data.item() == 2.5

    def test_avg_pool_matches_loop(self, rng):
        x = rng.standard_normal((1, 2, 8, 8))
        np.testing.assert_allclose(T.avg_pool2d(Tensor(x), 4).data, oracles.avg_pool_loop(x, 4), rtol=0, atol=1e-10)

    def test_avg_pool_not_divisible(self, rng):
        with pytest.raises(DimensionError, match='pool rate'):
            T.avg_pool2d(Tensor(rng.standard_normal((1, 1, 6, 6))), 4)

    def test_upsample_ramp_matches_scalar_oracle(self):
        x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
        np.testing.assert_allclose(T.upsample_bilinear(Tensor(x), 2).data,
                                   oracles.upsample_bilinear_scalar(x, 2), rtol=0, atol=1e-10)

    def test_upsample_keeps_constants(self):
        out = T.upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 0.7)), 4)
        assert out.shape == (1, 2, 12, 12)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-15)

    def test_pool_then_upsample_of_constant(self):
        x = Tensor(np.full((1, 1, 8, 8), -1.5))
        np.testing.assert_allclose(T.upsample_bilinear(T.avg_pool2d(x, 4), 4).data, x.data)


class TestElementwise:

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor([0.0])).item() == 0.5

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
        T.backward(T.sum(T.sigmoid(x)))
        np.testing.assert_array_equal(x.grad, 0.25)

    def test_sigmoid_saturates_without_overflow(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert 0.0 <= out[0] < 1e-300 and out[1] == 1.0

    def test_prelu(self):
        out = T.prelu(Tensor([-2.0, 0.0, 3.0]), Tensor([0.25]))
        np.testing.assert_array_equal(out.data, [-0.5, 0.0, 3.0])

    def test_split_concat_round_trip(self, rng):
        x = Tensor(rng.standard_normal((1, 6, 2, 2)))
        a, b = T.split_channels(x, 3)
        np.testing.assert_array_equal(T.concat_channels(a, b).data, x.data)

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))

    def test_log_of_zero_is_numeric_error(self):
        with pytest.raises(NumericError):
            T.log(Tensor([0.0, 1.0]))


class TestBackward:

    def test_simple_chain(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.sum(T.square(x) * 2.0)
        y.backward()
        assert x.grad[0] == 12.0

    def test_shared_subexpression(self):
        x = Tensor([2.0], requires_grad=True)
        s = T.square(x)
        T.backward(T.sum(T.mul(s, s)))
        assert x.grad[0] == pytest.approx(4 * 2.0 ** 3)

    def test_parameter_grads_accumulate_until_zeroed(self):
        p = Parameter([1.5], name='p')
        for _ in range(2):
            T.backward(T.sum(T.scale(p, 3.0)))
        assert p.grad[0] == 6.0
        p.zero_grad()
        assert p.grad[0] == 0.0

    def test_non_scalar_root(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(DimensionError, match='scalar'):
            T.backward(T.scale(x, 2.0))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.sigmoid(x)
        assert not y.requires_grad and y._parents == ()
        assert T.grad_enabled()

    def test_detach_cuts_the_graph(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.sum(T.mul(T.square(x).detach(), x))
        y.backward()
        assert x.grad[0] == 1.0

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([0.5], requires_grad=True)
        y = x
        for _ in range(5000):
            y = T.add_scalar(y, 0.0)
        T.backward(T.sum(y))
        assert x.grad[0] == 1.0


def test_gradient_and_oracle_suite():
    report = run_suite('tensor', cases=10)
    assert report.passed, report.to_text()
    assert {r.kind for r in report.results} == {'grad', 'oracle'}
