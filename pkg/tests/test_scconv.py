import numpy as np
import pytest

from xyz_scgan import tensor as T
from xyz_scgan.gradcheck import random_block, run_suite
from xyz_scgan.oracles import sc_block_reference
from xyz_scgan.scconv import SCBlockParams, sc_block_forward, sc_gate
from xyz_scgan.tensor import Conv, DimensionError, Parameter, Tensor


@pytest.fixture
def block(rng):
    return random_block(rng, channels=4, pool_rate=2)


def test_shape_is_preserved(block, rng):
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    assert sc_block_forward(x, block).shape == (2, 4, 8, 8)


@pytest.mark.parametrize('seed', range(3))
def test_matches_reference(seed):
    r = np.random.default_rng(seed)
    p = random_block(r, channels=4, pool_rate=2)
    x = r.standard_normal((1, 4, 8, 8))
    arrays = {n: q.data for n, q in p.named_parameters()}
    np.testing.assert_allclose(sc_block_forward(Tensor(x), p).data, sc_block_reference(x, arrays, 2),
                               rtol=0, atol=1e-10)


def test_gate_is_strictly_between_zero_and_one(block, rng):
    x_a = Tensor(rng.standard_normal((1, 2, 24, 24)) * 3)
    g = sc_gate(x_a, block.f1, block.pool_rate).data
    assert g.min() > 0 and g.max() < 1


def test_zero_input_gives_prelu_of_biases(rng):
    zero = lambda shape: Parameter(np.zeros(shape), dtype=np.float64)
    convs = [Conv(zero((2, 2, 3, 3)), Parameter(np.full(2, -1.0), dtype=np.float64), 1, 1) for _ in range(4)]
    p = SCBlockParams(*convs, act=Parameter([0.25], dtype=np.float64), pool_rate=2)
    out = sc_block_forward(Tensor(np.zeros((1, 4, 4, 4))), p).data
    np.testing.assert_allclose(out, -0.25)


def test_odd_channels(block, rng):
    with pytest.raises(DimensionError, match='even'):
        sc_block_forward(Tensor(rng.standard_normal((1, 3, 8, 8))), block)


def test_channel_count_must_match_block(block, rng):
    with pytest.raises(DimensionError, match='built for 4'):
        sc_block_forward(Tensor(rng.standard_normal((1, 6, 8, 8))), block)


def test_pool_rate_must_divide(rng):
    p = random_block(rng, channels=4, pool_rate=4)
    with pytest.raises(DimensionError, match='pool rate 4'):
        sc_block_forward(Tensor(rng.standard_normal((1, 4, 6, 6))), p)


def test_kernels_must_be_3x3(rng):
    convs = [Conv(Parameter(rng.standard_normal((2, 2, 3, 3)))) for _ in range(3)]
    convs.append(Conv(Parameter(rng.standard_normal((2, 2, 5, 5)))))
    with pytest.raises(ValueError, match='3x3'):
        SCBlockParams(*convs, act=Parameter([0.25]))


def test_every_parameter_gets_a_gradient(block, rng):
    x = Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True)
    T.backward(T.mean(T.square(sc_block_forward(x, block))))
    for name, p in block.named_parameters():
        assert np.any(p.grad != 0), name


def test_gradient_suite():
    report = run_suite('scconv', cases=10)
    assert report.passed, report.to_text()


def _zero_conv(channels=2):
    return Conv(Parameter(np.zeros((channels, channels, 3, 3)), dtype=np.float64),
                Parameter(np.zeros(channels), dtype=np.float64), 1, 1)


def test_gate_is_one_half_for_zero_input_and_weights():
    g = sc_gate(Tensor(np.zeros((1, 2, 8, 8))), _zero_conv(), 4).data
    np.testing.assert_array_equal(g, 0.5)


def test_gate_saturates():
    g = sc_gate(Tensor(np.full((1, 2, 8, 8), 30.0)), _zero_conv(), 4).data
    assert np.all(1 - g <= 1e-13)


def test_receptive_field_exceeds_plain_conv(rng):
    p = random_block(rng, channels=4, pool_rate=4)
    x = rng.standard_normal((1, 4, 16, 16))
    bumped = x.copy()
    bumped[0, 0, 8, 8] += 1.0
    with T.no_grad():
        diff = sc_block_forward(Tensor(bumped), p).data - sc_block_forward(Tensor(x), p).data
        w = Tensor(rng.standard_normal((2, 2, 3, 3)))
        plain = T.conv2d(Tensor(bumped[:, :2]), w, None, 1, 1).data - T.conv2d(Tensor(x[:, :2]), w, None, 1, 1).data
    footprint = np.count_nonzero(np.any(diff[0] != 0, axis=0))
    assert np.count_nonzero(np.any(plain[0] != 0, axis=0)) == 9
    # two stacked 3x3 convs alone would reach 5x5
    assert footprint > 25
