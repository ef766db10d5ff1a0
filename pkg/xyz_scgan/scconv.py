"""
Self-calibrated convolution block.

The input channels are split in half. The first half goes through the
calibration branch::

    gate = sigmoid(x_a + up(f1(avg_pool(x_a))))
    mid  = f3(f2(x_a) * gate)

the second half keeps the original spatial context through a plain
convolution ``y_b = f4(x_b)``. Both halves are concatenated and passed
through one PReLU, so the block preserves the input shape.
"""
from dataclasses import dataclass

from . import tensor as T
from .tensor import Conv, DimensionError, Parameter

DEFAULT_POOL_RATE = 4


@dataclass
class SCBlockParams:
    f1: Conv
    f2: Conv
    f3: Conv
    f4: Conv
    act: Parameter
    pool_rate: int = DEFAULT_POOL_RATE

    def __post_init__(self):
        if self.pool_rate < 2:
            raise ValueError(f'pool rate must be >= 2, got {self.pool_rate}')
        for name in ('f1', 'f2', 'f3', 'f4'):
            k = getattr(self, name).weight.shape[2:]
            if k != (3, 3):
                raise ValueError(f'{name} must use a 3x3 kernel, got {k[0]}x{k[1]}')

    def portions(self):
        return [('f1', self.f1), ('f2', self.f2), ('f3', self.f3), ('f4', self.f4)]

    def named_parameters(self, prefix=''):
        rs = []
        for name, conv in self.portions():
            rs.append((f'{prefix}{name}.weight', conv.weight))
            if conv.bias is not None:
                rs.append((f'{prefix}{name}.bias', conv.bias))
        rs.append((f'{prefix}act', self.act))
        return rs

    @property
    def channels(self):
        return 2 * self.f4.weight.shape[0]


def _check_input(x, p):
    T._check4(x, 'sc_block')
    n, c, h, w = x.shape
    if c % 2:
        raise DimensionError(f'sc_block: channel count must be even, got {c}')
    if c != p.channels:
        raise DimensionError(f'sc_block: block is built for {p.channels} channels, got {c}')
    if h % p.pool_rate or w % p.pool_rate:
        raise DimensionError(f'sc_block: {h}x{w} is not divisible by pool rate {p.pool_rate}')


def sc_gate(x_a, f1, pool_rate=DEFAULT_POOL_RATE):
    """sigmoid(x_a + up(f1(avg_pool(x_a)))), same shape as x_a, values in (0, 1)."""
    pooled = T.avg_pool2d(x_a, pool_rate)
    return T.sigmoid(T.add(x_a, T.upsample_bilinear(f1(pooled), pool_rate)))


def sc_calibrate(x_a, p):
    gate = sc_gate(x_a, p.f1, p.pool_rate)
    return p.f3(T.mul(p.f2(x_a), gate))


def sc_context(x_b, p):
    return p.f4(x_b)


def sc_block_forward(x, p):
    _check_input(x, p)
    x_a, x_b = T.split_channels(x, x.shape[1] // 2)
    mid = sc_calibrate(x_a, p)
    y_b = sc_context(x_b, p)
    return T.prelu(T.concat_channels(mid, y_b), p.act)
