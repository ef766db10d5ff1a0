"""
Generator, discriminator and the checkpoint container.

Generator: 3x3 head conv -> SC blocks with a long skip from the head ->
log2(scale) stride-2 transposed convs (k=4, pad 1) each followed by PReLU
-> 3x3 tail conv -> sigmoid.

Discriminator: unpadded strided 5x5 convs with LeakyReLU -> 1x1 conv to a
score map -> spatial mean -> sigmoid. Without padding every score sees
only real pixels, so the head is indifferent to input size.

Checkpoint layout (little endian)::

    b'SCSR' | version u8 | header length u32 | JSON header | float32 payload | crc32 u32
"""
import json, logging, math, os, struct, zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .imaging import from_tensor, to_tensor
from .scconv import SCBlockParams, sc_block_forward
from .tensor import Conv, DimensionError, Parameter
from .utils import is_power_of_two

logger = logging.getLogger(__name__)

MAGIC = b'SCSR'
VERSION = 1
PRELU_INIT = 0.25


class DivisibilityError(DimensionError):
    pass


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class GeneratorConfig:
    scale: int = 4
    n_sc_blocks: int = 4
    base_channels: int = 64
    pool_rate: int = 4
    head_kernel: int = 3
    tail_kernel: int = 3
    up_kernel: int = 4

    def __post_init__(self):
        if not is_power_of_two(self.scale) or self.scale < 2:
            raise ValueError(f'scale must be a power of two >= 2, got {self.scale}')
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f'base_channels must be even, got {self.base_channels}')
        if self.n_sc_blocks < 1:
            raise ValueError(f'n_sc_blocks must be >= 1, got {self.n_sc_blocks}')
        if self.pool_rate < 2:
            raise ValueError(f'pool_rate must be >= 2, got {self.pool_rate}')

    @property
    def n_stages(self):
        return int(math.log2(self.scale))

    def as_dict(self):
        return asdict(self)


@dataclass
class DiscriminatorConfig:
    channels: tuple = (64, 128, 256, 512)
    kernel: int = 5
    stride: int = 2
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ValueError(f'bad discriminator channel schedule {self.channels}')

    @property
    def n_layers(self):
        return len(self.channels) + 1

    def min_input_size(self):
        s = 1
        for _ in self.channels:
            s = (s - 1) * self.stride + self.kernel
        return s

    def as_dict(self):
        d = asdict(self)
        d['channels'] = list(self.channels)
        return d


# ---- layouts and init ----

def generator_layout(config):
    """[(name, shape)] in parameter order."""
    c, h = config.base_channels, config.base_channels // 2
    kh, kt, ku = config.head_kernel, config.tail_kernel, config.up_kernel
    rs = [('head.weight', (c, 3, kh, kh)), ('head.bias', (c,))]
    for i in range(config.n_sc_blocks):
        for f in ('f1', 'f2', 'f3', 'f4'):
            rs.append((f'blocks.{i}.{f}.weight', (h, h, 3, 3)))
            rs.append((f'blocks.{i}.{f}.bias', (h,)))
        rs.append((f'blocks.{i}.act', (1,)))
    for s in range(config.n_stages):
        rs.append((f'up.{s}.weight', (c, c, ku, ku)))
        rs.append((f'up.{s}.bias', (c,)))
        rs.append((f'up.{s}.act', (1,)))
    rs += [('tail.weight', (3, c, kt, kt)), ('tail.bias', (3,))]
    return rs


def discriminator_layout(config):
    rs = []
    cin = 3
    for i, c in enumerate(config.channels):
        rs.append((f'conv.{i}.weight', (c, cin, config.kernel, config.kernel)))
        rs.append((f'conv.{i}.bias', (c,)))
        cin = c
    rs += [('head.weight', (1, cin, 1, 1)), ('head.bias', (1,))]
    return rs


def _layout(config):
    if isinstance(config, GeneratorConfig):
        return generator_layout(config)
    if isinstance(config, DiscriminatorConfig):
        return discriminator_layout(config)
    raise TypeError(f'no parameter layout for {type(config).__name__}')


def init_params(config, seed, dtype=np.float64):
    """
    Fan-in scaled normal weights (std sqrt(2 / fan_in), fan_in = shape[1] * kH * kW),
    zero biases, PReLU slopes 0.25. Deterministic under ``seed``.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in _layout(config):
        if name.endswith('.weight'):
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif name.endswith('.act'):
            data = np.full(shape, PRELU_INIT)
        else:
            data = np.zeros(shape)
        params[name] = Parameter(data, name=name, dtype=dtype)
    return params


def _check_params(layout, params, what):
    expected = OrderedDict(layout)
    missing = [n for n in expected if n not in params]
    extra = [n for n in params if n not in expected]
    if missing or extra:
        raise ShapeMismatchError(f'{what}: missing {missing}, unexpected {extra}')
    for n, shape in expected.items():
        if tuple(params[n].shape) != tuple(shape):
            raise ShapeMismatchError(f'{what}: {n} has shape {params[n].shape}, expected {shape}')


# ---- models ----

class Generator:

    def __init__(self, config, params=None, seed=0, dtype=np.float64):
        self.config = config
        if params is None:
            params = init_params(config, seed, dtype)
        _check_params(generator_layout(config), params, 'generator')
        self.params = OrderedDict((n, params[n]) for n, _ in generator_layout(config))
        p = self.params
        k = config.head_kernel
        self.head = Conv(p['head.weight'], p['head.bias'], 1, k // 2)
        self.blocks = []
        for i in range(config.n_sc_blocks):
            convs = [Conv(p[f'blocks.{i}.{f}.weight'], p[f'blocks.{i}.{f}.bias'], 1, 1)
                     for f in ('f1', 'f2', 'f3', 'f4')]
            self.blocks.append(SCBlockParams(*convs, act=p[f'blocks.{i}.act'], pool_rate=config.pool_rate))
        self.ups = []
        for s in range(config.n_stages):
            conv = Conv(p[f'up.{s}.weight'], p[f'up.{s}.bias'], 2, (config.up_kernel - 2) // 2, transposed=True)
            self.ups.append((conv, p[f'up.{s}.act']))
        k = config.tail_kernel
        self.tail = Conv(p['tail.weight'], p['tail.bias'], 1, k // 2)

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, lr):
        return generator_forward(lr, self)


class Discriminator:

    def __init__(self, config, params=None, seed=0, dtype=np.float64):
        self.config = config
        if params is None:
            params = init_params(config, seed, dtype)
        _check_params(discriminator_layout(config), params, 'discriminator')
        self.params = OrderedDict((n, params[n]) for n, _ in discriminator_layout(config))
        p = self.params
        self.convs = [Conv(p[f'conv.{i}.weight'], p[f'conv.{i}.bias'], config.stride, 0)
                      for i in range(len(config.channels))]
        self.head = Conv(p['head.weight'], p['head.bias'], 1, 0)

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, img):
        return discriminator_forward(img, self)


def generator_forward(lr, g):
    T._check4(lr, 'generator')
    n, c, h, w = lr.shape
    if c != 3:
        raise DimensionError(f'generator: expected 3 input channels, got {c}')
    m = g.config.pool_rate
    if h % m or w % m:
        raise DivisibilityError(f'generator: input {w}x{h} must be a multiple of {m} in both dimensions')
    feat = g.head(lr)
    x = feat
    for block in g.blocks:
        x = sc_block_forward(x, block)
    x = T.add(x, feat)
    for conv, act in g.ups:
        x = T.prelu(conv(x), act)
    return T.sigmoid(g.tail(x))


def discriminator_forward(img, d):
    T._check4(img, 'discriminator')
    n, c, h, w = img.shape
    m = d.config.min_input_size()
    if h < m or w < m:
        raise DimensionError(f'discriminator: input {w}x{h} is below the minimum size {m}x{m}')
    x = img
    for conv in d.convs:
        x = T.leaky_relu(conv(x), d.config.leaky_slope)
    return T.sigmoid(T.mean_spatial(d.head(x)))


def super_resolve(g, image):
    m = g.config.pool_rate
    if image.width % m or image.height % m:
        raise DivisibilityError(
            f'input {image.width}x{image.height} must be a multiple of {m} in both dimensions')
    dtype = g.params['head.weight'].dtype
    with T.no_grad():
        out = generator_forward(to_tensor([image], dtype=dtype), g)
    return from_tensor(out)[0]


# ---- checkpoints ----

@dataclass
class Checkpoint:
    config: dict
    params: OrderedDict
    rng_state: dict = None
    version: int = VERSION

    def subset(self, prefix):
        return OrderedDict((n[len(prefix):], p) for n, p in self.params.items() if n.startswith(prefix))


def expected_layout(config):
    """Prefixed parameter layout implied by a checkpoint config echo."""
    rs = []
    if 'generator' in config:
        rs += [('g.' + n, s) for n, s in generator_layout(GeneratorConfig(**config['generator']))]
    if 'discriminator' in config:
        rs += [('d.' + n, s) for n, s in discriminator_layout(DiscriminatorConfig(**config['discriminator']))]
    if 'loss' in config:
        rs += [('loss.theta_alpha', (1,)), ('loss.theta_c', (1,))]
    return rs


def save_checkpoint(params, path, config, rng_state=None):
    names = list(params)
    _check_params(expected_layout(config), params, 'checkpoint')
    header = {
        'config': config,
        'params': [[n, list(params[n].shape)] for n in names],
        'rng_state': rng_state,
    }
    hb = json.dumps(header, sort_keys=True).encode('utf-8')
    body = MAGIC + struct.pack('<BI', VERSION, len(hb)) + hb
    body += b''.join(np.asarray(params[n].data, dtype='<f4').tobytes() for n in names)
    tmp = f'{path}.tmp'
    with open(tmp, 'wb') as f:
        f.write(body + struct.pack('<I', zlib.crc32(body)))
    os.replace(tmp, path)
    return path


def _config_diff(expected, actual, prefix=''):
    rs = []
    for k, v in expected.items():
        a = actual.get(k) if isinstance(actual, dict) else None
        if isinstance(v, dict):
            rs += _config_diff(v, a or {}, f'{prefix}{k}.')
        elif a != v:
            rs.append(f'{prefix}{k}: checkpoint {a!r}, expected {v!r}')
    return rs


def load_checkpoint(path, expected_config=None):
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < 13 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f'{path}: not a checkpoint (bad magic or too short)')
    version, hlen = struct.unpack('<BI', raw[4:9])
    if version != VERSION:
        raise CheckpointVersionError(f'{path}: format version {version}, this build reads {VERSION}')
    if len(raw) < 9 + hlen + 4:
        raise CorruptCheckpointError(f'{path}: truncated header')
    body, crc = raw[:-4], struct.unpack('<I', raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError(f'{path}: checksum mismatch (truncated or damaged file)')
    try:
        header = json.loads(raw[9:9 + hlen].decode('utf-8'))
    except ValueError:
        raise CorruptCheckpointError(f'{path}: unreadable header') from None

    params = OrderedDict()
    pos = 9 + hlen
    for name, shape in header['params']:
        n = int(np.prod(shape)) * 4
        chunk = body[pos:pos + n]
        if len(chunk) != n:
            raise CorruptCheckpointError(f'{path}: payload ends inside {name}')
        data = np.frombuffer(chunk, dtype='<f4').reshape(shape).astype(np.float32)
        params[name] = Parameter(data, name=name, dtype=np.float32)
        pos += n
    if pos != len(body):
        raise CorruptCheckpointError(f'{path}: {len(body) - pos} trailing payload bytes')

    config = header['config']
    if expected_config:
        diff = _config_diff(expected_config, config)
        if diff:
            raise ConfigMismatchError(f'{path}: ' + '; '.join(diff))
    _check_params(expected_layout(config), params, str(path))
    return Checkpoint(config=config, params=params, rng_state=header.get('rng_state'), version=version)


def load_generator(path, scale=None):
    ck = load_checkpoint(path, expected_config={'generator': {'scale': scale}} if scale else None)
    if 'generator' not in ck.config:
        raise ConfigMismatchError(f'{path}: checkpoint holds no generator')
    return Generator(GeneratorConfig(**ck.config['generator']), params=ck.subset('g.'))
