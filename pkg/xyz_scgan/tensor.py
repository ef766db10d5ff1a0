"""
Dense NCHW tensors with tape-based reverse-mode differentiation.

Every op returns a new Tensor; when gradients are enabled and any input
requires them, the output remembers its parents and a backward rule that
maps the output gradient to one gradient per parent. ``backward(root)``
replays those rules in reverse topological order.

Conventions: cross-correlation (no kernel flip), zero padding, bilinear
upsampling with align-corners=false and clamped edges.
"""
import contextlib, logging, threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_state = threading.local()


def grad_enabled():
    return getattr(_state, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:

    def __init__(self, data, requires_grad=False, dtype=None):
        a = np.array(data, dtype=dtype, copy=True)
        if not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float64)
        self.data = a
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = 'leaf'
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f'item() needs a single value, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        g = ', requires_grad=True' if self.requires_grad else ''
        return f'<Tensor {self.op} shape={self.shape} dtype={self.dtype}{g}>'


class Parameter(Tensor):
    """A named leaf tensor owned by a model; only the optimizer mutates it."""

    def __init__(self, data, name='', learnable=True, dtype=None):
        super().__init__(data, requires_grad=learnable, dtype=dtype)
        self.name = name
        self.learnable = bool(learnable)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f'<Parameter {self.name} shape={self.shape} dtype={self.dtype}>'


class Tape:
    """Operations reachable from a root, parents before children."""

    def __init__(self, nodes):
        self.nodes = list(nodes)

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_root(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return cls(order)

    def backward(self, root):
        if root.data.size != 1:
            raise DimensionError(f'backward needs a scalar root, got shape {root.shape}')
        if not root.requires_grad:
            return
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.array(g, dtype=node.data.dtype)
                    else:
                        node.grad += g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg


def backward(root, tape=None):
    if tape is None:
        tape = Tape.from_root(root)
    tape.backward(root)
    return tape


def _result(data, parents, rule, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f'{op}: non-finite values in output')
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = rule if needs else None
    return out


def _check4(x, op):
    if x.ndim != 4:
        raise DimensionError(f'{op}: expected an (N, C, H, W) tensor, got shape {x.shape}')


def _same_shape(x, y, op):
    if x.shape != y.shape:
        raise DimensionError(f'{op}: shape mismatch {x.shape} vs {y.shape}')


def _check_finite(x, op):
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f'{op}: non-finite values in input')


# ---- convolution ----

def _pad(a, pad):
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp, kh, kw, stride):
    # (N, C, OH, OW, kh, kw) read-only view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter(cols, stride):
    # (N, C, H, W, kh, kw) -> overlap-add onto (N, C, (H-1)*stride+kh, (W-1)*stride+kw)
    n, c, h, w, kh, kw = cols.shape
    out = np.zeros((n, c, (h - 1) * stride + kh, (w - 1) * stride + kw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride] += cols[..., i, j]
    return out


def _conv_args(x, w, b, stride, pad, op):
    _check4(x, op)
    if w.ndim != 4:
        raise DimensionError(f'{op}: weight must be rank 4, got shape {w.shape}')
    if stride < 1:
        raise DimensionError(f'{op}: stride must be >= 1, got {stride}')
    if pad < 0:
        raise DimensionError(f'{op}: pad must be >= 0, got {pad}')
    _check_finite(x, op)


def conv2d(x, w, b=None, stride=1, pad=0):
    """x (N, Cin, H, W), w (Cout, Cin, kH, kW), b (Cout,) -> (N, Cout, OH, OW)."""
    _conv_args(x, w, b, stride, pad, 'conv2d')
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise DimensionError(f'conv2d: input has {cin} channels, weight expects {wcin}')
    if b is not None and b.shape != (cout,):
        raise DimensionError(f'conv2d: bias shape {b.shape} does not match {cout} output channels')
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f'conv2d: {h}x{wd} input with pad {pad} is smaller than the {kh}x{kw} kernel')

    xp = _pad(x.data, pad)
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def rule(g):
        gx = gw = gb = None
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            full = _scatter(cols, stride)
            dxp = np.zeros(xp.shape, dtype=full.dtype)
            dxp[:, :, :full.shape[2], :full.shape[3]] = full
            gx = dxp[:, :, pad:pad + h, pad:pad + wd]
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, rule, 'conv2d')


def conv2d_transposed(x, w, b=None, stride=1, pad=0):
    """
    Adjoint of conv2d: x (N, Cin, H, W), w (Cin, Cout, kH, kW) -> (N, Cout, OH, OW)
    with OH = (H - 1) * stride - 2 * pad + kH.
    """
    _conv_args(x, w, b, stride, pad, 'conv2d_transposed')
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if cin != wcin:
        raise DimensionError(f'conv2d_transposed: input has {cin} channels, weight expects {wcin}')
    if b is not None and b.shape != (cout,):
        raise DimensionError(f'conv2d_transposed: bias shape {b.shape} does not match {cout} output channels')
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise DimensionError(f'conv2d_transposed: pad {pad} leaves an empty output for {h}x{wd} input')

    cols = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _scatter(cols, stride)[:, :, pad:pad + oh, pad:pad + ow]
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def rule(g):
        gx = gw = gb = None
        win = _windows(_pad(g, pad), kh, kw, stride)
        if x.requires_grad:
            gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, rule, 'conv2d_transposed')


# ---- resampling ----

def avg_pool2d(x, r):
    _check4(x, 'avg_pool2d')
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise DimensionError(f'avg_pool2d: {h}x{w} is not divisible by pool rate {r}')
    out = x.data.reshape(n, c, h // r, r, w // r, r).mean(axis=(3, 5))

    def rule(g):
        return (np.repeat(np.repeat(g, r, axis=2), r, axis=3) / (r * r),)

    return _result(out, (x,), rule, 'avg_pool2d')


def bilinear_matrix(n, r, dtype=np.float64):
    """(n*r, n) interpolation weights, sample centers at (i + 0.5) / r - 0.5."""
    m = np.zeros((n * r, n), dtype=dtype)
    rows = np.arange(n * r)
    src = np.clip((rows + 0.5) / r - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    np.add.at(m, (rows, i0), 1 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def upsample_bilinear(x, r):
    _check4(x, 'upsample_bilinear')
    if r < 1:
        raise DimensionError(f'upsample_bilinear: rate must be >= 1, got {r}')
    n, c, h, w = x.shape
    mh = bilinear_matrix(h, r, x.dtype)
    mw = bilinear_matrix(w, r, x.dtype)
    t = np.tensordot(x.data, mw, axes=([3], [1]))
    out = np.ascontiguousarray(np.tensordot(mh, t, axes=([1], [2])).transpose(1, 2, 0, 3))

    def rule(g):
        t = np.tensordot(g, mw, axes=([3], [0]))
        return (np.tensordot(mh, t, axes=([0], [2])).transpose(1, 2, 0, 3),)

    return _result(out, (x,), rule, 'upsample_bilinear')


# ---- elementwise ----

def sigmoid(x):
    s = special.expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), 'sigmoid')


def softplus(x):
    out = np.logaddexp(0, x.data)
    return _result(out, (x,), lambda g: (g * special.expit(x.data),), 'softplus')


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), 'relu')


def leaky_relu(x, slope=0.2):
    k = np.where(x.data >= 0, 1.0, slope).astype(x.dtype)
    return _result(x.data * k, (x,), lambda g: (g * k,), 'leaky_relu')


def prelu(x, a):
    if a.data.size != 1:
        raise DimensionError(f'prelu: slope must hold one value, got shape {a.shape}')
    slope = a.data.reshape(-1)[0]
    neg = x.data < 0
    out = np.where(neg, slope * x.data, x.data)

    def rule(g):
        gx = g * np.where(neg, slope, 1)
        ga = np.asarray(np.sum(g * x.data * neg)).reshape(a.shape)
        return gx, ga

    return _result(out, (x, a), rule, 'prelu')


def add(x, y):
    _same_shape(x, y, 'add')
    return _result(x.data + y.data, (x, y), lambda g: (g, g), 'add')


def sub(x, y):
    _same_shape(x, y, 'sub')
    return _result(x.data - y.data, (x, y), lambda g: (g, -g), 'sub')


def mul(x, y):
    _same_shape(x, y, 'mul')
    return _result(x.data * y.data, (x, y), lambda g: (g * y.data, g * x.data), 'mul')


def scale(x, k):
    return _result(x.data * k, (x,), lambda g: (g * k,), 'scale')


def add_scalar(x, k):
    return _result(x.data + k, (x,), lambda g: (g,), 'add_scalar')


def square(x):
    return _result(x.data * x.data, (x,), lambda g: (2 * g * x.data,), 'square')


def log(x):
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), 'log')


def clamp(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), 'clamp')


# ---- structural ----

def narrow(x, axis, start, length):
    size = x.shape[axis]
    if start < 0 or length < 0 or start + length > size:
        raise DimensionError(f'narrow: [{start}, {start + length}) outside axis {axis} of size {size}')
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index].copy()

    def rule(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _result(out, (x,), rule, 'narrow')


def concat_channels(x, y):
    _check4(x, 'concat_channels')
    _check4(y, 'concat_channels')
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise DimensionError(f'concat_channels: shape mismatch {x.shape} vs {y.shape}')
    cx = x.shape[1]
    out = np.concatenate([x.data, y.data], axis=1)
    return _result(out, (x, y), lambda g: (g[:, :cx], g[:, cx:]), 'concat_channels')


def split_channels(x, k):
    _check4(x, 'split_channels')
    c = x.shape[1]
    if not 0 <= k <= c:
        raise DimensionError(f'split_channels: cannot take {k} of {c} channels')
    return narrow(x, 1, 0, k), narrow(x, 1, k, c - k)


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f'reshape: cannot view {x.shape} as {shape}') from None
    return _result(out.copy(), (x,), lambda g: (g.reshape(x.shape),), 'reshape')


# ---- reductions ----

def sum(x):
    out = np.sum(x.data)
    return _result(np.asarray(out), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), 'sum')


def mean(x):
    if x.data.size == 0:
        raise DimensionError('mean: empty tensor')
    n = x.data.size
    out = np.asarray(np.mean(x.data))
    return _result(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), 'mean')


def mean_spatial(x):
    _check4(x, 'mean_spatial')
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(out, (x,), rule, 'mean_spatial')


@dataclass
class Conv:
    """One convolution portion: weights, bias and geometry."""
    weight: Parameter
    bias: Optional[Parameter] = None
    stride: int = 1
    pad: int = 0
    transposed: bool = False

    def __call__(self, x):
        f = conv2d_transposed if self.transposed else conv2d
        return f(x, self.weight, self.bias, self.stride, self.pad)

    def parameters(self):
        return [p for p in (self.weight, self.bias) if p is not None]

    @property
    def kernel_size(self):
        return self.weight.shape[2]
