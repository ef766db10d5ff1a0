"""
Slow, loop-based reference implementations.

Each one follows the defining formula directly and shares no code with the
vectorized paths in ``tensor`` and ``imaging``, so agreement between the
two is evidence for both. Inputs and outputs are plain numpy arrays.
"""
import math

import numpy as np


def conv2d_loop(x, w, b=None, stride=1, pad=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, c, y * stride + u, z * stride + v] * w[o, c, u, v]
                    out[i, o, y, z] = acc
    return out


def conv2d_transposed_zero_stuffing(x, w, b=None, stride=1, pad=0):
    """Insert stride-1 zeros between inputs, pad by k-1-pad, correlate with the flipped kernel."""
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    stuffed = np.zeros((n, cin, (h - 1) * stride + 1, (wd - 1) * stride + 1))
    stuffed[:, :, ::stride, ::stride] = x
    ph, pw = kh - 1 - pad, kw - 1 - pad
    if ph < 0 or pw < 0:
        raise ValueError(f'zero-stuffing reference needs pad <= kernel - 1, got pad {pad}')
    xp = np.zeros((n, cin, stuffed.shape[2] + 2 * ph, stuffed.shape[3] + 2 * pw))
    xp[:, :, ph:ph + stuffed.shape[2], pw:pw + stuffed.shape[3]] = stuffed
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv2d_loop(xp, flipped, b, 1, 0)


def avg_pool_loop(x, r):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // r, w // r))
    for i in range(n):
        for k in range(c):
            for y in range(h // r):
                for z in range(w // r):
                    acc = 0.0
                    for u in range(r):
                        for v in range(r):
                            acc += x[i, k, y * r + u, z * r + v]
                    out[i, k, y, z] = acc / (r * r)
    return out


def _bilinear_source(o, n, r):
    s = (o + 0.5) / r - 0.5
    s = min(max(s, 0.0), n - 1.0)
    i0 = int(math.floor(s))
    i1 = min(i0 + 1, n - 1)
    return i0, i1, s - i0


def upsample_bilinear_scalar(x, r):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h * r, w * r))
    for i in range(n):
        for k in range(c):
            for oy in range(h * r):
                y0, y1, fy = _bilinear_source(oy, h, r)
                for ox in range(w * r):
                    x0, x1, fx = _bilinear_source(ox, w, r)
                    top = (1 - fx) * x[i, k, y0, x0] + fx * x[i, k, y0, x1]
                    bottom = (1 - fx) * x[i, k, y1, x0] + fx * x[i, k, y1, x1]
                    out[i, k, oy, ox] = (1 - fy) * top + fy * bottom
    return out


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def sc_block_reference(x, params, pool_rate):
    """
    ``params``: {'f1.weight', 'f1.bias', ..., 'f4.bias', 'act'} as arrays.
    Composes the block from the loop oracles above and plain numpy arithmetic.
    """
    c = x.shape[1] // 2
    x_a, x_b = x[:, :c], x[:, c:]

    def conv(name, a):
        return conv2d_loop(a, params[f'{name}.weight'], params[f'{name}.bias'], 1, 1)

    pooled = avg_pool_loop(x_a, pool_rate)
    gate = _sigmoid(x_a + upsample_bilinear_scalar(conv('f1', pooled), pool_rate))
    mid = conv('f3', conv('f2', x_a) * gate)
    y = np.concatenate([mid, conv('f4', x_b)], axis=1)
    slope = float(np.asarray(params['act']).reshape(-1)[0])
    return np.where(y < 0, slope * y, y)


def _cubic_scalar(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def _mirror(j, n):
    while j < 0 or j >= n:
        j = -1 - j if j < 0 else 2 * n - 1 - j
    return j


def _taps_1d(o, in_n, out_n):
    scale = out_n / in_n
    ks = min(scale, 1.0)
    support = 2.0 / ks
    center = (o + 0.5) / scale - 0.5
    lo = int(math.floor(center - support))
    hi = int(math.ceil(center + support))
    taps = [(j, _cubic_scalar((j - center) * ks)) for j in range(lo, hi + 1)]
    total = sum(t[1] for t in taps)
    return [(_mirror(j, in_n), wt / total) for j, wt in taps]


def bicubic_direct(pixels, out_h, out_w):
    """Per output pixel, the full 2-D kernel sum over its support; no clamping."""
    in_h, in_w, ch = pixels.shape
    out = np.zeros((out_h, out_w, ch))
    cols = [_taps_1d(ox, in_w, out_w) for ox in range(out_w)]
    for oy in range(out_h):
        rows = _taps_1d(oy, in_h, out_h)
        for ox in range(out_w):
            acc = np.zeros(ch)
            for jy, wy in rows:
                for jx, wx in cols[ox]:
                    acc += wy * wx * pixels[jy, jx]
            out[oy, ox] = acc
    return out
