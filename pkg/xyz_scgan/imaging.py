"""
Image I/O, bicubic degradation, cropping and tensor conversion.

Images are H x W x 3 float64 arrays in [0, 1]; grayscale sources are
replicated to three channels on load.
"""
import logging, os
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, DimensionError
from .utils import is_power_of_two

logger = logging.getLogger(__name__)

try:
    from PIL import Image as PILImage
    has_pil = True
except ImportError:
    logger.warning('cannot load Pillow. Only PPM/PGM images can be read and written')
    has_pil = False

IMAGE_EXTENSIONS = ('.png', '.ppm', '.pgm', '.bmp', '.tif', '.tiff', '.jpg', '.jpeg')
PNM_EXTENSIONS = ('.ppm', '.pgm', '.pnm')
PIL_MODES = ('1', 'L', 'LA', 'P', 'RGB', 'RGBA')


class ImageFormatError(ValueError):
    pass


class CropError(ValueError):
    pass


@dataclass(eq=False)
class Image:
    pixels: np.ndarray
    source_depth: int = 8

    def __post_init__(self):
        p = np.array(self.pixels, dtype=np.float64)
        if p.ndim == 3 and p.shape[2] == 1:
            p = p[:, :, 0]
        if p.ndim == 2:
            p = np.repeat(p[:, :, None], 3, axis=2)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ImageFormatError(f'expected an H x W x 3 pixel grid, got shape {p.shape}')
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ImageFormatError(f'zero-dimension image {p.shape[1]}x{p.shape[0]}')
        if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
            raise ImageFormatError('pixel values must lie in [0, 1]')
        self.pixels = p

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def size(self):
        return self.width, self.height

    def quantize(self):
        return Image(np.round(self.pixels * 255) / 255, self.source_depth)

    def __repr__(self):
        return f'<Image {self.width}x{self.height}>'


# ---- file I/O ----

def _read_pnm(path):
    with open(path, 'rb') as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b'#':
            while pos < len(raw) and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f'{path}: truncated header')
        tokens.append(raw[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b'P5', b'P6'):
        raise ImageFormatError(f'{path}: unsupported PNM type {magic!r}')
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f'{path}: bad header') from None
    if w < 1 or h < 1:
        raise ImageFormatError(f'{path}: zero-dimension image {w}x{h}')
    if not 0 < maxval < 65536:
        raise ImageFormatError(f'{path}: bad maxval {maxval}')
    channels = 3 if magic == b'P6' else 1
    dtype = np.dtype('>u2') if maxval > 255 else np.dtype('u1')
    need = w * h * channels * dtype.itemsize
    body = raw[pos:pos + need]
    if len(body) < need:
        raise ImageFormatError(f'{path}: truncated pixel data ({len(body)} of {need} bytes)')
    a = np.frombuffer(body, dtype=dtype).reshape(h, w, channels).astype(np.float64) / maxval
    return Image(a, source_depth=16 if maxval > 255 else 8)


def _write_pnm(q, path):
    h, w, _ = q.shape
    with open(path, 'wb') as f:
        f.write(f'P6\n{w} {h}\n255\n'.encode('ascii'))
        f.write(q.tobytes())


def load_image(path):
    path = str(path)
    ext = os.path.splitext(path)[1].lower()
    if not os.path.isfile(path):
        raise ImageFormatError(f'{path}: no such file')
    if not has_pil:
        if ext not in PNM_EXTENSIONS:
            raise ImageFormatError(f'{path}: unsupported format without Pillow')
        return _read_pnm(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode not in PIL_MODES:
                raise ImageFormatError(f'{path}: unsupported pixel mode {im.mode}')
            if im.mode in ('1', 'LA'):
                im = im.convert('L')
            elif im.mode in ('P', 'RGBA'):
                im = im.convert('RGB')
            a = np.asarray(im, dtype=np.float64) / 255
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as e:
        raise ImageFormatError(f'{path}: {e}') from None
    return Image(a, source_depth=8)


def save_image(img, path):
    path = str(path)
    ext = os.path.splitext(path)[1].lower()
    q = np.round(np.clip(img.pixels, 0, 1) * 255).astype(np.uint8)
    if not has_pil or ext in PNM_EXTENSIONS:
        if ext not in PNM_EXTENSIONS:
            raise ImageFormatError(f'{path}: unsupported format without Pillow')
        _write_pnm(q, path)
        return path
    try:
        PILImage.fromarray(q).save(path)
    except (KeyError, ValueError, OSError) as e:
        raise ImageFormatError(f'{path}: {e}') from None
    return path


def list_images(source):
    """Image paths in a directory (sorted), or listed in a manifest file, one relative path per line."""
    source = str(source)
    if os.path.isdir(source):
        names = sorted(n for n in os.listdir(source) if n.lower().endswith(IMAGE_EXTENSIONS))
        return [os.path.join(source, n) for n in names]
    base = os.path.dirname(source)
    with open(source, encoding='utf-8') as f:
        lines = [a.strip() for a in f]
    return [os.path.join(base, a) for a in lines if a and not a.startswith('#')]


def image_id(path):
    return os.path.splitext(os.path.basename(str(path)))[0]


# ---- resampling ----

def cubic(x, a=-0.5):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def reflect_index(j, n):
    period = 2 * n
    m = np.mod(j, period)
    return np.where(m < n, m, period - 1 - m)


def resize_matrix(in_n, out_n):
    """(out_n, in_n) resampling weights; kernel widened by 1/scale when shrinking."""
    if in_n < 1 or out_n < 1:
        raise DimensionError(f'resize: dimensions must be >= 1, got {in_n} -> {out_n}')
    scale = out_n / in_n
    ks = min(scale, 1.0)
    support = 2.0 / ks
    centers = (np.arange(out_n) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(np.int64)
    taps = int(np.ceil(2 * support)) + 2
    j = left[:, None] + np.arange(taps)[None, :]
    w = cubic((j - centers[:, None]) * ks)
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((out_n, in_n))
    rows = np.repeat(np.arange(out_n), taps)
    np.add.at(m, (rows, reflect_index(j, in_n).ravel()), w.ravel())
    return m


def resize_array(pixels, out_h, out_w):
    mh = resize_matrix(pixels.shape[0], out_h)
    mw = resize_matrix(pixels.shape[1], out_w)
    t = np.tensordot(mh, pixels, axes=([1], [0]))
    return np.tensordot(t, mw, axes=([1], [1])).transpose(0, 2, 1)


def bicubic_resize(img, out_w, out_h):
    if out_w < 1 or out_h < 1:
        raise DimensionError(f'bicubic_resize: output dimensions must be >= 1, got {out_w}x{out_h}')
    out = resize_array(img.pixels, out_h, out_w)
    return Image(np.clip(out, 0, 1), img.source_depth)


# ---- cropping and pairs ----

def crop_box(height, width, size, seed):
    if size < 1 or height < size or width < size:
        raise CropError(f'image {width}x{height} is smaller than crop {size}')
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def random_crop(img, size, seed):
    top, left = crop_box(img.height, img.width, size, seed)
    return Image(img.pixels[top:top + size, left:left + size].copy(), img.source_depth)


def modcrop(img, multiple):
    h = img.height - img.height % multiple
    w = img.width - img.width % multiple
    if h < 1 or w < 1:
        raise CropError(f'image {img.width}x{img.height} is smaller than {multiple}')
    if (h, w) == (img.height, img.width):
        return img
    return Image(img.pixels[:h, :w].copy(), img.source_depth)


@dataclass
class PairSpec:
    scale: int = 4
    crop_size: int = 128
    rng_seed: int = 0

    def __post_init__(self):
        # scale 1 is accepted for tests, the pipeline uses 2, 4 and 8
        if not is_power_of_two(self.scale):
            raise ValueError(f'scale must be a power of two, got {self.scale}')
        if self.crop_size < 1 or self.crop_size % self.scale:
            raise ValueError(f'crop size {self.crop_size} is not divisible by scale {self.scale}')


def make_pair(img, spec):
    hr = random_crop(img, spec.crop_size, spec.rng_seed)
    n = spec.crop_size // spec.scale
    lr = bicubic_resize(hr, n, n)
    return lr, hr


def degrade(img, scale):
    hr = modcrop(img, scale)
    return bicubic_resize(hr, hr.width // scale, hr.height // scale), hr


# ---- tensors ----

def to_tensor(images, dtype=np.float64, requires_grad=False):
    images = list(images)
    if not images:
        raise DimensionError('to_tensor: empty batch')
    dims = {a.pixels.shape for a in images}
    if len(dims) != 1:
        raise DimensionError(f'to_tensor: ragged batch {sorted(dims)}')
    a = np.stack([im.pixels.transpose(2, 0, 1) for im in images]).astype(dtype)
    return Tensor(a, requires_grad=requires_grad)


def from_tensor(t):
    a = t.data if isinstance(t, Tensor) else np.asarray(t)
    if a.ndim != 4 or a.shape[1] != 3:
        raise DimensionError(f'from_tensor: expected (N, 3, H, W), got {a.shape}')
    return [Image(np.clip(x.transpose(1, 2, 0), 0, 1).astype(np.float64)) for x in a]


def to_luma(pixels):
    """BT.601 luma in [16/255, 235/255], as used by the usual SR evaluation scripts."""
    return (16.0 + pixels[..., 0] * 65.481 + pixels[..., 1] * 128.553 + pixels[..., 2] * 24.966) / 255.0


# ---- synthetic corpus ----

SYNTHETIC_KINDS = ('gradient', 'checkerboard', 'blobs', 'rings')


def synthetic_image(kind, size, rng):
    y, x = np.mgrid[0:size, 0:size] / float(size)
    if kind == 'gradient':
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * x + np.sin(theta) * y)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        p = c0 + t[:, :, None] * (c1 - c0)
    elif kind == 'checkerboard':
        period = int(rng.choice([8, 16, 32]))
        iy, ix = np.mgrid[0:size, 0:size]
        cell = ((iy // period + ix // period) % 2).astype(np.float64)
        c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        p = c0 + cell[:, :, None] * (c1 - c0)
    elif kind == 'blobs':
        p = np.tile(rng.uniform(0, 0.3, 3), (size, size, 1))
        for _ in range(int(rng.integers(3, 8))):
            cx, cy = rng.uniform(0, 1, 2)
            s = rng.uniform(0.04, 0.2)
            g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
            p = p + g[:, :, None] * rng.uniform(0, 0.7, 3)
    elif kind == 'rings':
        cx, cy = rng.uniform(0.2, 0.8, 2)
        f = rng.uniform(4, 12)
        r = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
        t = 0.5 + 0.5 * np.cos(2 * np.pi * f * r)
        c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        p = c0 + t[:, :, None] * (c1 - c0)
    else:
        raise ValueError(f'unknown synthetic kind {kind!r}')
    return Image(np.clip(p, 0, 1))


def synthetic_corpus(n, size=256, seed=0):
    rng = np.random.default_rng(seed)
    rs = []
    for i in range(n):
        kind = SYNTHETIC_KINDS[i % len(SYNTHETIC_KINDS)]
        rs.append((f'synth_{i:03d}_{kind}', synthetic_image(kind, size, rng).quantize()))
    return rs


def write_synthetic_corpus(out_dir, n, size=256, seed=0, ext='.png'):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, img in synthetic_corpus(n, size, seed):
        paths.append(save_image(img, os.path.join(out_dir, name + ext)))
    return paths
