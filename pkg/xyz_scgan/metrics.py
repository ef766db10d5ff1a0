"""
MSE, PSNR and SSIM, corpus evaluation and report tables.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = (0.01 L)^2,
C2 = (0.03 L)^2 with L = 1, averaged over windows then channels.
"""
import csv, logging, math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import Image, image_id, list_images, load_image, to_luma
from .tensor import DimensionError
from .utils import format_number

logger = logging.getLogger(__name__)

INFINITE_PSNR = math.inf
CSV_HEADER = ('image', 'method', 'scale', 'psnr_db', 'ssim')
CHANNELS = ('rgb', 'luma')
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2

# x4 reference values (PSNR dB, SSIM) printed next to computed rows
REFERENCE_X4 = {
    'set5': {'Bicubic': (28.47, 0.8184), 'Our': (30.14, 0.9304)},
    'set14': {'Bicubic': (26.01, 0.7250), 'Our': (26.72, 0.8546)},
    'bsd100': {'Bicubic': (26.02, 0.6810), 'Our': (26.02, 0.8116)},
}
REFERENCE_ABLATION_X4 = {
    'Adaptive robust loss': {'set5': (30.14, 0.9304), 'set14': (26.72, 0.8546), 'bsd100': (26.02, 0.8116)},
    'MSE': {'set5': (29.31, 0.9193), 'set14': (26.14, 0.8446), 'bsd100': (25.74, 0.8056)},
}


class CorpusMismatchError(ValueError):
    pass


def _pixels(a):
    return a.pixels if isinstance(a, Image) else np.asarray(a, dtype=np.float64)


def _prepare(a, b, channel='rgb', border=0):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise DimensionError(f'image dimensions differ: {a.shape} vs {b.shape}')
    if channel not in CHANNELS:
        raise ValueError(f'channel must be one of {CHANNELS}, got {channel!r}')
    if channel == 'luma':
        a, b = to_luma(a)[:, :, None], to_luma(b)[:, :, None]
    if border:
        if a.shape[0] <= 2 * border or a.shape[1] <= 2 * border:
            raise DimensionError(f'border crop {border} leaves nothing of {a.shape[1]}x{a.shape[0]}')
        a, b = a[border:-border, border:-border], b[border:-border, border:-border]
    return a, b


def mse(a, b, channel='rgb', border=0):
    a, b = _prepare(a, b, channel, border)
    d = a - b
    return float(np.mean(d * d))


def psnr_from_mse(m):
    if m == 0:
        return INFINITE_PSNR
    return 10 * math.log10(1 / m)


def psnr(a, b, channel='rgb', border=0):
    """10 log10(1 / MSE) with peak 1; identical images give INFINITE_PSNR."""
    return psnr_from_mse(mse(a, b, channel, border))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    n = len(g)
    t = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(t, n, axis=1) @ g


def _ssim_map(a, b, g):
    mu1, mu2 = _filter_valid(a, g), _filter_valid(b, g)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = _filter_valid(a * a, g) - mu1_sq
    s2 = _filter_valid(b * b, g) - mu2_sq
    s12 = _filter_valid(a * b, g) - mu12
    return ((2 * mu12 + C1) * (2 * s12 + C2)) / ((mu1_sq + mu2_sq + C1) * (s1 + s2 + C2))


def _ssim_global(a, b):
    mu1, mu2 = a.mean(), b.mean()
    mu12 = mu1 * mu2
    s1 = np.mean((a - mu1) * (a - mu1))
    s2 = np.mean((b - mu2) * (b - mu2))
    s12 = np.mean((a - mu1) * (b - mu2))
    return ((2 * mu12 + C1) * (2 * s12 + C2)) / ((mu1 * mu1 + mu2 * mu2 + C1) * (s1 + s2 + C2))


def ssim(a, b, channel='rgb', border=0, window=SSIM_WINDOW, sigma=SSIM_SIGMA, global_window=False):
    a, b = _prepare(a, b, channel, border)
    if not global_window and (a.shape[0] < window or a.shape[1] < window):
        raise DimensionError(f'image {a.shape[1]}x{a.shape[0]} is smaller than the {window}x{window} SSIM window')
    g = gaussian_window(window, sigma)
    rs = []
    for k in range(a.shape[2]):
        if global_window:
            rs.append(float(_ssim_global(a[:, :, k], b[:, :, k])))
        else:
            rs.append(float(np.mean(_ssim_map(a[:, :, k], b[:, :, k], g))))
    return float(np.mean(rs))


# ---- reports ----

@dataclass
class MetricRow:
    image: str
    method: str
    scale: int
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    dataset: str = ''
    channel: str = 'rgb'
    border_crop: int = 0
    rows: list = field(default_factory=list)

    @property
    def mean_psnr(self):
        return float(np.mean([r.psnr_db for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self):
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def methods(self):
        rs = []
        for r in self.rows:
            if r.method not in rs:
                rs.append(r.method)
        return rs

    def for_method(self, method):
        return MetricReport(self.dataset, self.channel, self.border_crop,
                            [r for r in self.rows if r.method == method])

    def to_csv(self, path):
        with open(path, 'w', newline='', encoding='utf-8') as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.image, r.method, r.scale, format_number(r.psnr_db), format_number(r.ssim)])
        return path

    def to_text(self):
        lines = [f'dataset: {self.dataset or "-"}  channel: {self.channel}  border_crop: {self.border_crop}']
        width = max([len('image')] + [len(r.image) for r in self.rows])
        lines.append(f"{'image':<{width}}  {'method':<10}  scale  {'psnr_db':>9}  {'ssim':>7}")
        for r in self.rows:
            lines.append(f'{r.image:<{width}}  {r.method:<10}  x{r.scale:<4}  {_fmt_psnr(r.psnr_db):>9}  {r.ssim:>7.4f}')
        for m in self.methods():
            sub = self.for_method(m)
            lines.append(f"{'mean':<{width}}  {m:<10}  {'':5}  {_fmt_psnr(sub.mean_psnr):>9}  {sub.mean_ssim:>7.4f}")
        return '\n'.join(lines) + '\n'


def _fmt_psnr(v):
    return 'inf' if math.isinf(v) else f'{v:.2f}'


@dataclass
class EvalConfig:
    scale: int = 4
    channel: str = 'rgb'
    border_crop: int = 0
    method: str = 'model'
    dataset: str = ''
    global_window: bool = False
    threads: int = 1


def evaluate_pair(sr, hr, cfg):
    sr_p, hr_p = _pixels(sr), _pixels(hr)
    if hr_p.shape != sr_p.shape:
        dh, dw = hr_p.shape[0] - sr_p.shape[0], hr_p.shape[1] - sr_p.shape[1]
        if 0 <= dh < cfg.scale and 0 <= dw < cfg.scale:
            hr_p = hr_p[:sr_p.shape[0], :sr_p.shape[1]]
        else:
            raise DimensionError(f'SR {sr_p.shape[1]}x{sr_p.shape[0]} does not match HR {hr_p.shape[1]}x{hr_p.shape[0]}')
    return (psnr(sr_p, hr_p, cfg.channel, cfg.border_crop),
            ssim(sr_p, hr_p, cfg.channel, cfg.border_crop, global_window=cfg.global_window))


def match_corpus(sr_dir, hr_dir):
    sr = {image_id(p): p for p in list_images(sr_dir)}
    hr = {image_id(p): p for p in list_images(hr_dir)}
    unmatched = sorted(set(sr) ^ set(hr))
    if unmatched:
        raise CorpusMismatchError(f"unmatched files: {', '.join(unmatched)}")
    return [(k, sr[k], hr[k]) for k in sorted(sr)]


def evaluate_images(pairs, cfg):
    """pairs: [(id, sr Image, hr Image)] -> MetricReport, rows sorted by id."""
    def run(item):
        k, sr, hr = item
        p, s = evaluate_pair(sr, hr, cfg)
        return MetricRow(k, cfg.method, cfg.scale, p, s)

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as ex:
        rows = list(ex.map(run, pairs))
    rows.sort(key=lambda r: r.image)
    return MetricReport(cfg.dataset, cfg.channel, cfg.border_crop, rows)


def evaluate_corpus(sr_dir, hr_dir, cfg):
    matched = match_corpus(sr_dir, hr_dir)
    logger.info(f'evaluating {len(matched)} pairs from {sr_dir} against {hr_dir}')
    pairs = [(k, load_image(s), load_image(h)) for k, s, h in matched]
    return evaluate_images(pairs, cfg)


def format_comparison(report, scale=None):
    """Methods as columns, PSNR / SSIM as rows."""
    methods = report.methods()
    scale = scale or (report.rows[0].scale if report.rows else 0)
    width = max([7] + [len(m) for m in methods])
    head = f"{'Method':<8}{'Scale':<7}" + ''.join(f'{m:>{width + 2}}' for m in methods)
    psnr_row = f"{'PSNR':<8}{'x' + str(scale):<7}" + ''.join(
        f'{_fmt_psnr(report.for_method(m).mean_psnr):>{width + 2}}' for m in methods)
    ssim_row = f"{'SSIM':<8}{'x' + str(scale):<7}" + ''.join(
        f'{report.for_method(m).mean_ssim:>{width + 2}.4f}' for m in methods)
    lines = [f'dataset: {report.dataset or "-"}  channel: {report.channel}  border_crop: {report.border_crop}',
             head, psnr_row, ssim_row]
    ref = REFERENCE_X4.get(report.dataset.lower()) if scale == 4 else None
    if ref:
        lines.append('reference: ' + ', '.join(f'{k} {p:.2f}/{s:.4f}' for k, (p, s) in ref.items()))
    return '\n'.join(lines) + '\n'


def format_ablation(table, datasets, scale):
    """
    Loss type per row, PSNR/SSIM per dataset column.
    table: {loss name: {dataset: (psnr, ssim)}}
    """
    width = max([len('Loss')] + [len(k) for k in table] + [len(k) for k in REFERENCE_ABLATION_X4])
    cell = 16
    lines = [f"{'Loss':<{width}}  {'Scale':<6}" + ''.join(f'{d:>{cell}}' for d in datasets),
             f"{'':<{width}}  {'':<6}" + ''.join(f"{'PSNR/SSIM':>{cell}}" for _ in datasets)]
    for loss, cols in table.items():
        cells = []
        for d in datasets:
            p, s = cols[d]
            cells.append(f'{_fmt_psnr(p)}/{s:.4f}')
        lines.append(f"{loss:<{width}}  {'x' + str(scale):<6}" + ''.join(f'{c:>{cell}}' for c in cells))
    if scale == 4:
        lines.append('reference (not asserted):')
        for loss, cols in REFERENCE_ABLATION_X4.items():
            cells = [f'{cols[d.lower()][0]:.2f}/{cols[d.lower()][1]:.4f}' if d.lower() in cols else '-'
                     for d in datasets]
            lines.append(f"{loss:<{width}}  {'x4':<6}" + ''.join(f'{c:>{cell}}' for c in cells))
    return '\n'.join(lines) + '\n'
