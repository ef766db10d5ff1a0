"""
Alternating GAN optimization.

Each iteration makes one discriminator update on real HR crops against
detached generator outputs, then one generator update on the weighted
four-term loss (the robust-loss shape and scale learn alongside G).
Everything random flows from ``TrainConfig.seed``.
"""
import contextlib, csv, io, logging, math, time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import config as settings
from . import losses as L
from . import tensor as T
from .config import ConfigError, build_options, dump_config, load_config_file, to_bool, to_int_tuple
from .imaging import CropError, Image, PairSpec, make_pair, to_tensor
from .losses import FeatureExtractor, LossWeights, RobustLossParams, TrainingDivergence
from .metrics import EvalConfig, evaluate_images, format_ablation, psnr
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, super_resolve
from .tensor import DimensionError, NumericError
from .utils import format_number, seed_streams

logger = logging.getLogger(__name__)

CONTENT_LOSSES = ('robust', 'mse')
LOSS_LABELS = {'robust': 'Adaptive robust loss', 'mse': 'MSE'}

# settings of the original large-scale run; differences are listed in the run header
REFERENCE_SETTINGS = {
    'batch_size': 64,
    'lr_initial': 5e-4,
    'lr_after': 1e-4,
    'switch_epoch': 20,
    'rmsprop_decay': 0.9,
    'crop_size': 128,
}


class IsolationError(ValueError):
    pass


@dataclass
class TrainConfig:
    scale: int = 4
    batch_size: int = 8
    lr_initial: float = 5e-4
    lr_after: float = 1e-4
    switch_epoch: int = 20
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    epochs: int = 1
    iterations_per_epoch: int = 0
    max_iterations: int = 0
    seed: int = 0
    crop_size: int = 128
    n_sc_blocks: int = 4
    base_channels: int = 64
    pool_rate: int = 4
    d_channels: tuple = (64, 128, 256, 512)
    content_loss: str = 'robust'
    w_adv: float = 1e-3
    w_robust: float = 1.0
    w_perceptual: float = 6e-3
    w_tv: float = 2e-8
    alpha_init: float = 1.0
    c_init: float = 0.1
    learn_robust: bool = True
    perceptual_channels: tuple = L.FEATURE_CHANNELS
    perceptual_tap: int = L.FEATURE_TAP
    perceptual_weights: str = ''
    dtype: str = settings.DTYPE
    threads: int = 1
    log_every: int = 10
    log_wall_time: bool = True
    paranoid: bool = False

    def __post_init__(self):
        self.d_channels = to_int_tuple(self.d_channels)
        self.perceptual_channels = to_int_tuple(self.perceptual_channels)
        if not (self.lr_initial > 0 and self.lr_after > 0):
            raise ConfigError(f'learning rates must be > 0, got {self.lr_initial} / {self.lr_after}')
        if self.batch_size < 1:
            raise ConfigError(f'batch_size must be >= 1, got {self.batch_size}')
        if not 0 < self.rmsprop_decay < 1:
            raise ConfigError(f'rmsprop_decay must be in (0, 1), got {self.rmsprop_decay}')
        if self.rmsprop_eps < 0:
            raise ConfigError(f'rmsprop_eps must be >= 0, got {self.rmsprop_eps}')
        if self.switch_epoch < 0 or self.epochs < 1:
            raise ConfigError(f'need switch_epoch >= 0 and epochs >= 1, got {self.switch_epoch} / {self.epochs}')
        if self.content_loss not in CONTENT_LOSSES:
            raise ConfigError(f'content_loss must be one of {CONTENT_LOSSES}, got {self.content_loss!r}')
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError(f'dtype must be float32 or float64, got {self.dtype!r}')
        if self.scale < 1 or self.pool_rate < 1:
            raise ConfigError(f'scale and pool_rate must be >= 1, got {self.scale} / {self.pool_rate}')
        if self.crop_size % self.scale or (self.crop_size // self.scale) % self.pool_rate:
            raise ConfigError(f'crop_size {self.crop_size} must be a multiple of scale * pool_rate '
                              f'({self.scale * self.pool_rate})')
        try:
            m = self.discriminator_config().min_input_size()
            self.generator_config()
            self.loss_weights()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.crop_size < m:
            raise ConfigError(f'crop_size {self.crop_size} is below the discriminator minimum {m}')

    @classmethod
    def field_types(cls):
        conv = {int: int, float: float, bool: to_bool, str: str, tuple: to_int_tuple}
        return {f.name: conv[type(f.default)] for f in fields(cls)}

    @classmethod
    def from_options(cls, data, **overrides):
        opts = build_options(data, cls.field_types())
        opts.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**opts)

    @classmethod
    def from_file(cls, path, **overrides):
        return cls.from_options(load_config_file(path), **overrides)

    def as_dict(self):
        d = asdict(self)
        d['d_channels'] = list(self.d_channels)
        d['perceptual_channels'] = list(self.perceptual_channels)
        return d

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def generator_config(self):
        return GeneratorConfig(scale=self.scale, n_sc_blocks=self.n_sc_blocks,
                               base_channels=self.base_channels, pool_rate=self.pool_rate)

    def discriminator_config(self):
        return DiscriminatorConfig(channels=self.d_channels)

    def loss_weights(self):
        return LossWeights(self.w_adv, self.w_robust, self.w_perceptual, self.w_tv)

    def checkpoint_config(self):
        d = {'generator': self.generator_config().as_dict(),
             'discriminator': self.discriminator_config().as_dict(),
             'train': self.as_dict()}
        if self.content_loss == 'robust':
            d['loss'] = {'content_loss': 'robust', 'alpha_lo': 0.001, 'alpha_hi': 2.0}
        return d

    def overrides(self):
        """[(key, this run, reference run)] for every setting that departs from the reference run."""
        return [(k, getattr(self, k), v) for k, v in REFERENCE_SETTINGS.items() if getattr(self, k) != v]


# ---- optimizer ----

def rmsprop_step(params, grads, state, lr, decay=0.9, eps=1e-8):
    """
    In place, per array:
        s <- decay * s + (1 - decay) * g^2
        p <- p - lr * g / (sqrt(s) + eps)
    """
    if not len(params) == len(grads) == len(state):
        raise DimensionError(f'rmsprop_step: {len(params)} params, {len(grads)} grads, {len(state)} states')
    for p, g, s in zip(params, grads, state):
        if p.shape != g.shape or p.shape != s.shape:
            raise DimensionError(f'rmsprop_step: shapes {p.shape} / {g.shape} / {s.shape} differ')
        s *= decay
        s += (1 - decay) * g * g
        p -= lr * g / (np.sqrt(s) + eps)
    return params, state


class RMSprop:

    def __init__(self, params, lr=5e-4, decay=0.9, eps=1e-8):
        self.params = [p for p in params if p.learnable]
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.state = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f'non-finite gradient for {p.name}')
        rmsprop_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                     self.lr if lr is None else lr, self.decay, self.eps)


def lr_schedule(epoch, cfg):
    if epoch < 0:
        raise ValueError(f'epoch must be >= 0, got {epoch}')
    return cfg.lr_initial if epoch < cfg.switch_epoch else cfg.lr_after


# ---- log ----

class TrainLog:
    columns = ('iter', 'epoch', 'd_loss', 'g_loss', 'adv', 'content', 'perceptual', 'tv',
               'lr', 'alpha', 'c', 'wall_ms')

    def __init__(self):
        self.rows = []

    def __len__(self):
        return len(self.rows)

    def append(self, **kwargs):
        row = tuple(kwargs[c] for c in self.columns)
        if self.rows and row[0] <= self.rows[-1][0]:
            raise ValueError(f'iteration {row[0]} after {self.rows[-1][0]}')
        self.rows.append(row)

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator='\n')
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([format_number(v) for v in r])
        return buf.getvalue()

    def write(self, path):
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(self.to_csv_text())
        return path


@dataclass
class TrainResult:
    config: TrainConfig
    generator: Generator
    discriminator: Discriminator
    robust: RobustLossParams
    log: TrainLog
    iterations: int = 0
    checkpoints: list = field(default_factory=list)

    def named_parameters(self):
        rs = [('g.' + n, p) for n, p in self.generator.named_parameters()]
        rs += [('d.' + n, p) for n, p in self.discriminator.named_parameters()]
        if self.robust is not None:
            rs += [('loss.' + n, p) for n, p in self.robust.named_parameters()]
        return rs


@contextlib.contextmanager
def _term(name):
    try:
        yield
    except NumericError as e:
        raise TrainingDivergence(name, f'{name}: {e}') from e


def _snapshot(params):
    return [p.data.copy() for p in params]


def _assert_unchanged(params, snap, what):
    for p, s in zip(params, snap):
        if not np.array_equal(p.data, s):
            raise IsolationError(f'{what} parameter {p.name} changed')


def _assert_zero_grads(params, what):
    for p in params:
        if np.any(p.grad != 0):
            raise IsolationError(f'gradient reached {what} parameter {p.name}')


def run_header(cfg, n_images):
    lines = ['# resolved training config', dump_config(cfg.as_dict()).rstrip('\n'),
             f'# corpus: {n_images} images']
    for k, mine, ref in cfg.overrides():
        msg = f'desk-scale override: {k} = {mine} (reference run: {ref})'
        logger.warning(msg)
        lines.append('# ' + msg)
    return '\n'.join(lines) + '\n'


def _images(corpus):
    rs = []
    for item in corpus:
        img = item[1] if isinstance(item, tuple) else item
        if not isinstance(img, Image):
            raise TypeError(f'corpus items must be Image or (name, Image), got {type(img).__name__}')
        rs.append(img)
    return rs


def _feature_extractor(cfg):
    if cfg.perceptual_weights:
        return FeatureExtractor.from_file(cfg.perceptual_weights, tap=cfg.perceptual_tap, dtype=cfg.np_dtype)
    return FeatureExtractor(channels=cfg.perceptual_channels, tap=cfg.perceptual_tap, dtype=cfg.np_dtype)


def train(cfg, corpus, store=None):
    images = _images(corpus)
    if not images:
        raise ValueError('training corpus is empty')
    for i, img in enumerate(images):
        if img.height < cfg.crop_size or img.width < cfg.crop_size:
            raise CropError(f'corpus image {i} ({img.width}x{img.height}) is smaller than crop {cfg.crop_size}')

    header = run_header(cfg, len(images))
    if store is not None:
        store.ensure()
        store.write_header(header)

    s_g, s_d, s_data = seed_streams(cfg.seed, 3)
    dtype = cfg.np_dtype
    g = Generator(cfg.generator_config(), seed=s_g, dtype=dtype)
    d = Discriminator(cfg.discriminator_config(), seed=s_d, dtype=dtype)
    robust = None
    if cfg.content_loss == 'robust':
        robust = RobustLossParams(cfg.alpha_init, cfg.c_init, learnable=cfg.learn_robust, dtype=dtype)
    fe = _feature_extractor(cfg)
    weights = cfg.loss_weights()
    g_params = g.parameters() + (robust.parameters() if robust else [])
    opt_g = RMSprop(g_params, cfg.lr_initial, cfg.rmsprop_decay, cfg.rmsprop_eps)
    opt_d = RMSprop(d.parameters(), cfg.lr_initial, cfg.rmsprop_decay, cfg.rmsprop_eps)
    rng = np.random.default_rng(s_data)
    logger.info(f'generator {g.num_parameters()} params, discriminator {d.num_parameters()} params')

    result = TrainResult(cfg, g, d, robust, TrainLog())
    per_epoch = cfg.iterations_per_epoch or math.ceil(len(images) / cfg.batch_size)
    it = 0
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            order = np.concatenate([rng.permutation(len(images))
                                    for _ in range(math.ceil(per_epoch * cfg.batch_size / len(images)))])
            for b in range(per_epoch):
                if cfg.max_iterations and it >= cfg.max_iterations:
                    break
                t0 = time.perf_counter()
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                crop_seeds = rng.integers(0, 2 ** 63, len(idx))
                specs = [PairSpec(cfg.scale, cfg.crop_size, int(s)) for s in crop_seeds]
                pairs = list(pool.map(make_pair, [images[i] for i in idx], specs))
                lr_t = to_tensor([p[0] for p in pairs], dtype=dtype)
                hr_t = to_tensor([p[1] for p in pairs], dtype=dtype)
                row = _iteration(cfg, g, d, robust, fe, weights, opt_g, opt_d, lr_t, hr_t, lr)
                it += 1
                wall = (time.perf_counter() - t0) * 1000 if cfg.log_wall_time else 0
                result.log.append(iter=it, epoch=epoch, lr=lr, wall_ms=wall, **row)
                if it % cfg.log_every == 0 or it == 1:
                    logger.info(f"iter {it} epoch {epoch} d_loss {row['d_loss']:.5f} g_loss {row['g_loss']:.5f} "
                                f"adv {row['adv']:.5f} content {row['content']:.5f} "
                                f"perceptual {row['perceptual']:.5f} tv {row['tv']:.5f} lr {lr:g} "
                                f"alpha {row['alpha']:.4f} c {row['c']:.5f}")
            if store is not None:
                result.checkpoints.append(store.save_checkpoint(
                    epoch + 1, dict(result.named_parameters()), cfg.checkpoint_config(),
                    rng_state=rng.bit_generator.state))
            if cfg.max_iterations and it >= cfg.max_iterations:
                break

    result.iterations = it
    if store is not None:
        result.log.write(store.log_path)
    return result


def _iteration(cfg, g, d, robust, fe, weights, opt_g, opt_d, lr_t, hr_t, lr):
    g_params, d_params = g.parameters(), d.parameters()
    opt_g.zero_grad()
    opt_d.zero_grad()
    with _term('generator'):
        sr = g(lr_t)

    # discriminator step on detached generator output
    with _term('d_loss'):
        d_loss = L.adversarial_d_loss(d(hr_t), d(sr.detach()))
        T.backward(d_loss)
    if cfg.paranoid:
        _assert_zero_grads(g_params, 'generator')
        snap = _snapshot(g_params)
    with _term('d_step'):
        opt_d.step(lr)
    if cfg.paranoid:
        _assert_unchanged(g_params, snap, 'generator')

    # generator step
    opt_d.zero_grad()
    parts = {}
    with _term('adv'):
        parts['adv'] = L.adversarial_g_loss(d(sr))
    with _term('content'):
        if robust is not None:
            parts['content'] = L.robust_loss(T.sub(sr, hr_t), robust)
        else:
            parts['content'] = L.mse_loss(sr, hr_t)
    with _term('perceptual'):
        parts['perceptual'] = L.perceptual_loss(sr, hr_t, fe)
    with _term('tv'):
        parts['tv'] = L.tv_loss(sr)
    total = L.total_generator_loss(parts, weights)
    with _term('g_loss'):
        T.backward(total.total)
    if cfg.paranoid:
        snap = _snapshot(d_params)
    with _term('g_step'):
        opt_g.step(lr)
    if cfg.paranoid:
        _assert_unchanged(d_params, snap, 'discriminator')
    opt_d.zero_grad()

    alpha, c = robust.values() if robust is not None else (0.0, 0.0)
    row = dict(total.parts, d_loss=d_loss.item(), g_loss=total.total.item(), alpha=alpha, c=c)
    for k, v in row.items():
        if not math.isfinite(v):
            raise TrainingDivergence(k)
    return row


# ---- evaluation helpers ----

def held_out_psnr(g, pairs):
    return float(np.mean([psnr(super_resolve(g, lr), hr) for lr, hr in pairs]))


def evaluate_generator(g, pairs, method, scale, dataset='', threads=1):
    srs = [(k, super_resolve(g, lr), hr) for k, lr, hr in pairs]
    return evaluate_images(srs, EvalConfig(scale=scale, method=method, dataset=dataset, threads=threads))


@dataclass
class AblationReport:
    scale: int
    datasets: list
    arms: dict

    def table(self):
        return {label: {ds: (r.mean_psnr, r.mean_ssim) for ds, r in reports.items()}
                for label, reports in self.arms.items()}

    def to_text(self):
        return format_ablation(self.table(), self.datasets, self.scale)


def ablation_run(cfg, corpus, eval_sets, cfg_b=None, store_factory=None):
    """
    Train a robust-content arm and an MSE-content arm from identical seeds
    and data order, and evaluate both on every set of ``eval_sets``
    ({dataset: [(id, lr Image, hr Image)]}).
    """
    if cfg_b is None:
        cfg_b = replace(cfg, content_loss='mse' if cfg.content_loss == 'robust' else 'robust')
    a, b = cfg.as_dict(), cfg_b.as_dict()
    a.pop('content_loss')
    b.pop('content_loss')
    if a != b:
        diff = sorted(k for k in a if a[k] != b[k])
        raise ConfigError(f"ablation arms differ beyond content_loss: {', '.join(diff)}")

    label_a, label_b = LOSS_LABELS[cfg.content_loss], LOSS_LABELS[cfg_b.content_loss]
    if label_a == label_b:
        label_b += ' (control)'
    arms = {}
    for label, c in ((label_a, cfg), (label_b, cfg_b)):
        logger.info(f'ablation arm {label!r}')
        store = store_factory(label) if store_factory else None
        res = train(c, corpus, store)
        arms[label] = {ds: evaluate_generator(res.generator, pairs, label, c.scale, ds, c.threads)
                       for ds, pairs in eval_sets.items()}
    return AblationReport(cfg.scale, list(eval_sets), arms)
