"""
Generator and discriminator objectives.

    loss_G = w_adv * adv + w_robust * content + w_perceptual * perceptual + w_tv * tv

``content`` is the adaptive robust loss of the SR-HR residual, or plain
MSE when training the ablation arm.
"""
import logging, math
from dataclasses import dataclass

import numpy as np

from . import config
from . import tensor as T
from .tensor import Conv, DimensionError, Parameter, Tensor

logger = logging.getLogger(__name__)

BRANCH_EPS = 1e-4
C_FLOOR = 1e-5
SCORE_EPS = 1e-7
FEATURE_CHANNELS = (16, 32, 64, 64)
FEATURE_TAP = 3
TERMS = ('adv', 'content', 'perceptual', 'tv')


class LossError(ValueError):
    pass


class TrainingDivergence(ArithmeticError):

    def __init__(self, term, message=None):
        self.term = term
        super().__init__(message or f'non-finite {term} loss')


@dataclass
class LossWeights:
    w_adv: float = 1e-3
    w_robust: float = 1.0
    w_perceptual: float = 6e-3
    w_tv: float = 2e-8

    def __post_init__(self):
        for k in ('w_adv', 'w_robust', 'w_perceptual', 'w_tv'):
            v = float(getattr(self, k))
            if not math.isfinite(v) or v < 0:
                raise LossError(f'{k} must be finite and >= 0, got {v}')
            setattr(self, k, v)

    def for_term(self, term):
        return {'adv': self.w_adv, 'content': self.w_robust,
                'perceptual': self.w_perceptual, 'tv': self.w_tv}[term]


# ---- adaptive robust loss ----

class RobustLossParams:
    """
    Learnable shape and scale:
        alpha = alpha_lo + (alpha_hi - alpha_lo) * sigmoid(theta_alpha)
        c = softplus(theta_c) + 1e-5
    """

    def __init__(self, alpha_init=1.0, c_init=0.1, alpha_lo=0.001, alpha_hi=2.0,
                 learnable=True, dtype=np.float64):
        if not alpha_lo < alpha_init < alpha_hi:
            raise LossError(f'alpha_init {alpha_init} outside ({alpha_lo}, {alpha_hi})')
        if c_init <= C_FLOOR:
            raise LossError(f'c_init must exceed {C_FLOOR}, got {c_init}')
        self.alpha_lo = float(alpha_lo)
        self.alpha_hi = float(alpha_hi)
        u = (alpha_init - alpha_lo) / (alpha_hi - alpha_lo)
        self.theta_alpha = Parameter([math.log(u / (1 - u))], name='theta_alpha', learnable=learnable, dtype=dtype)
        self.theta_c = Parameter([math.log(math.expm1(c_init - C_FLOOR))], name='theta_c',
                                 learnable=learnable, dtype=dtype)

    def alpha(self):
        return T.add_scalar(T.scale(T.sigmoid(self.theta_alpha), self.alpha_hi - self.alpha_lo), self.alpha_lo)

    def c(self):
        return T.add_scalar(T.softplus(self.theta_c), C_FLOOR)

    def values(self):
        with T.no_grad():
            return self.alpha().item(), self.c().item()

    def named_parameters(self):
        return [('theta_alpha', self.theta_alpha), ('theta_c', self.theta_c)]

    def parameters(self):
        return [self.theta_alpha, self.theta_c]


def _scalar_tensor(v, dtype):
    if isinstance(v, Tensor):
        if v.data.size != 1:
            raise DimensionError(f'expected a single value, got shape {v.shape}')
        return v
    return Tensor([float(v)], dtype=dtype)


def _alpha_grad(z, a):
    # d f / d alpha of the general form, a away from 0 and 2
    s = 1.0 if a > 2 else -1.0
    b = abs(a - 2)
    lu = np.log1p(z / b)
    p = np.expm1(0.5 * a * lu)
    return (s * a - b) / (a * a) * p + (b / a) * (p + 1) * (0.5 * lu - 0.5 * a * z * s / (b * b * (z / b + 1)))


def robust_rho(x, alpha, c):
    """
    Elementwise f(x, alpha, c) = |a-2|/a * (((x/c)^2 / |a-2| + 1)^(a/2) - 1)
    with the log limit near a = 0 and the L2 limit near a = 2.
    """
    alpha = _scalar_tensor(alpha, x.dtype)
    c = _scalar_tensor(c, x.dtype)
    a = float(alpha.data.reshape(-1)[0])
    cc = float(c.data.reshape(-1)[0])
    if not cc > 0:
        raise LossError(f'robust loss scale c must be positive, got {cc}')
    xd = x.data
    z = (xd / cc) ** 2

    if abs(a) < BRANCH_EPS:
        f = np.log1p(0.5 * z)
        dfdz = 0.5 / (1 + 0.5 * z)
        dfda = _alpha_grad(z, BRANCH_EPS if a >= 0 else -BRANCH_EPS)
    elif abs(a - 2) < BRANCH_EPS:
        f = 0.5 * z
        dfdz = np.full_like(z, 0.5)
        dfda = _alpha_grad(z, 2 - BRANCH_EPS if a <= 2 else 2 + BRANCH_EPS)
    else:
        b = abs(a - 2)
        lu = np.log1p(z / b)
        f = (b / a) * np.expm1(0.5 * a * lu)
        dfdz = 0.5 * np.exp((0.5 * a - 1) * lu)
        dfda = _alpha_grad(z, a)

    def rule(g):
        gx = g * dfdz * 2 * xd / (cc * cc)
        ga = np.asarray(np.sum(g * dfda)).reshape(alpha.shape)
        gc = np.asarray(np.sum(g * dfdz * (-2 * z / cc))).reshape(c.shape)
        return gx, ga, gc

    return T._result(f.astype(x.dtype, copy=False), (x, alpha, c), rule, 'robust_rho')


def robust_loss(x, p):
    return T.mean(robust_rho(x, p.alpha(), p.c()))


def mse_loss(sr, hr):
    return T.mean(T.square(T.sub(sr, hr)))


# ---- adversarial ----

def adversarial_g_loss(d_scores):
    """mean log(1 - D(G(lr))), minimized by the generator."""
    d = T.clamp(d_scores, SCORE_EPS, 1 - SCORE_EPS)
    return T.mean(T.log(1 - d))


def adversarial_d_loss(d_real, d_fake):
    real = T.clamp(d_real, SCORE_EPS, 1 - SCORE_EPS)
    fake = T.clamp(d_fake, SCORE_EPS, 1 - SCORE_EPS)
    return T.scale(T.add(T.mean(T.log(real)), T.mean(T.log(1 - fake))), -1.0)


# ---- perceptual ----

class FeatureExtractor:
    """
    Frozen conv3x3 + ReLU + 2x avg-pool stack drawn from a fixed seed.
    Features are read after the ReLU of conv ``tap``.
    """

    def __init__(self, seed=None, channels=FEATURE_CHANNELS, tap=FEATURE_TAP, weights=None, dtype=np.float64):
        if not 1 <= tap <= len(channels):
            raise LossError(f'tap layer {tap} outside 1..{len(channels)}')
        self.seed = config.FEATURE_SEED if seed is None else seed
        self.channels = tuple(channels)
        self.tap = tap
        if weights is None:
            weights = self._draw(self.seed, self.channels)
        self.convs = []
        cin = 3
        for i, c in enumerate(self.channels):
            w, b = weights[f'conv.{i}.weight'], weights[f'conv.{i}.bias']
            if w.shape != (c, cin, 3, 3) or b.shape != (c,):
                raise LossError(f'feature weights conv.{i} have shape {w.shape}, expected {(c, cin, 3, 3)}')
            wp = Parameter(w, name=f'fe.conv.{i}.weight', learnable=False, dtype=dtype)
            bp = Parameter(b, name=f'fe.conv.{i}.bias', learnable=False, dtype=dtype)
            wp.data.setflags(write=False)
            bp.data.setflags(write=False)
            self.convs.append(Conv(wp, bp, 1, 1))
            cin = c

    @staticmethod
    def _draw(seed, channels):
        rng = np.random.default_rng(seed)
        rs = {}
        cin = 3
        for i, c in enumerate(channels):
            rs[f'conv.{i}.weight'] = rng.standard_normal((c, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))
            rs[f'conv.{i}.bias'] = np.zeros(c)
            cin = c
        return rs

    @classmethod
    def from_file(cls, path, tap=FEATURE_TAP, dtype=np.float64):
        """Externally supplied weights: an .npz with conv.{i}.weight / conv.{i}.bias arrays."""
        with np.load(path) as f:
            weights = {k: f[k] for k in f.files}
        n = len([k for k in weights if k.endswith('.weight')])
        channels = tuple(weights[f'conv.{i}.weight'].shape[0] for i in range(n))
        return cls(channels=channels, tap=tap, weights=weights, dtype=dtype)

    def features(self, x):
        for i, conv in enumerate(self.convs[:self.tap]):
            x = T.relu(conv(x))
            if i < self.tap - 1:
                x = T.avg_pool2d(x, 2)
        return x


def perceptual_loss(sr, hr, fe):
    if sr.shape != hr.shape:
        raise DimensionError(f'perceptual_loss: shape mismatch {sr.shape} vs {hr.shape}')
    with T.no_grad():
        target = fe.features(hr)
    return T.mean(T.square(T.sub(fe.features(sr), target)))


# ---- total variation ----

def tv_loss(x):
    """
    Mean squared horizontal difference plus mean squared vertical difference,
    each averaged over its own valid positions; a direction of length 1 adds 0.
    """
    T._check4(x, 'tv_loss')
    h, w = x.shape[2], x.shape[3]
    if h < 2 and w < 2:
        raise LossError(f'tv_loss: degenerate {w}x{h} input')
    total = None
    for axis, n in ((3, w), (2, h)):
        if n < 2:
            continue
        d = T.sub(T.narrow(x, axis, 1, n - 1), T.narrow(x, axis, 0, n - 1))
        term = T.mean(T.square(d))
        total = term if total is None else T.add(total, term)
    return total


# ---- total ----

@dataclass
class GeneratorLoss:
    total: Tensor
    parts: dict

    def breakdown(self):
        return dict(self.parts, total=self.total.item())


def total_generator_loss(parts, w):
    total = None
    values = {}
    for term in TERMS:
        part = parts[term]
        v = float(np.sum(part.data))
        if not math.isfinite(v):
            raise TrainingDivergence(term)
        values[term] = v
        weighted = T.scale(part, w.for_term(term))
        total = weighted if total is None else T.add(total, weighted)
    return GeneratorLoss(total=total, parts=values)
