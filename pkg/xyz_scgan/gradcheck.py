"""
Finite-difference and oracle verification suites, one per module.

Gradient checks compare reverse-mode gradients with central differences
(h = 1e-5, float64) over at most 48 sampled coordinates per leaf. The
pass criterion is ||analytic - numeric|| / ||numeric||; the largest
per-coordinate relative error is reported alongside it.
Oracle checks compare the vectorized ops with the loop references in
``oracles`` and report the largest absolute difference.
"""
import logging, math
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import oracles
from . import tensor as T
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .scconv import SCBlockParams, sc_block_forward
from .tensor import Conv, Parameter, Tensor

logger = logging.getLogger(__name__)

MODULES = ('tensor', 'scconv', 'losses', 'networks')
FD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-10
ADJOINT_TOLERANCE = 1e-8
CLOSED_FORM_TOLERANCE = 1e-6
NORM_FLOOR = 1e-6
MAX_COORDS = 48


@dataclass
class CheckResult:
    module: str
    name: str
    kind: str
    seed: int
    error: float
    tolerance: float
    max_rel: float = None

    @property
    def passed(self):
        return math.isfinite(self.error) and self.error <= self.tolerance


@dataclass
class SuiteReport:
    module: str
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def failures(self):
        return [r for r in self.results if not r.passed]

    def to_text(self):
        lines = [f'# grad error: norm-relative over <= {MAX_COORDS} sampled coordinates per leaf (asserted); '
                 f'max_rel: largest per-coordinate relative error (reported only)']
        for r in self.results:
            flag = 'ok  ' if r.passed else 'FAIL'
            extra = f' max_rel={r.max_rel:.3e}' if r.max_rel is not None else ''
            lines.append(f'{flag} {r.module}.{r.name} [{r.kind}] seed={r.seed} error={r.error:.3e} '
                         f'tol={r.tolerance:.0e}{extra}')
        lines.append(f'{self.module}: {len(self.results) - len(self.failures())}/{len(self.results)} passed')
        return '\n'.join(lines) + '\n'


# ---- gradient machinery ----

def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def away_from_zero(rng, shape, margin=0.1):
    """Random values with |v| >= margin, so kinks stay out of the difference stencil."""
    v = rng.standard_normal(shape)
    return np.sign(v) * (margin + np.abs(v))


def project(out, rng):
    if out.data.size == 1:
        return T.sum(out)
    return T.sum(T.mul(out, Tensor(rng.standard_normal(out.shape))))


def gradient_error(fn, leaves, rng, h=FD_STEP, max_coords=MAX_COORDS):
    for x in leaves:
        x.grad = np.zeros_like(x.data)
    T.backward(fn())
    analytic = [x.grad.copy() for x in leaves]

    diff_sq = num_sq = max_rel = 0.0
    for x, a in zip(leaves, analytic):
        flat = x.data.reshape(-1)
        a = a.reshape(-1)
        idx = range(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        for i in idx:
            old = flat[i]
            with T.no_grad():
                flat[i] = old + h
                fp = fn().item()
                flat[i] = old - h
                fm = fn().item()
            flat[i] = old
            n = (fp - fm) / (2 * h)
            diff_sq += (a[i] - n) ** 2
            num_sq += n * n
            max_rel = max(max_rel, abs(a[i] - n) / max(abs(a[i]), abs(n), NORM_FLOOR))
    return math.sqrt(diff_sq) / max(math.sqrt(num_sq), NORM_FLOOR), max_rel


def _grad_case(build):
    """build(rng) -> (forward producing a tensor, leaves)."""
    def run(rng):
        forward, leaves = build(rng)
        seed = int(rng.integers(2 ** 32))

        def fn():
            return project(forward(), np.random.default_rng(seed))
        return gradient_error(fn, leaves, rng)
    return run


def _param(rng, shape, s=0.5):
    return Parameter(rng.standard_normal(shape) * s, name='p', dtype=np.float64)


# ---- tensor ----

def _conv_case(xs, ws, stride, pad, transposed=False):
    def build(rng):
        x, w, b = leaf(rng.standard_normal(xs)), leaf(rng.standard_normal(ws)), leaf(rng.standard_normal(ws[1 if transposed else 0]))
        f = T.conv2d_transposed if transposed else T.conv2d
        return (lambda: f(x, w, b, stride, pad)), [x, w, b]
    return build


def _unary_case(op, shape, values='normal'):
    def build(rng):
        v = away_from_zero(rng, shape) if values == 'kinked' else rng.standard_normal(shape)
        if values == 'positive':
            v = 0.2 + rng.random(shape)
        x = leaf(v)
        return (lambda: op(x)), [x]
    return build


def _prelu_case(rng):
    x, a = leaf(away_from_zero(rng, (1, 2, 3, 3))), leaf([rng.uniform(0.05, 0.5)])
    return (lambda: T.prelu(x, a)), [x, a]


def _structural_case(rng):
    x, y = leaf(rng.standard_normal((1, 4, 3, 3))), leaf(rng.standard_normal((1, 2, 3, 3)))

    def forward():
        a, b = T.split_channels(x, 2)
        return T.concat_channels(T.mul(a, y), T.add(b, T.scale(y, 0.5)))
    return forward, [x, y]


def _reduction_case(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 2)))
    return (lambda: T.reshape(T.mean_spatial(T.narrow(x, 2, 1, 3)), (3, 2))), [x]


TENSOR_GRADS = {
    'conv2d': _conv_case((1, 2, 5, 5), (3, 2, 3, 3), 1, 1),
    'conv2d_stride2': _conv_case((1, 2, 6, 6), (2, 2, 3, 3), 2, 0),
    'conv2d_transposed': _conv_case((1, 2, 3, 3), (2, 3, 4, 4), 2, 1, transposed=True),
    'avg_pool2d': _unary_case(lambda x: T.avg_pool2d(x, 2), (1, 2, 4, 4)),
    'upsample_bilinear': _unary_case(lambda x: T.upsample_bilinear(x, 2), (1, 2, 3, 3)),
    'sigmoid': _unary_case(T.sigmoid, (1, 2, 3, 3)),
    'softplus': _unary_case(T.softplus, (1, 2, 3, 3)),
    'relu': _unary_case(T.relu, (1, 2, 3, 3), 'kinked'),
    'leaky_relu': _unary_case(lambda x: T.leaky_relu(x, 0.2), (1, 2, 3, 3), 'kinked'),
    'log': _unary_case(T.log, (1, 2, 3, 3), 'positive'),
    'prelu': _prelu_case,
    'split_mul_add_concat': _structural_case,
    'narrow_mean_reshape': _reduction_case,
}


def _conv_oracle(xs, ws, stride, pad):
    def run(rng):
        x, w, b = rng.standard_normal(xs), rng.standard_normal(ws), rng.standard_normal(ws[0])
        fast = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        return float(np.max(np.abs(fast - oracles.conv2d_loop(x, w, b, stride, pad))))
    return run


def _transposed_oracle(rng):
    x, w, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3)
    fast = T.conv2d_transposed(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
    return float(np.max(np.abs(fast - oracles.conv2d_transposed_zero_stuffing(x, w, b, 2, 1))))


def _pool_oracle(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    return float(np.max(np.abs(T.avg_pool2d(Tensor(x), 4).data - oracles.avg_pool_loop(x, 4))))


def _bilinear_oracle(rng):
    x = rng.standard_normal((1, 2, 3, 4))
    return float(np.max(np.abs(T.upsample_bilinear(Tensor(x), 3).data - oracles.upsample_bilinear_scalar(x, 3))))


def _adjoint(rng):
    """<conv(x), y> == <x, conv_transposed(y)> for the same weight."""
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 4, 4))
    y = rng.standard_normal((2, 4, 4, 4))
    lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data * y)
    rhs = np.sum(x * T.conv2d_transposed(Tensor(y), Tensor(w), None, 2, 1).data)
    return abs(lhs - rhs) / max(abs(lhs), 1.0)


TENSOR_ORACLES = {
    'conv2d_loop': (_conv_oracle((2, 3, 5, 5), (4, 3, 3, 3), 1, 1), ORACLE_TOLERANCE),
    'conv2d_loop_stride2': (_conv_oracle((1, 2, 7, 7), (3, 2, 3, 3), 2, 0), ORACLE_TOLERANCE),
    'conv2d_transposed_zero_stuffing': (_transposed_oracle, ORACLE_TOLERANCE),
    'avg_pool_loop': (_pool_oracle, ORACLE_TOLERANCE),
    'bilinear_scalar': (_bilinear_oracle, ORACLE_TOLERANCE),
    'conv_adjoint': (_adjoint, ADJOINT_TOLERANCE),
}


# ---- scconv ----

def random_block(rng, channels=4, pool_rate=2):
    h = channels // 2
    convs = [Conv(_param(rng, (h, h, 3, 3)), _param(rng, (h,), 0.1), 1, 1) for _ in range(4)]
    act = Parameter([rng.uniform(0.1, 0.4)], name='act', dtype=np.float64)
    return SCBlockParams(*convs, act=act, pool_rate=pool_rate)


def _block_grad(rng):
    p = random_block(rng)
    x = leaf(rng.standard_normal((1, 4, 8, 8)))
    return (lambda: sc_block_forward(x, p)), [x] + [q for _, q in p.named_parameters()]


def _block_oracle(rng):
    p = random_block(rng)
    x = rng.standard_normal((1, 4, 8, 8))
    arrays = {n: q.data for n, q in p.named_parameters()}
    with T.no_grad():
        fast = sc_block_forward(Tensor(x), p).data
    return float(np.max(np.abs(fast - oracles.sc_block_reference(x, arrays, p.pool_rate))))


SCCONV_GRADS = {'sc_block_forward': _block_grad}
SCCONV_ORACLES = {'sc_block_reference': (_block_oracle, ORACLE_TOLERANCE)}


# ---- losses ----

def _robust_rho_case(rng):
    x = leaf(rng.standard_normal((1, 1, 3, 4)))
    alpha = leaf([rng.uniform(0.1, 1.9)])
    c = leaf([rng.uniform(0.3, 2.0)])
    return (lambda: L.robust_rho(x, alpha, c)), [x, alpha, c]


def _robust_loss_case(rng):
    p = L.RobustLossParams(alpha_init=rng.uniform(0.2, 1.8), c_init=rng.uniform(0.2, 1.0))
    x = leaf(rng.standard_normal((1, 3, 4, 4)) * 0.5)
    return (lambda: L.robust_loss(x, p)), [x] + p.parameters()


def _adversarial_case(rng):
    real, fake = leaf(rng.uniform(0.1, 0.9, (4, 1))), leaf(rng.uniform(0.1, 0.9, (4, 1)))
    return (lambda: T.add(L.adversarial_d_loss(real, fake), L.adversarial_g_loss(fake))), [real, fake]


def _perceptual_case(rng):
    fe = L.FeatureExtractor(seed=int(rng.integers(2 ** 31)), channels=(4, 4), tap=2)
    sr, hr = leaf(rng.random((1, 3, 8, 8))), Tensor(rng.random((1, 3, 8, 8)))
    return (lambda: L.perceptual_loss(sr, hr, fe)), [sr]


def _tv_mse_case(rng):
    sr, hr = leaf(rng.random((1, 3, 5, 4))), Tensor(rng.random((1, 3, 5, 4)))
    return (lambda: T.add(L.tv_loss(sr), L.mse_loss(sr, hr))), [sr]


def _closed_forms(rng):
    """Largest deviation from the closed forms at a random scale c."""
    c = rng.uniform(0.2, 2.0)
    x = Tensor(rng.standard_normal(8))
    z = (x.data / c) ** 2
    at = lambda a, v=x: L.robust_rho(v, a, c).data
    errs = [
        np.max(np.abs(L.robust_rho(Tensor([0.0]), 1.3, c).data)),
        np.max(np.abs(at(2.0) - 0.5 * z)),
        np.max(np.abs(L.robust_rho(Tensor([c]), 1.0, c).data - (math.sqrt(2) - 1))),
        np.max(np.abs(at(0.0) - np.log1p(0.5 * z))),
        np.max(np.abs(at(1e-5) - at(-1e-5))),
        np.max(np.abs(at(2 - 1e-5) - at(2 + 1e-5))),
    ]
    return float(max(errs))


LOSSES_GRADS = {
    'robust_rho': _robust_rho_case,
    'robust_loss_reparameterized': _robust_loss_case,
    'adversarial': _adversarial_case,
    'perceptual': _perceptual_case,
    'tv_and_mse': _tv_mse_case,
}
LOSSES_ORACLES = {'robust_closed_forms': (_closed_forms, CLOSED_FORM_TOLERANCE)}


# ---- networks ----

TINY_GENERATOR = dict(scale=2, n_sc_blocks=1, base_channels=4, pool_rate=2)
TINY_DISCRIMINATOR = dict(channels=(2, 3))
GRADCHECK_GENERATOR = dict(TINY_GENERATOR, base_channels=8)
GRADCHECK_INPUT = (1, 3, 8, 8)


def _generator_case(rng):
    g = Generator(GeneratorConfig(**GRADCHECK_GENERATOR), seed=int(rng.integers(2 ** 31)))
    x = leaf(rng.random(GRADCHECK_INPUT))
    return (lambda: g(x)), [x] + g.parameters()


def _discriminator_case(rng):
    d = Discriminator(DiscriminatorConfig(**TINY_DISCRIMINATOR), seed=int(rng.integers(2 ** 31)))
    x = leaf(rng.random((2, 3, 13, 13)))
    return (lambda: d(x)), [x] + d.parameters()


NETWORKS_GRADS = {'generator': _generator_case, 'discriminator': _discriminator_case}
NETWORKS_ORACLES = {}

SUITES = {
    'tensor': (TENSOR_GRADS, TENSOR_ORACLES),
    'scconv': (SCCONV_GRADS, SCCONV_ORACLES),
    'losses': (LOSSES_GRADS, LOSSES_ORACLES),
    'networks': (NETWORKS_GRADS, NETWORKS_ORACLES),
}


def run_suite(module, cases=10, seed=0, only=None):
    if module not in SUITES:
        raise ValueError(f'unknown gradcheck module {module!r}, choose from {MODULES}')
    grads, checks = SUITES[module]
    report = SuiteReport(module)
    for name, build in grads.items():
        if only and name not in only:
            continue
        for k in range(cases):
            rng = np.random.default_rng([seed, k])
            err, max_rel = _grad_case(build)(rng)
            report.results.append(CheckResult(module, name, 'grad', k, err, GRAD_TOLERANCE, max_rel))
    for name, (run, tol) in checks.items():
        if only and name not in only:
            continue
        for k in range(cases):
            rng = np.random.default_rng([seed, k])
            report.results.append(CheckResult(module, name, 'oracle', k, run(rng), tol))
    failed = report.failures()
    level = logging.WARNING if failed else logging.INFO
    logger.log(level, f'gradcheck {module}: {len(report.results) - len(failed)}/{len(report.results)} passed')
    return report
