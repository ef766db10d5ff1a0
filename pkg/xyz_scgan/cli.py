"""
Command line entry point::

    xyz-scgan synth     --out DIR [--count 32 --size 256]
    xyz-scgan degrade   --in DIR --out DIR --scale 4 --crop 128
    xyz-scgan train     --data DIR --scale 2 --epochs 1 [--config FILE] --out DIR
    xyz-scgan sr        --model CKPT --in DIR --out DIR
    xyz-scgan eval      --sr DIR --hr DIR [--channel rgb|luma] [--border-crop 0|scale] --out DIR
    xyz-scgan compare   --methods bicubic,model:CKPT --datasets DIR[,DIR] --out DIR
    xyz-scgan ablation  --data DIR --datasets DIR[,DIR] --scale 2 [--config FILE] --out DIR
    xyz-scgan gradcheck --module tensor|scconv|losses|networks

Exit codes: 0 ok, 1 domain failure, 2 usage error. Every command leaves a
``manifest.json`` in its output directory, also when it fails.
"""
import argparse, logging, math, os, re, sys, time
from concurrent.futures import ThreadPoolExecutor

from . import config as settings
from .config import ConfigError
from .gradcheck import MODULES, run_suite
from .imaging import (CropError, ImageFormatError, PairSpec, bicubic_resize, degrade, image_id,
                      list_images, load_image, make_pair, modcrop, save_image, write_synthetic_corpus)
from .metrics import EvalConfig, MetricReport, evaluate_corpus, evaluate_images, format_comparison
from .networks import load_generator, super_resolve
from .store import RunStore
from .training import TrainConfig, ablation_run, train
from .utils import seed_streams, timestamp_ms

logger = logging.getLogger(__name__)

TOOL_VERSION = '0.1.0'
SCALES = (2, 4, 8)


class PngChunkFilter(logging.Filter):
    """Pillow logs every PNG chunk at DEBUG; keep those out of -v output."""

    def filter(self, record):
        return not record.name.startswith('PIL.PngImagePlugin')


def setup_logging(verbose=False):
    level = logging.DEBUG if verbose else getattr(logging, settings.LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    for h in logging.getLogger().handlers:
        h.addFilter(PngChunkFilter())


class CommandFailed(Exception):
    def __init__(self, failures):
        self.failures = failures
        super().__init__(f'{len(failures)} file(s) failed')


def _output_dir(args):
    return getattr(args, 'out', None) or '.'


def _map(threads, fn, items):
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        return list(ex.map(fn, items))


def _collect(results):
    failures = [(k, err) for k, err in results if err]
    for k, err in failures:
        logger.error(f'{k}: {err}')
    if failures:
        raise CommandFailed(failures)


# ---- commands ----

def cmd_synth(args, manifest):
    paths = write_synthetic_corpus(args.out, args.count, args.size, args.seed)
    manifest['outputs'] = paths
    logger.info(f'wrote {len(paths)} synthetic images to {args.out}')


def cmd_degrade(args, manifest):
    paths = list_images(args.input)
    seeds = seed_streams(args.seed, len(paths)) if paths else []
    hr_dir, lr_dir = os.path.join(args.out, 'hr'), os.path.join(args.out, 'lr')
    os.makedirs(hr_dir, exist_ok=True)
    os.makedirs(lr_dir, exist_ok=True)

    def run(item):
        path, seed = item
        k = image_id(path)
        try:
            img = load_image(path)
            if args.crop:
                lr, hr = make_pair(img, PairSpec(args.scale, args.crop, seed))
            else:
                lr, hr = degrade(img, args.scale)
            save_image(hr, os.path.join(hr_dir, k + '.png'))
            save_image(lr, os.path.join(lr_dir, k + '.png'))
            return k, None
        except (CropError, ImageFormatError, OSError, ValueError) as e:
            return k, str(e)

    results = _map(args.threads, run, list(zip(paths, seeds)))
    manifest['inputs'] = paths
    manifest['counts'] = {'ok': sum(1 for _, e in results if not e), 'failed': sum(1 for _, e in results if e)}
    logger.info(f"degraded {manifest['counts']['ok']} of {len(paths)} images into {args.out}")
    _collect(results)


def _train_config(args):
    overrides = dict(scale=args.scale, epochs=args.epochs, seed=args.seed, threads=args.threads,
                     max_iterations=args.max_iterations)
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig.from_options({}, **overrides)


def _load_corpus(data, manifest):
    paths = list_images(data)
    manifest['inputs'] = paths
    return [(image_id(p), load_image(p)) for p in paths]


def cmd_train(args, manifest):
    cfg = _train_config(args)
    manifest['config'] = cfg.as_dict()
    corpus = _load_corpus(args.data, manifest)
    store = RunStore(args.out)
    result = train(cfg, corpus, store)
    manifest['outputs'] = result.checkpoints + [store.log_path]
    manifest['iterations'] = result.iterations


def cmd_sr(args, manifest):
    g = load_generator(args.model)
    manifest['config'] = {'generator': g.config.as_dict()}
    paths = list_images(args.input)
    os.makedirs(args.out, exist_ok=True)

    def run(path):
        k = image_id(path)
        try:
            save_image(super_resolve(g, load_image(path)), os.path.join(args.out, k + '.png'))
            return k, None
        except (ImageFormatError, OSError, ValueError) as e:
            return k, str(e)

    results = _map(args.threads, run, paths)
    manifest['inputs'] = paths
    logger.info(f'super-resolved {sum(1 for _, e in results if not e)} of {len(paths)} images')
    _collect(results)


def _border(args):
    return args.scale if args.border_crop == 'scale' else int(args.border_crop)


def cmd_eval(args, manifest):
    cfg = EvalConfig(scale=args.scale, channel=args.channel, border_crop=_border(args),
                     method=args.method, dataset=args.dataset or os.path.basename(os.path.normpath(args.hr)),
                     global_window=args.global_window, threads=args.threads)
    manifest['config'] = vars(cfg)
    report = evaluate_corpus(args.sr, args.hr, cfg)
    os.makedirs(args.out, exist_ok=True)
    csv_path = report.to_csv(os.path.join(args.out, 'metrics.csv'))
    txt_path = os.path.join(args.out, 'metrics.txt')
    with open(txt_path, 'w', encoding='utf-8') as f:
        f.write(report.to_text())
    sys.stdout.write(report.to_text())
    manifest['outputs'] = [csv_path, txt_path]


def parse_methods(spec):
    """'bicubic,model:run/ckpt' -> [('bicubic', None), ('model', 'run/ckpt')]"""
    rs = []
    for part in spec.split(','):
        part = part.strip()
        if not part:
            continue
        name, _, path = part.partition(':')
        if name == 'bicubic' and not path:
            rs.append(('bicubic', None))
        elif path:
            rs.append((name, path))
        else:
            raise ConfigError(f'method {part!r} needs a checkpoint, e.g. model:path/to.ckpt')
    if not rs:
        raise ConfigError('no methods given')
    return rs


def cmd_compare(args, manifest):
    methods = parse_methods(args.methods)
    models = {name: load_generator(path, scale=args.scale) for name, path in methods if path}
    multiple = args.scale
    for g in models.values():
        multiple = math.lcm(multiple, args.scale * g.config.pool_rate)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for ds_dir in [d for d in args.datasets.split(',') if d]:
        dataset = os.path.basename(os.path.normpath(ds_dir))
        cfg = EvalConfig(scale=args.scale, channel=args.channel, border_crop=_border(args),
                         dataset=dataset, threads=args.threads)
        report = MetricReport(dataset, cfg.channel, cfg.border_crop)
        hrs = [(image_id(p), modcrop(load_image(p), multiple)) for p in list_images(ds_dir)]
        lrs = [(k, bicubic_resize(hr, hr.width // args.scale, hr.height // args.scale), hr) for k, hr in hrs]
        for name, _ in methods:
            if name == 'bicubic':
                srs = [(k, bicubic_resize(lr, hr.width, hr.height), hr) for k, lr, hr in lrs]
            else:
                srs = [(k, super_resolve(models[name], lr), hr) for k, lr, hr in lrs]
            sub = evaluate_images(srs, EvalConfig(**dict(vars(cfg), method='Bicubic' if name == 'bicubic' else name)))
            report.rows.extend(sub.rows)
        text = format_comparison(report, args.scale)
        sys.stdout.write(text)
        base = os.path.join(args.out, f'compare_{dataset}')
        report.to_csv(base + '.csv')
        with open(base + '.txt', 'w', encoding='utf-8') as f:
            f.write(text)
        outputs += [base + '.csv', base + '.txt']
    manifest['outputs'] = outputs


def _slug(label):
    return re.sub(r'[^a-z0-9]+', '_', label.lower()).strip('_')


def cmd_ablation(args, manifest):
    cfg = _train_config(args)
    manifest['config'] = cfg.as_dict()
    corpus = _load_corpus(args.data, manifest)
    multiple = cfg.scale * cfg.pool_rate
    eval_sets = {}
    for ds_dir in [d for d in args.datasets.split(',') if d]:
        hrs = [(image_id(p), modcrop(load_image(p), multiple)) for p in list_images(ds_dir)]
        eval_sets[os.path.basename(os.path.normpath(ds_dir))] = [
            (k, bicubic_resize(hr, hr.width // cfg.scale, hr.height // cfg.scale), hr) for k, hr in hrs]
    if not eval_sets:
        raise ConfigError('no evaluation datasets given')

    stores = {}

    def store_for(label):
        stores[label] = RunStore(os.path.join(args.out, _slug(label)))
        return stores[label]

    report = ablation_run(cfg, corpus, eval_sets, store_factory=store_for)
    text = report.to_text()
    sys.stdout.write(text)
    os.makedirs(args.out, exist_ok=True)
    txt_path = os.path.join(args.out, 'ablation.txt')
    with open(txt_path, 'w', encoding='utf-8') as f:
        f.write(text)
    outputs = [txt_path]
    for ds in report.datasets:
        rows = [row for reports in report.arms.values() for row in reports[ds].rows]
        outputs.append(MetricReport(ds, rows=rows).to_csv(os.path.join(args.out, f'ablation_{ds}.csv')))
    for store in stores.values():
        outputs += [path for _, path in store.all()]
    manifest['outputs'] = outputs
    manifest['arms'] = {label: store.root for label, store in stores.items()}
    manifest['table'] = report.table()


def cmd_gradcheck(args, manifest):
    modules = MODULES if args.module == 'all' else (args.module,)
    failed = []
    for m in modules:
        report = run_suite(m, cases=args.cases, seed=args.seed)
        sys.stdout.write(report.to_text())
        failed += [f'{r.module}.{r.name}[seed {r.seed}]' for r in report.failures()]
    manifest['counts'] = {'failed': len(failed)}
    if failed:
        raise CommandFailed([(k, 'gradient/oracle check failed') for k in failed])


COMMANDS = {
    'synth': cmd_synth,
    'degrade': cmd_degrade,
    'train': cmd_train,
    'sr': cmd_sr,
    'eval': cmd_eval,
    'compare': cmd_compare,
    'ablation': cmd_ablation,
    'gradcheck': cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(prog='xyz-scgan', description='Self-calibrated convolution GAN for super-resolution')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--threads', type=int, default=settings.THREADS, help='workers for per-image stages')
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('-v', '--verbose', action='store_true')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='write a synthetic corpus')
    p.add_argument('--out', required=True)
    p.add_argument('--count', type=int, default=32)
    p.add_argument('--size', type=int, default=256)

    p = sub.add_parser('degrade', parents=[common], help='write paired hr/ and lr/ trees')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--scale', type=int, choices=SCALES, default=4)
    p.add_argument('--crop', type=int, default=128, help='random crop size, 0 for whole images')

    p = sub.add_parser('train', parents=[common], help='train generator and discriminator')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--scale', type=int, choices=SCALES)
    p.add_argument('--epochs', type=int)
    p.add_argument('--max-iterations', type=int)
    p.add_argument('--config')

    p = sub.add_parser('sr', parents=[common], help='super-resolve a directory')
    p.add_argument('--model', required=True)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('eval', parents=[common], help='PSNR / SSIM of SR against HR')
    p.add_argument('--sr', required=True)
    p.add_argument('--hr', required=True)
    p.add_argument('--out', default='.')
    p.add_argument('--scale', type=int, choices=SCALES, default=4)
    p.add_argument('--channel', choices=('rgb', 'luma'), default='rgb')
    p.add_argument('--border-crop', choices=('0', 'scale'), default='0')
    p.add_argument('--method', default='model')
    p.add_argument('--dataset', default='')
    p.add_argument('--global-window', action='store_true')

    p = sub.add_parser('compare', parents=[common], help='methods x metrics table per dataset')
    p.add_argument('--methods', default='bicubic')
    p.add_argument('--datasets', required=True)
    p.add_argument('--out', default='.')
    p.add_argument('--scale', type=int, choices=SCALES, default=4)
    p.add_argument('--channel', choices=('rgb', 'luma'), default='rgb')
    p.add_argument('--border-crop', choices=('0', 'scale'), default='0')

    p = sub.add_parser('ablation', parents=[common], help='robust vs MSE content loss, trained and evaluated')
    p.add_argument('--data', required=True)
    p.add_argument('--datasets', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--scale', type=int, choices=SCALES)
    p.add_argument('--epochs', type=int)
    p.add_argument('--max-iterations', type=int)
    p.add_argument('--config')

    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference and oracle suites')
    p.add_argument('--module', choices=MODULES + ('all',), default='all')
    p.add_argument('--cases', type=int, default=10)
    p.add_argument('--out', default='.')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    manifest = {
        'command': args.command,
        'args': {k: v for k, v in vars(args).items() if k != 'command'},
        'seed': args.seed,
        'version': TOOL_VERSION,
        'started_ms': timestamp_ms(),
    }
    t0 = time.perf_counter()
    code = 1
    try:
        COMMANDS[args.command](args, manifest)
        code = 0
    except CommandFailed as e:
        manifest['failures'] = [{'item': k, 'error': err} for k, err in e.failures]
    except (ValueError, ArithmeticError, OSError) as e:
        logger.error(f'{args.command} failed: {e}')
        manifest['error'] = f'{type(e).__name__}: {e}'
    finally:
        manifest['exit_code'] = code
        manifest['wall_ms'] = round((time.perf_counter() - t0) * 1000)
        try:
            RunStore(_output_dir(args)).write_manifest(manifest)
        except OSError as e:
            logger.error(f'could not write manifest: {e}')
    return code
