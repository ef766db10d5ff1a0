import os, re, json, logging
from .networks import load_checkpoint, save_checkpoint
from .utils import timestamp_ms

logger = logging.getLogger(__name__)


class RunStore:
    """
    One training / command run on disk::

        <root>/header.txt           resolved config and desk-scale overrides
        <root>/train_log.csv        TrainLog
        <root>/manifest.json        RunManifest
        <root>/checkpoints/epoch_0001.ckpt ...
    """
    checkpoint_dir = 'checkpoints'
    log_name = 'train_log.csv'
    manifest_name = 'manifest.json'
    header_name = 'header.txt'
    pattern = re.compile(r'^epoch_(\d+)\.ckpt$')

    def __init__(self, root):
        self.root = str(root)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def log_path(self):
        return self.path(self.log_name)

    @property
    def manifest_path(self):
        return self.path(self.manifest_name)

    def ensure(self):
        os.makedirs(self.path(self.checkpoint_dir), exist_ok=True)
        return self

    def exists(self):
        return os.path.isdir(self.path(self.checkpoint_dir))

    def checkpoint_path(self, epoch):
        return self.path(self.checkpoint_dir, f'epoch_{epoch:04d}.ckpt')

    def save_checkpoint(self, epoch, params, config, rng_state=None):
        self.ensure()
        path = save_checkpoint(params, self.checkpoint_path(epoch), config, rng_state)
        logger.info(f'checkpoint epoch {epoch} -> {path}')
        return path

    def all(self):
        d = self.path(self.checkpoint_dir)
        if not os.path.isdir(d):
            return []
        rs = []
        for fn in os.listdir(d):
            m = self.pattern.match(fn)
            if m:
                rs.append((int(m.group(1)), os.path.join(d, fn)))
        return sorted(rs)

    def latest(self):
        rs = self.all()
        return rs[-1] if rs else None

    def load(self, epoch=None, expected_config=None):
        if epoch is None:
            last = self.latest()
            if last is None:
                raise FileNotFoundError(f'no checkpoints under {self.path(self.checkpoint_dir)}')
            epoch = last[0]
        return load_checkpoint(self.checkpoint_path(epoch), expected_config)

    def write_header(self, text):
        os.makedirs(self.root, exist_ok=True)
        with open(self.path(self.header_name), 'w', encoding='utf-8') as f:
            f.write(text)
        return self.path(self.header_name)

    def write_manifest(self, d):
        os.makedirs(self.root, exist_ok=True)
        d = dict(d)
        d.setdefault('written_ms', timestamp_ms())
        tmp = f'{self.manifest_path}.tmp'
        with open(tmp, 'w', encoding='utf-8') as f:
            json.dump(d, f, indent=2, sort_keys=True, default=str)
            f.write('\n')
        os.replace(tmp, self.manifest_path)
        return self.manifest_path

    def read_manifest(self):
        with open(self.manifest_path, encoding='utf-8') as f:
            return json.load(f)
