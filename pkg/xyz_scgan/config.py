import os, re

LOG_LEVEL = os.getenv('SCGAN_LOG_LEVEL', 'INFO').upper()
THREADS = max(1, int(os.getenv('SCGAN_THREADS', '1')))
DTYPE = os.getenv('SCGAN_DTYPE', 'float32')
if DTYPE not in ('float32', 'float64'):
    DTYPE = 'float32'
FEATURE_SEED = int(os.getenv('SCGAN_FEATURE_SEED', '20201'))

TRUE_VALUES = ('1', 'true', 'yes', 'on')
FALSE_VALUES = ('0', 'false', 'no', 'off')
COMMENT = re.compile(r'(^|\s)#.*$')


class ConfigError(ValueError):
    pass


def to_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in TRUE_VALUES:
        return True
    if s in FALSE_VALUES:
        return False
    raise ConfigError(f'not a boolean: {v!r}')


def to_int_tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(a) for a in v)
    return tuple(int(a) for a in str(v).replace(' ', '').split(',') if a)


def parse_config_text(text, source='<string>'):
    """
    Parse flat ``key = value`` lines into a dict of raw strings.

    ``#`` starts a comment at the start of a line or after whitespace, so
    ``out = runs/a#1`` keeps its value. Blank lines are skipped, a key may
    appear once.
    """
    data = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = COMMENT.sub('', line).strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'{source}:{lineno}: expected "key = value", got {line!r}')
        key, value = line.split('=', 1)
        key = key.strip()
        if not key:
            raise ConfigError(f'{source}:{lineno}: empty key')
        if key in data:
            raise ConfigError(f'{source}:{lineno}: duplicate key {key!r}')
        data[key] = value.strip()
    return data


def load_config_file(path):
    with open(path, encoding='utf-8') as f:
        return parse_config_text(f.read(), source=str(path))


def build_options(data=None, field_types=None, fields=None):
    """
    Convert flat key/value pairs into typed options.

    :param data: dict, e.g. {'batch_size': '8', 'lr_initial': '5e-4'}
    :param field_types: dict, field name -> converter, e.g. {'batch_size': int}
    :param fields: allowed field names; anything else is a ConfigError
    :return: dict of converted values
    """
    if not data:
        return {}
    field_types = field_types or {}
    fields = set(fields) if fields is not None else set(field_types)

    unknown = sorted(k for k in data if k not in fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    rs = {}
    for key, value in data.items():
        converter = field_types.get(key)
        if converter is None or value is None:
            rs[key] = value
            continue
        try:
            rs[key] = converter(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f'bad value for {key!r}: {value!r} ({e})') from None
    return rs


def dump_config(options):
    """Render options back into the flat file format, sorted by key."""
    lines = []
    for k in sorted(options):
        v = options[k]
        if isinstance(v, (list, tuple)):
            v = ','.join(str(a) for a in v)
        lines.append(f'{k} = {v}')
    return '\n'.join(lines) + '\n'
