import math, time
import numpy as np


def timestamp_ms():
    return math.floor(time.time() * 1000)


def format_number(v):
    """CSV rendering: repr-exact floats, 'inf' for the infinite sentinel."""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return 'inf' if v > 0 else '-inf'
        return repr(v)
    return str(v)


def seed_streams(seed, n):
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


def is_power_of_two(n):
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0
