import numpy as np

from . import diff as d

LOG_2PI = float(np.log(2.0 * np.pi))


def std_normal_logpdf(z):
    """Log density of N(0, I) over the last axis (generic over Vars)."""
    dim = np.shape(d.value(z))[-1]
    return -0.5 * d.sum_(d.square(z), axis=-1) - 0.5 * dim * LOG_2PI


def as_2d(x):
    """Return ``(array of shape (n, d), was_1d)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def spawn_generators(seed_sequence, n):
    return [np.random.default_rng(s) for s in seed_sequence.spawn(n)]
