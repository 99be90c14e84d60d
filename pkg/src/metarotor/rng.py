"""Splittable, counter-based random keys.

Every source of randomness flows from a single 64-bit seed through explicit
key splitting (`SeedSequence.spawn`), with Philox as the counter-based bit
generator.  A saved key therefore reproduces every downstream sample exactly,
regardless of evaluation order elsewhere in the program.
"""

import numpy as np
from scipy import stats


def root_key(seed):
    """Root key for a run."""
    return np.random.SeedSequence(int(seed))


def split(key, n):
    """Split a key into n independent child keys."""
    return key.spawn(n)


def generator(key):
    """Counter-based generator for a key."""
    return np.random.Generator(np.random.Philox(key))


def uniform(key, low, high, size=None):
    gen = generator(key)
    return gen.uniform(low, high, size=size)


def beta_scaled(key, lower, upper, alpha, beta, size=None):
    """Scaled beta samples via inverse-CDF on the key's uniform stream."""
    u = generator(key).random(size=size)
    return lower + (upper - lower) * stats.beta.ppf(u, alpha, beta)
