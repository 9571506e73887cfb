"""Counter-based random streams.

Each chain pair owns exactly one stream, derived from the master seed and
the pair's coordinates without any coordination between workers.  Philox
is counter-based, so distinct derivation keys give non-overlapping
streams.  The order of draws is part of the reproducibility contract:
identical seed and identical call sequence give identical outputs.
"""

from __future__ import annotations

import numpy as np


class RandomStream:
    """A seeded Philox generator addressed by (master_seed, *key)."""

    __slots__ = ("key", "g")

    def __init__(self, master_seed: int, *key: int):
        self.key = (int(master_seed),) + tuple(int(k) for k in key)
        ss = np.random.SeedSequence(list(self.key))
        self.g = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *subkey: int) -> "RandomStream":
        return RandomStream(*(self.key + tuple(subkey)))

    # thin delegation: draw order through these calls is the contract
    def uniform(self, low=0.0, high=1.0):
        return float(self.g.uniform(low, high))

    def exponential(self, scale=1.0):
        return float(self.g.exponential(scale))

    def integers(self, low, high=None):
        return int(self.g.integers(low, high))

    def poisson(self, lam):
        return int(self.g.poisson(lam))

    def binomial(self, n, p):
        return int(self.g.binomial(n, p))

    def negative_binomial(self, n, p):
        return int(self.g.negative_binomial(n, p))

    def multinomial(self, n, pvals):
        return self.g.multinomial(n, pvals)

    def beta(self, a, b):
        return float(self.g.beta(a, b))

    def gamma(self, shape, scale=1.0):
        return float(self.g.gamma(shape, scale))

    def choice(self, a, size=None, replace=True, p=None):
        return self.g.choice(a, size=size, replace=replace, p=p)

    def __repr__(self):
        return f"RandomStream{self.key}"
