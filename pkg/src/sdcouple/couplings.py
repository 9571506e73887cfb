"""Maximal-coupling and common-random-number sampling primitives.

Every coupler draws from one ordered random stream and returns a
CoupledDraw whose marginals are exactly the two requested distributions;
`matched` is True only when both components are bitwise equal.  Residuals
are independent, so unmatched components never collide.

Closed-form direct sampling is used for the Bernoulli, interval-uniform
and truncated-exponential cases; everything discrete or irregular goes
through the generic rejection sampler with exact (log) densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy.special import gammaln, xlog1py, xlogy

REJECTION_CAP = 1_000_000


@dataclass(frozen=True)
class CoupledDraw:
    x: Any
    y: Any
    matched: bool

    def __post_init__(self):
        if self.matched and self.x != self.y:
            raise ValueError("matched draw with unequal components")


def shared_uniform(rng) -> float:
    """One Uniform(0,1) variate delivered to both chains."""
    return rng.uniform()


def shared_scale(rng) -> float:
    """One common rescaling factor on (1/2, 2)."""
    return rng.uniform(0.5, 2.0)


def couple_bernoulli(p: float, q: float, rng) -> CoupledDraw:
    """Maximal coupling of two Bernoullis via one shared uniform."""
    if not (0.0 <= p <= 1.0 and 0.0 <= q <= 1.0):
        raise ValueError("Bernoulli parameters must lie in [0, 1]")
    u = rng.uniform()
    x, y = u <= p, u <= q
    return CoupledDraw(x, y, x == y)


def couple_generic(sample_p, logpdf_p, sample_q, logpdf_q, rng, cap: int = REJECTION_CAP) -> CoupledDraw:
    """Maximal coupling with independent residuals by rejection.

    Requires evaluable log densities wherever the samplers put mass.  The
    residual loop is capped only to turn density bugs into loud failures.
    """
    x = sample_p(rng)
    lp = logpdf_p(x)
    if not math.isfinite(lp):
        raise ValueError(f"sampler for p produced {x!r} where logpdf_p is {lp}")
    u = rng.uniform()
    if math.log(u) <= logpdf_q(x) - lp:
        return CoupledDraw(x, x, True)
    for _ in range(cap):
        y = sample_q(rng)
        lq = logpdf_q(y)
        if not math.isfinite(lq):
            raise ValueError(f"sampler for q produced {y!r} where logpdf_q is {lq}")
        ratio = logpdf_p(y) - lq
        if ratio == -math.inf or math.log(rng.uniform()) > ratio:
            return CoupledDraw(x, y, False)
    raise RuntimeError("residual rejection loop exceeded its cap; a proposal density is wrong")


def couple_discrete_uniform(a, b, rng) -> CoupledDraw:
    """Maximal coupling of Uniform(a) and Uniform(b) over finite sets."""
    a = sorted(a)
    b = sorted(b)
    if not a or not b:
        raise ValueError("sets must be nonempty")
    b_set, a_set = set(b), set(a)
    x = a[rng.integers(0, len(a))]
    # q(x)/p(x) = |a|/|b| when x is in b, else 0
    if x in b_set and rng.uniform() <= len(a) / len(b):
        return CoupledDraw(x, x, True)
    while True:
        y = b[rng.integers(0, len(b))]
        if y not in a_set or rng.uniform() > len(b) / len(a):
            return CoupledDraw(x, y, False)


def couple_discrete(items_x, weights_x, items_y, weights_y, rng) -> CoupledDraw:
    """Maximal coupling of two weighted discrete distributions."""
    items_x = list(items_x)
    items_y = list(items_y)
    px = _normalized(weights_x)
    py = _normalized(weights_y)
    lx = {i: math.log(w) for i, w in zip(items_x, px) if w > 0}
    ly = {i: math.log(w) for i, w in zip(items_y, py) if w > 0}

    def sample_from(items, probs):
        def do(r):
            return items[int(r.choice(len(items), p=probs))]

        return do

    return couple_generic(
        sample_from(items_x, px),
        lambda v: lx.get(v, -math.inf),
        sample_from(items_y, py),
        lambda v: ly.get(v, -math.inf),
        rng,
    )


def _normalized(w):
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    return w / w.sum()


def couple_uniform_interval(i1, i2, rng) -> CoupledDraw:
    """Maximal coupling of continuous uniforms on two intervals (direct form)."""
    a1, b1 = float(i1[0]), float(i1[1])
    a2, b2 = float(i2[0]), float(i2[1])
    len1, len2 = b1 - a1, b2 - a2
    if len1 <= 0 or len2 <= 0:
        raise ValueError("intervals must have positive length")
    lo, hi = max(a1, a2), min(b1, b2)
    overlap = max(0.0, hi - lo)
    omega = overlap / max(len1, len2)
    if rng.uniform() < omega:
        v = rng.uniform(lo, hi)
        return CoupledDraw(v, v, True)
    x = _residual_uniform(a1, b1, len1, lo, hi, max(len1, len2), rng)
    y = _residual_uniform(a2, b2, len2, lo, hi, max(len1, len2), rng)
    return CoupledDraw(x, y, False)


def _residual_uniform(a, b, length, lo, hi, maxlen, rng):
    # pieces of (p - p^q): full density outside the overlap, reduced inside;
    # the overlap, when nonempty, is always a sub-interval of (a, b)
    pieces = []
    if hi > lo:
        if lo > a:
            pieces.append((a, lo, 1.0 / length))
        mid = 1.0 / length - 1.0 / maxlen
        if mid > 0:
            pieces.append((lo, hi, mid))
        if b > hi:
            pieces.append((hi, b, 1.0 / length))
    else:
        pieces.append((a, b, 1.0 / length))
    masses = [(e - s) * d for s, e, d in pieces]
    u = rng.uniform(0.0, sum(masses))
    acc = 0.0
    for (s, e, _), m in zip(pieces[:-1], masses[:-1]):
        acc += m
        if u <= acc:
            return rng.uniform(s, e)
    s, e, _ = pieces[-1]
    return rng.uniform(s, e)


def couple_trunc_exponential(theta: float, a_p: float, a_q: float, rng) -> CoupledDraw:
    """Maximal coupling of Exp(theta) laws restricted to [a_p, inf) and [a_q, inf)."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    gap = abs(a_p - a_q)
    if rng.uniform() < math.exp(-theta * gap):
        v = max(a_p, a_q) + rng.exponential(1.0 / theta)
        return CoupledDraw(v, v, True)
    # independent residuals: the lower-shifted law lives on [lo, hi), the other is untouched
    lo, hi = min(a_p, a_q), max(a_p, a_q)
    v = rng.uniform()
    trunc = lo - math.log1p(-v * (1.0 - math.exp(-theta * gap))) / theta
    other = hi + rng.exponential(1.0 / theta)
    if a_p < a_q:
        return CoupledDraw(trunc, other, False)
    return CoupledDraw(other, trunc, False)


# ---------------------------------------------------------------------
# Count laws (exact pmfs for the generic coupler)
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class PoissonLaw:
    mean: float

    def sample(self, rng) -> int:
        return int(rng.poisson(self.mean))

    def logpmf(self, k: int) -> float:
        if k < 0:
            return -math.inf
        if self.mean == 0.0:
            return 0.0 if k == 0 else -math.inf
        return float(k * math.log(self.mean) - self.mean - gammaln(k + 1))


@dataclass(frozen=True)
class NegBinomialLaw:
    """Number of failures before `shape` successes at success probability 1 - pi."""

    shape: float
    pi: float

    def sample(self, rng) -> int:
        if self.pi <= 0.0:
            return 0
        return int(rng.negative_binomial(self.shape, 1.0 - self.pi))

    def logpmf(self, k: int) -> float:
        if k < 0:
            return -math.inf
        if self.pi <= 0.0:
            return 0.0 if k == 0 else -math.inf
        r = self.shape
        return float(gammaln(r + k) - gammaln(r) - gammaln(k + 1) + k * math.log(self.pi) + r * math.log1p(-self.pi))


@dataclass(frozen=True)
class BinomialLaw:
    n: int
    p: float

    def sample(self, rng) -> int:
        return int(rng.binomial(self.n, self.p))

    def logpmf(self, k: int) -> float:
        if k < 0 or k > self.n:
            return -math.inf
        return float(
            gammaln(self.n + 1) - gammaln(k + 1) - gammaln(self.n - k + 1)
            + xlogy(k, self.p) + xlog1py(self.n - k, -self.p)
        )


@dataclass(frozen=True)
class UniformLaw:
    lo: float
    hi: float

    def sample(self, rng) -> float:
        return float(rng.uniform(self.lo, self.hi))

    def logpdf(self, v: float) -> float:
        if self.lo <= v < self.hi:
            return -math.log(self.hi - self.lo)
        return -math.inf


@dataclass(frozen=True)
class ShiftedExponentialLaw:
    """Exp(theta) shifted to start at `shift` (an Exp law restricted to [shift, inf))."""

    theta: float
    shift: float

    def sample(self, rng) -> float:
        return self.shift + float(rng.exponential(1.0 / self.theta))

    def logpdf(self, v: float) -> float:
        if v < self.shift:
            return -math.inf
        return math.log(self.theta) - self.theta * (v - self.shift)


def couple_counts(law_p, law_q, rng) -> CoupledDraw:
    """Maximal coupling of two count laws (Poisson, Negative Binomial, Binomial)."""
    return couple_generic(law_p.sample, law_p.logpmf, law_q.sample, law_q.logpmf, rng)


def multinomial_logpmf(counts, n: int, probs) -> float:
    k = np.asarray(counts)
    if k.sum() != n or np.any(k < 0):
        return -math.inf
    return float(gammaln(n + 1) - np.sum(gammaln(k + 1)) + np.sum(xlogy(k, probs)))


def couple_multinomial(n_x: int, n_y: int, probs_x, probs_y, rng) -> CoupledDraw:
    """Maximal coupling of multinomial count vectors when totals agree,
    independent draws otherwise."""
    probs_x = _normalized(probs_x)
    probs_y = _normalized(probs_y)
    if n_x != n_y:
        x = tuple(int(v) for v in rng.multinomial(n_x, probs_x))
        y = tuple(int(v) for v in rng.multinomial(n_y, probs_y))
        return CoupledDraw(x, y, False)

    def sampler(probs):
        def do(r):
            return tuple(int(v) for v in r.multinomial(n_x, probs))

        return do

    def log_pmf(probs) -> Callable:
        def do(counts):
            k = np.asarray(counts)
            if k.sum() != n_x or np.any(k < 0):
                return -math.inf
            return float(gammaln(n_x + 1) - np.sum(gammaln(k + 1)) + np.sum(xlogy(k, probs)))

        return do

    return couple_generic(sampler(probs_x), log_pmf(probs_x), sampler(probs_y), log_pmf(probs_y), rng)
