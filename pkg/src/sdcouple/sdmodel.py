"""Binary-trait birth-death model: likelihood, priors, forward simulator.

Traits arise at rate lambda, are copied at speciations and die at per
capita rate mu.  Point events ("catastrophes") of strength kappa on a
branch act like instantaneously advancing the trait process by
-log(1-kappa)/mu time units, so only their number per branch enters the
state.  Leaf i reports the true state of a trait with probability xi_i
and a missing symbol otherwise; traits never recorded present anywhere
are unobservable.

With a Gamma(a, b) prior on lambda integrated out, the observed pattern
counts are Negative Multinomial; the same construction applied to the
catastrophe rate rho gives a Negative Multinomial prior on per-branch
catastrophe counts.  Gamma distributions are parameterised by
(shape, rate) throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from . import pruning
from .treespace import CladeConstraint, Tree

ABSENT, PRESENT, MISSING = 0, 1, 2
_SYMBOLS = {"0": ABSENT, "1": PRESENT, "?": MISSING}
_GLYPHS = {ABSENT: "0", PRESENT: "1", MISSING: "?"}


@dataclass
class SDParams:
    """Scalar parameters, their priors/bounds and fixed-or-varying flags."""

    mu: float
    kappa: float = 0.0
    xi: np.ndarray | None = None  # indexed by leaf label, slot 0 unused
    lambda_prior: tuple[float, float] = (1.0, 1e-3)
    rho_prior: tuple[float, float] = (1.5, 5000.0)
    root_age_bound: float = math.inf
    mu_bounds: tuple[float, float] = (1e-12, 1e3)
    kappa_bounds: tuple[float, float] = (0.0, 0.999)
    mu_fixed: bool = True
    kappa_fixed: bool = True
    xi_fixed: bool = True
    leaf_age_ranges: dict[int, tuple[float, float]] = field(default_factory=dict)
    # catastrophes in the model at all; None resolves to "kappa can be nonzero"
    catastrophes: bool | None = None

    def __post_init__(self):
        if self.catastrophes is None:
            self.catastrophes = self.kappa > 0.0 or not self.kappa_fixed
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError("kappa must lie in [0, 1)")
        for a, b in (self.lambda_prior, self.rho_prior):
            if not (a > 0 and b > 0):
                raise ValueError("Gamma hyperparameters must be positive")
        if self.xi is not None:
            xi = np.asarray(self.xi, dtype=np.float64)
            if np.any(xi[1:] < 0) or np.any(xi[1:] > 1):
                raise ValueError("xi entries must lie in [0, 1]")
            self.xi = xi

    def copy(self) -> "SDParams":
        return replace(self, xi=None if self.xi is None else self.xi.copy())


def uniform_xi(n_leaves: int, value: float = 1.0) -> np.ndarray:
    xi = np.full(n_leaves + 1, value, dtype=np.float64)
    xi[0] = 0.0
    return xi


@dataclass
class PatternData:
    """Distinct leaf patterns with multiplicities; codes 0/1/2 = absent/present/missing."""

    taxa: tuple[str, ...]
    patterns: np.ndarray  # (P, L) int8
    counts: np.ndarray  # (P,) int64

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=np.int8).reshape(-1, len(self.taxa))
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.patterns.shape[0] != self.counts.shape[0]:
            raise ValueError("patterns and counts disagree")
        if np.any(self.counts < 1):
            raise ValueError("counts must be >= 1")
        if self.patterns.shape[0]:
            if not np.all(np.any(self.patterns == PRESENT, axis=1)):
                raise ValueError("every pattern needs at least one present entry")
            uniq = np.unique(self.patterns, axis=0)
            if uniq.shape[0] != self.patterns.shape[0]:
                raise ValueError("patterns must be distinct")

    @property
    def n_traits(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_rows(cls, taxa, rows: np.ndarray) -> "PatternData":
        """Aggregate a (traits x leaves) code matrix into distinct patterns."""
        rows = np.asarray(rows, dtype=np.int8).reshape(-1, len(taxa))
        keep = np.any(rows == PRESENT, axis=1)
        rows = rows[keep]
        if rows.shape[0] == 0:
            return cls(tuple(taxa), np.zeros((0, len(taxa)), dtype=np.int8), np.zeros(0, dtype=np.int64))
        uniq, counts = np.unique(rows, axis=0, return_counts=True)
        return cls(tuple(taxa), uniq, counts)


def save_pattern_data(data: PatternData, path) -> None:
    """Tab-separated trait file: header of taxon names, one row per trait."""
    with open(path, "w") as fh:
        fh.write("\t".join(data.taxa) + "\n")
        for pat, cnt in zip(data.patterns, data.counts):
            row = "\t".join(_GLYPHS[int(c)] for c in pat)
            for _ in range(int(cnt)):
                fh.write(row + "\n")


def load_pattern_data(path) -> PatternData:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        taxa = tuple(header.split("\t"))
        if len(taxa) != len(set(taxa)) or any(not t for t in taxa):
            raise ValueError(f"{path}: bad taxon header")
        rows = []
        for ln, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != len(taxa):
                raise ValueError(f"{path}:{ln}: expected {len(taxa)} columns")
            try:
                row = [_SYMBOLS[c] for c in cells]
            except KeyError:
                raise ValueError(f"{path}:{ln}: symbols must be 0, 1 or ?") from None
            if PRESENT not in row:
                raise ValueError(f"{path}:{ln}: trait with no present entry is unobservable")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no traits")
    return PatternData.from_rows(taxa, np.array(rows, dtype=np.int8))


@dataclass
class SDState:
    """Full chain state: tree, scalar parameters, per-branch catastrophe counts."""

    tree: Tree
    params: SDParams
    cats: np.ndarray  # int64 indexed by node label; root slot is 0
    constraints: tuple[CladeConstraint, ...] = ()

    def copy(self) -> "SDState":
        return SDState(self.tree.copy(), self.params.copy(), self.cats.copy(), self.constraints)

    @property
    def n_cats(self) -> int:
        return int(self.cats.sum())


def initial_state(tree: Tree, params: SDParams, constraints=()) -> SDState:
    p = params.copy()
    if p.xi is None:
        p.xi = uniform_xi(tree.n_leaves)
    return SDState(tree, p, np.zeros(2 * tree.n_leaves, dtype=np.int64), tuple(constraints))


# ---------------------------------------------------------------------
# Effective branch lengths
# ---------------------------------------------------------------------


def effective_length(delta: float, n_cat: int, mu: float, kappa: float) -> float:
    """Branch length after replacing each catastrophe by a time advance."""
    if delta < 0:
        raise ValueError("branch length must be nonnegative")
    if n_cat == 0:
        return float(delta)
    if kappa >= 1.0:
        raise ValueError("kappa = 1 advances the process infinitely")
    return float(delta + n_cat * (-math.log1p(-kappa) / mu))


def _branch_arrays(state: SDState) -> tuple[np.ndarray, np.ndarray]:
    """(survival, effective length) per branch, indexed by offspring label."""
    tree = state.tree
    mu, kappa = state.params.mu, state.params.kappa
    size = 2 * tree.n_leaves
    eff = np.zeros(size)
    labels = np.arange(1, size, dtype=np.intp)
    labels = labels[labels != tree.root]
    eff[labels] = tree.age[tree.parent[labels]] - tree.age[labels]
    cats = state.cats[labels]
    if np.any(cats > 0):
        if kappa >= 1.0:
            raise ValueError("kappa = 1 advances the process infinitely")
        eff[labels] += cats * (-math.log1p(-kappa) / mu)
    surv = np.zeros(size)
    surv[labels] = np.exp(-mu * eff[labels])
    return surv, eff


def _kernel_args(state: SDState):
    tree = state.tree
    surv, eff = _branch_arrays(state)
    order = np.array(tree.post_order(), dtype=np.int32)
    return tree.parent, tree.child1, tree.child2, order, int(tree.root), surv, eff


# ---------------------------------------------------------------------
# Expected pattern counts and totals
# ---------------------------------------------------------------------


def pattern_expectations(state: SDState, patterns: np.ndarray) -> np.ndarray:
    """Expected trait counts per pattern row at unit birth rate."""
    patterns = np.asarray(patterns, dtype=np.int8)
    parent, c1, c2, order, root, surv, eff = _kernel_args(state)
    return np.asarray(
        pruning.pattern_expectations(
            parent, c1, c2, order, root, surv, eff, state.params.xi, patterns, state.params.mu
        )
    )


def expected_pattern_count(state: SDState, pattern) -> float:
    if isinstance(pattern, str):
        pattern = [_SYMBOLS[c] for c in pattern]
    arr = np.asarray(pattern, dtype=np.int8).reshape(1, -1)
    return float(pattern_expectations(state, arr)[0])


def expected_total(state: SDState) -> float:
    """Expected observable trait count at unit birth rate, without pattern enumeration."""
    parent, c1, c2, order, root, surv, eff = _kernel_args(state)
    return pruning.observable_total(
        parent, c1, c2, order, root, surv, eff, state.params.xi, state.tree.n_leaves, state.params.mu
    )


def enumerate_patterns(n_leaves: int, with_missing: bool = False):
    """All observable patterns (>= 1 present entry); for brute-force checks only."""
    alphabet = (ABSENT, PRESENT, MISSING) if with_missing else (ABSENT, PRESENT)
    rows = [p for p in itertools.product(alphabet, repeat=n_leaves) if PRESENT in p]
    return np.array(rows, dtype=np.int8)


# ---------------------------------------------------------------------
# Likelihood and priors
# ---------------------------------------------------------------------


def log_likelihood(state: SDState, data: PatternData) -> float:
    """Negative Multinomial log mass of the observed pattern counts."""
    a, b = state.params.lambda_prior
    z_total = expected_total(state)
    if data.patterns.shape[0] == 0:
        return float(a * math.log(b / (b + z_total)))
    z = pattern_expectations(state, data.patterns)
    if np.any(z <= 0.0):
        return -math.inf
    n_total = data.n_traits
    out = gammaln(a + n_total) - gammaln(a) - np.sum(gammaln(data.counts + 1.0))
    out += a * math.log(b / (b + z_total))
    out += float(np.sum(data.counts * (np.log(z) - math.log(b + z_total))))
    return float(out)


def _cat_count_log_prior(state: SDState) -> float:
    a_rho, b_rho = state.params.rho_prior
    tree = state.tree
    labels = np.arange(1, 2 * tree.n_leaves, dtype=np.intp)
    labels = labels[labels != tree.root]
    deltas = tree.age[tree.parent[labels]] - tree.age[labels]
    counts = state.cats[labels]
    n = int(counts.sum())
    delta = float(deltas.sum())
    out = gammaln(a_rho + n) - gammaln(a_rho) - float(np.sum(gammaln(counts + 1.0)))
    out += a_rho * math.log(b_rho / (b_rho + delta))
    nz = counts > 0
    out += float(np.sum(counts[nz] * np.log(deltas[nz] / (b_rho + delta))))
    return out


def log_prior(state: SDState) -> float:
    """Flat over topologies and node times within bounds, Negative Multinomial
    over catastrophe counts, flat [0,1] per xi, flat over mu and kappa in bounds."""
    p = state.params
    tree = state.tree
    if tree.age[tree.root] > p.root_age_bound:
        return -math.inf
    if not tree.satisfies(state.constraints):
        return -math.inf
    if not (p.mu_bounds[0] <= p.mu <= p.mu_bounds[1]):
        return -math.inf
    if not (p.kappa_bounds[0] <= p.kappa <= p.kappa_bounds[1]) or p.kappa >= 1.0:
        return -math.inf
    xi = p.xi[1:]
    if np.any(xi < 0.0) or np.any(xi > 1.0):
        return -math.inf
    for lab, (lo, hi) in p.leaf_age_ranges.items():
        if not (lo <= tree.age[lab] <= hi):
            return -math.inf
    if state.cats[tree.root] != 0:
        raise ValueError("catastrophe count on the root branch")
    if not p.catastrophes:
        if state.n_cats != 0:
            raise ValueError("catastrophe counts present in a model without catastrophes")
        return 0.0
    return _cat_count_log_prior(state)


def log_posterior(state: SDState, data: PatternData | None) -> float:
    lp = log_prior(state)
    if not math.isfinite(lp) or data is None:
        return lp
    return lp + log_likelihood(state, data)


def cat_count_conditional(state: SDState, branch: int) -> tuple[float, float]:
    """(shape r, success pi) of the Negative Binomial prior on one branch's
    count conditional on all other branches, evaluated in `state`."""
    a_rho, b_rho = state.params.rho_prior
    tree = state.tree
    labels = np.arange(1, 2 * tree.n_leaves, dtype=np.intp)
    labels = labels[labels != tree.root]
    deltas = tree.age[tree.parent[labels]] - tree.age[labels]
    delta_total = float(deltas.sum())
    delta_b = tree.branch_length(branch)
    n_rest = int(state.cats[labels].sum() - state.cats[branch])
    r = a_rho + n_rest
    pi = delta_b / (b_rho + delta_total)
    return r, pi


# ---------------------------------------------------------------------
# Forward simulator (data generator and likelihood oracle)
# ---------------------------------------------------------------------


def simulate(tree: Tree, lam: float, mu: float, kappa: float, cats: np.ndarray, xi: np.ndarray, rng) -> PatternData:
    """Exact forward draw of an observable trait matrix.

    Equilibrium Poisson(lam/mu) traits enter at the root; each branch
    adds Poisson(lam * effective length) births at uniform effective
    positions; survival is exponential in effective time; traits copy at
    splits; each leaf registers the true state with its own probability
    and a missing symbol otherwise.
    """
    if lam < 0 or mu <= 0:
        raise ValueError("need lam >= 0 and mu > 0")
    L = tree.n_leaves
    size = 2 * L
    eff = np.zeros(size)
    for i in tree.node_labels():
        if i != tree.root:
            eff[i] = effective_length(tree.branch_length(i), int(cats[i]), mu, kappa)

    n_root = rng.poisson(lam / mu) if lam > 0 else 0
    born_at: dict[int, np.ndarray] = {}  # node -> bool array over that node's newborn traits
    totals = [int(n_root)]
    order = tree.post_order()
    for node in order:
        if node == tree.root:
            continue
        n_new = rng.poisson(lam * eff[node]) if lam > 0 and eff[node] > 0 else 0
        if n_new:
            pos = _unif(rng, n_new) * eff[node]
            alive = _unif(rng, n_new) < np.exp(-mu * pos)
            born_at[node] = alive
            totals.append(int(n_new))
        else:
            born_at[node] = np.zeros(0, dtype=bool)
            totals.append(0)
    n_traits = sum(totals)
    if n_traits == 0:
        return PatternData(tree.names, np.zeros((0, L), dtype=np.int8), np.zeros(0, dtype=np.int64))

    # presence[node] is a bool vector over all traits; traits born below a
    # node are simply absent above it.
    presence = {tree.root: np.zeros(n_traits, dtype=bool)}
    presence[tree.root][:n_root] = True
    offsets = {}
    start = n_root
    for node in order:
        if node == tree.root:
            continue
        k = born_at[node].shape[0]
        offsets[node] = (start, start + k)
        start += k

    for node in reversed(order):  # pre-order: parents before children
        if node == tree.root:
            continue
        par = int(tree.parent[node])
        inherited = presence[par].copy()
        idx = np.flatnonzero(inherited)
        if idx.size:
            keep = _unif(rng, idx.size) < math.exp(-mu * eff[node])
            inherited[idx[~keep]] = False
        lo, hi = offsets[node]
        if hi > lo:
            inherited[lo:hi] = born_at[node]
        presence[node] = inherited

    rows = np.zeros((n_traits, L), dtype=np.int8)
    for leaf in tree.leaf_labels():
        observed = _unif(rng, n_traits) < xi[leaf]
        rows[:, leaf - 1] = np.where(observed, np.where(presence[leaf], PRESENT, ABSENT), MISSING)
    return PatternData.from_rows(tree.names, rows)


def _unif(rng, n: int) -> np.ndarray:
    g = rng.g if hasattr(rng, "g") else rng
    return g.uniform(size=n)


def simulate_missingness(n_leaves: int, rng, a: float = 1.0, b: float = 1.0 / 3.0) -> np.ndarray:
    """Independent Beta(a, b) observation probabilities per leaf (label-indexed)."""
    xi = np.zeros(n_leaves + 1)
    for i in range(1, n_leaves + 1):
        xi[i] = rng.beta(a, b)
    return xi
