"""Shared test helpers: direct prior oracles and ESS-adjusted subsampling."""

import numpy as np

from sdcouple.treespace import Tree, clades


def uniform_labeled_topology(taxa, g) -> Tree:
    """Uniform over labeled rooted bifurcating topologies, by inserting each
    new leaf on an edge chosen uniformly (the root edge included)."""
    L = len(taxa)
    t = Tree(L, tuple(sorted(taxa)))
    t.child1[L + 1], t.child2[L + 1] = 1, 2
    t.parent[1] = t.parent[2] = L + 1
    t.root = L + 1
    edges = [1, 2, L + 1]  # identified by the node below; root edge = root label
    for k in range(3, L + 1):
        newint = L + k - 1
        e = edges[int(g.integers(0, len(edges)))]
        if e == t.root:
            t.child1[newint], t.child2[newint] = t.root, k
            t.parent[t.root] = newint
            t.parent[k] = newint
            t.root = newint
        else:
            par = int(t.parent[e])
            t._replace_child(par, e, newint)
            t.child1[newint], t.child2[newint] = e, k
            t.parent[e] = newint
            t.parent[k] = newint
        edges += [k, newint]
    return t


def sample_prior_tree(taxa, bound, g, leaf_ranges=None, max_tries=100_000) -> Tree:
    """Rejection draw from the flat joint prior: uniform labeled topology,
    iid Uniform(0, bound) internal ages (and leaf ages over their ranges),
    accepted when the age ordering holds.  Marginal topology weights are
    then proportional to each topology's valid-age volume, exactly the
    normalization the flat density implies."""
    L = len(taxa)
    leaf_ranges = leaf_ranges or {}
    for _ in range(max_tries):
        t = uniform_labeled_topology(taxa, g)
        for node, age in zip(range(L + 1, 2 * L), g.uniform(0, bound, L - 1)):
            t.age[node] = age
        for leaf, (lo, hi) in leaf_ranges.items():
            t.age[leaf] = g.uniform(lo, hi)
        ok = True
        for node in range(1, 2 * L):
            p = int(t.parent[node])
            if p and t.age[node] >= t.age[p]:
                ok = False
                break
        if ok:
            t._canonicalize_slots()
            return t
    raise RuntimeError("prior rejection sampler starved")


def three_leaf_shape(tree: Tree) -> tuple[int, int]:
    """Which pair of leaves {1,2,3} is grouped in the induced 3-leaf topology."""
    masks = clades(tree)
    for pair in ((1, 2), (1, 3), (2, 3)):
        pm = (1 << (pair[0] - 1)) | (1 << (pair[1] - 1))
        other = ({1, 2, 3} - set(pair)).pop()
        om = 1 << (other - 1)
        if any((m & pm) == pm and not (m & om) for m in masks):
            return pair
    raise AssertionError("no 3-leaf shape found")


def effective_sample_size(series) -> float:
    """Initial-positive-sequence autocorrelation estimate of the ESS."""
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    x = x - x.mean()
    var = float(np.dot(x, x)) / n
    if var == 0:
        return float(n)
    acf_sum = 0.0
    for k in range(1, n // 2):
        rho = float(np.dot(x[:-k], x[k:])) / ((n - k) * var)
        if rho <= 0:
            break
        acf_sum += rho
    return n / (1.0 + 2.0 * acf_sum)


def ess_subsample(series) -> np.ndarray:
    """Thin a correlated series down to roughly independent draws."""
    x = np.asarray(series, dtype=np.float64)
    ess = effective_sample_size(x)
    stride = max(1, int(np.ceil(x.size / max(ess, 1.0))))
    return x[::stride]
