"""Pure-Python pruning kernels, vectorised across trait patterns.

Import-time fallback for the compiled extension; both backends share one
calling convention (see pruning.py).  Pattern codes: 0 absent, 1 present,
2 missing.
"""

import numpy as np


def pattern_expectations(parent, child1, child2, order, root, surv, efflen, xi, patterns, mu):
    """Expected per-trait pattern counts at unit birth rate, one value per pattern row.

    Per node the recursion carries, conditional on a trait being present
    (u) or absent (d) at that node, the probability of the observed
    sub-pattern below it.  A trait born on branch i is absent everywhere
    outside the subtree of i, which contributes the sibling-product
    factor accumulated top-down in `out`.
    """
    P = patterns.shape[0]
    size = parent.shape[0]
    u = np.zeros((size, P))
    d = np.zeros((size, P))
    n_leaves = patterns.shape[1]

    for node in order:
        if node <= n_leaves:
            code = patterns[:, node - 1]
            xi_i = xi[node]
            u[node] = np.where(code == 1, xi_i, np.where(code == 2, 1.0 - xi_i, 0.0))
            d[node] = np.where(code == 0, xi_i, np.where(code == 2, 1.0 - xi_i, 0.0))
        else:
            c1, c2 = child1[node], child2[node]
            f1 = surv[c1] * u[c1] + (1.0 - surv[c1]) * d[c1]
            f2 = surv[c2] * u[c2] + (1.0 - surv[c2]) * d[c2]
            u[node] = f1 * f2
            d[node] = d[c1] * d[c2]

    out = np.zeros((size, P))
    out[root] = 1.0
    z = u[root] / mu
    for node in reversed(order):
        if node <= n_leaves:
            continue
        c1, c2 = child1[node], child2[node]
        out[c1] = out[node] * d[c2]
        out[c2] = out[node] * d[c1]
        for c in (c1, c2):
            z = z + out[c] * ((u[c] - d[c]) * (1.0 - surv[c]) / mu + d[c] * efflen[c])
    return z


def observable_total(parent, child1, child2, order, root, surv, efflen, xi, n_leaves, mu):
    """Expected number of observable traits at unit birth rate.

    Tracks per node the probability that no leaf below it registers a
    present state given the trait is present at the node; absent traits
    never register present, so no outside factor is needed.
    """
    size = parent.shape[0]
    v = np.zeros(size)
    for node in order:
        if node <= n_leaves:
            v[node] = 1.0 - xi[node]
        else:
            c1, c2 = child1[node], child2[node]
            v[node] = (surv[c1] * v[c1] + 1.0 - surv[c1]) * (surv[c2] * v[c2] + 1.0 - surv[c2])
    total = (1.0 - v[root]) / mu
    for node in order:
        if node != root:
            total += (1.0 - v[node]) * (1.0 - surv[node]) / mu
    return float(total)
