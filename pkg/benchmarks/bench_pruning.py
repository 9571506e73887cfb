"""Benchmark the compiled pruning kernel against the pure-Python fallback.

The pattern-expectation recursion is the hot loop of every likelihood
evaluation, hence of every MCMC iteration.  Run from the repo root:

    python3 benchmarks/bench_pruning.py
"""

import time

import numpy as np

from sdcouple import _pruning_py
from sdcouple import sdmodel as sd
from sdcouple.rng import RandomStream
from sdcouple.treespace import random_tree

try:
    from sdcouple import _pruning
except ImportError:
    _pruning = None


def args_for(n_leaves, n_patterns, seed=5):
    rng = RandomStream(seed, n_leaves, n_patterns)
    tree = random_tree([f"t{i}" for i in range(n_leaves)], 1000.0, rng)
    params = sd.SDParams(mu=2.5e-4, kappa=0.05, xi=sd.uniform_xi(n_leaves, 0.9))
    state = sd.initial_state(tree, params)
    state.cats[1] = 2
    patterns = np.zeros((n_patterns, n_leaves), dtype=np.int8)
    patterns[:, :] = rng.g.integers(0, 3, size=(n_patterns, n_leaves))
    patterns[:, 0] = 1  # keep every row observable
    surv, eff = sd._branch_arrays(state)
    order = np.array(tree.post_order(), dtype=np.int32)
    return (tree.parent, tree.child1, tree.child2, order, int(tree.root),
            surv, eff, params.xi, patterns, params.mu)


def time_call(fn, args, repeats):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn(*args)
    return (time.perf_counter() - t0) / repeats, out


def main():
    print(f"{'leaves':>7} {'patterns':>9} {'python':>12} {'compiled':>12} {'speedup':>8}")
    for n_leaves, n_patterns, repeats in [(8, 64, 200), (16, 128, 100), (32, 256, 50), (64, 512, 20)]:
        args = args_for(n_leaves, n_patterns)
        t_py, z_py = time_call(_pruning_py.pattern_expectations, args, repeats)
        if _pruning is None:
            print(f"{n_leaves:>7} {n_patterns:>9} {t_py*1e3:>10.3f}ms {'n/a':>12} {'n/a':>8}")
            continue
        t_cy, z_cy = time_call(_pruning.pattern_expectations, args, repeats)
        assert np.allclose(z_py, z_cy, rtol=1e-12), "backends disagree"
        print(f"{n_leaves:>7} {n_patterns:>9} {t_py*1e3:>10.3f}ms {t_cy*1e3:>10.3f}ms {t_py/t_cy:>7.1f}x")
    if _pruning is None:
        print("compiled kernel not built; run `pip install -e .` with a C compiler")


if __name__ == "__main__":
    main()
