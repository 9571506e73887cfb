"""Lag-l coupled chain execution, meeting detection and the pair orchestrator.

A pair advances one chain for `lag` iterations, then both chains under the
coupled kernel until the staggered states agree exactly.  Equality is
only tested on the thinned grid, so meeting times have resolution
`thin` (tau = lag + k * thin).  Once met, chains can never separate; this
is asserted at every later checkpoint that gets executed.
"""

from __future__ import annotations

import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .moves import KernelConfig, MoveId, mh_accept, pick_move, propose_coupled, propose_marginal
from .rng import RandomStream
from .sdmodel import PatternData, SDParams, SDState, initial_state, log_posterior, uniform_xi
from .treespace import CladeConstraint, clades, housekeeping_with_map, random_tree, serialize_newick

TOPOLOGY_MOVES = frozenset({MoveId.SWAP_NARROW, MoveId.SWAP_WIDE, MoveId.SPR_NARROW, MoveId.SPR_WIDE})


class FaithfulnessError(RuntimeError):
    """Chains separated after meeting: a coupling invariant is broken."""


@dataclass
class ChainSetup:
    """Everything a pair needs besides the data: priors, constraints, kernels."""

    taxa: tuple[str, ...]
    params: SDParams
    kernel: KernelConfig
    init_kernel: KernelConfig | None = None
    constraints: tuple[CladeConstraint, ...] = ()
    thin: int = 100
    k_init: int | None = None  # prior-targeting iterations; default 10 L^2
    init_root_age: float | None = None

    def initial_iterations(self) -> int:
        if self.k_init is not None:
            return self.k_init
        return 10 * len(self.taxa) ** 2

    def start_root_age(self) -> float:
        if self.init_root_age is not None:
            return self.init_root_age
        bound = self.params.root_age_bound
        return bound / 2.0 if math.isfinite(bound) else 1.0


def warmup_kernel(kernel: KernelConfig) -> KernelConfig:
    """Kernel for the short prior-targeting initial runs: no catastrophe
    moves (counts start at zero) and multi-node rescalings switched on."""
    weights = {m: w for m, w in kernel.weights.items()
               if m not in (MoveId.CAT_ADD, MoveId.CAT_DELETE, MoveId.CAT_MOVE, MoveId.CAT_RESAMPLE)}
    for m in (MoveId.RESCALE_TREE, MoveId.RESCALE_SUBTREE):
        weights.setdefault(m, 1.0)
    return KernelConfig(weights=weights, theta=kernel.theta)


@dataclass
class CoupledPair:
    x: SDState
    y: SDState
    lag: int
    step: int  # iteration count of the x chain
    rng: RandomStream
    thin: int
    met: bool = False
    lp_x: float = math.nan
    lp_y: float = math.nan
    needs_housekeeping: bool = True


@dataclass
class MeetingRecord:
    pair_index: int
    lag: int
    tau: int
    censored: bool
    wall_seconds: float
    sample_files: tuple[str, ...] = ()
    error: str = ""


def state_signature(state: SDState):
    """Canonical, label-free encoding of the full state; two states are
    exactly equal (will never separate under further coupled updates) iff
    their signatures are equal."""
    tree = state.tree
    masks = clades(tree)
    leaf_ages = tuple(float(tree.age[l]) for l in tree.leaf_labels())
    leaf_cats = tuple(int(state.cats[l]) for l in tree.leaf_labels())
    internal = tuple(
        sorted((m, float(tree.age[n]), -1 if n == tree.root else int(state.cats[n])) for m, n in masks.items())
    )
    return (
        leaf_ages,
        leaf_cats,
        internal,
        float(state.params.mu),
        float(state.params.kappa),
        tuple(float(v) for v in state.params.xi[1:]),
    )


def states_equal(x: SDState, y: SDState) -> bool:
    return state_signature(x) == state_signature(y)


# ---------------------------------------------------------------------
# chain advancement
# ---------------------------------------------------------------------


def init_state(data: PatternData | None, setup: ChainSetup, rng: RandomStream) -> SDState:
    """Draw a start state: a random coalescent tree refined by a short
    marginal run targeting the prior, catastrophe counts zeroed."""
    params = setup.params.copy()
    if params.xi is None:
        params.xi = uniform_xi(len(setup.taxa))
    if not params.xi_fixed:
        # xi = 1 is a fixed point of the rescale map, so a varying xi must
        # start in the interior; the warm-up run then targets its flat prior
        for leaf in range(1, len(setup.taxa) + 1):
            params.xi[leaf] = rng.uniform()
    state = None
    for _ in range(10_000):  # random starts rarely satisfy clade constraints
        tree = random_tree(setup.taxa, setup.start_root_age(), rng)
        candidate = initial_state(tree, params, setup.constraints)
        if math.isfinite(log_posterior(candidate, None)):
            state = candidate
            break
    if state is None:
        raise ValueError("no random start satisfies the constraints; adjust init_root_age or constraints")
    kernel = setup.init_kernel if setup.init_kernel is not None else warmup_kernel(setup.kernel)
    state, _ = advance_marginal(state, kernel, rng, setup.initial_iterations(), data=None)
    state.cats[:] = 0  # the warm-up targets the prior without catastrophes
    return state


def advance_marginal(state: SDState, kernel: KernelConfig, rng, steps: int,
                     data: PatternData | None, lp: float | None = None, hook=None):
    """Plain MH chain; `hook(iteration, state, lp)` fires after every step."""
    if lp is None:
        lp = log_posterior(state, data)

    def log_post(s):
        return log_posterior(s, data)

    for it in range(steps):
        move = pick_move(kernel, rng)
        outcome = propose_marginal(move, state, kernel, rng)
        u = rng.uniform()
        state, lp, _ = mh_accept(state, lp, outcome, u, log_post)
        if hook is not None:
            hook(it + 1, state, lp)
    return state, lp


def advance_coupled(pair: CoupledPair, kernel: KernelConfig, data: PatternData | None) -> CoupledPair:
    """One draw from the coupled kernel (housekeeping first when needed)."""
    if math.isnan(pair.lp_x):
        pair.lp_x = log_posterior(pair.x, data)
    if math.isnan(pair.lp_y):
        pair.lp_y = log_posterior(pair.y, data)
    if pair.needs_housekeeping:
        new_tree, relabel = housekeeping_with_map(pair.x.tree, pair.y.tree)
        if relabel:
            new_cats = pair.y.cats.copy()
            for old, new in relabel.items():
                new_cats[new] = pair.y.cats[old]
            pair.y.cats = new_cats
        pair.y.tree = new_tree
        pair.needs_housekeeping = False

    def log_post(s):
        return log_posterior(s, data)

    move = pick_move(kernel, pair.rng)
    out_x, out_y = propose_coupled(move, pair.x, pair.y, kernel, pair.rng)
    u = pair.rng.uniform()
    pair.x, pair.lp_x, acc_x = mh_accept(pair.x, pair.lp_x, out_x, u, log_post)
    pair.y, pair.lp_y, acc_y = mh_accept(pair.y, pair.lp_y, out_y, u, log_post)
    if move in TOPOLOGY_MOVES and (acc_x or acc_y):
        pair.needs_housekeeping = True
    pair.step += 1
    return pair


def sample_row(iteration: int, state: SDState, lp: float) -> dict:
    tree = state.tree
    row = {
        "iteration": iteration,
        "log_posterior": lp,
        "root_age": float(tree.age[tree.root]),
        "mu": state.params.mu,
        "kappa": state.params.kappa,
        "n_total": state.n_cats,
        "newick": serialize_newick(tree),
    }
    for i, leaf in enumerate(tree.leaf_labels(), start=1):
        row[f"xi_{i}"] = float(state.params.xi[leaf])
    return row


def run_pair(data: PatternData | None, setup: ChainSetup, lag: int, max_iter: int,
             rng: RandomStream, pair_index: int = 0, extra_iterations: int = 0):
    """Algorithm-1 execution for one pair.

    Returns (MeetingRecord, samples_x, samples_y); sample rows sit on the
    thinned grids of each chain (x at multiples of thin, y offset by the
    lag).  Unmet pairs at max_iter yield a censored record with tau set to
    max_iter.  `extra_iterations` keeps the coupled kernel running past
    the meeting, asserting at every checkpoint that the chains still agree.
    """
    if lag < 1:
        raise ValueError("lag must be >= 1")
    t_start = time.perf_counter()
    thin = setup.thin
    x = init_state(data, setup, rng)
    y = init_state(data, setup, rng)
    lp_x = log_posterior(x, data)
    samples_x: list[dict] = [sample_row(0, x, lp_x)]
    samples_y: list[dict] = []

    def x_hook(it, st, lp):
        if it % thin == 0:
            samples_x.append(sample_row(it, st, lp))

    x, lp_x = advance_marginal(x, setup.kernel, rng, lag, data, lp_x, hook=x_hook)
    pair = CoupledPair(x=x, y=y, lag=lag, step=lag, rng=rng, thin=thin, lp_x=lp_x)
    pair.lp_y = log_posterior(y, data)
    samples_y.append(sample_row(0, y, pair.lp_y))

    tau = None
    if states_equal(pair.x, pair.y):
        tau = pair.step
        pair.met = True
    while tau is None and pair.step < max_iter:
        pair = advance_coupled(pair, setup.kernel, data)
        if pair.step % thin == 0:
            samples_x.append(sample_row(pair.step, pair.x, pair.lp_x))
        if (pair.step - lag) % thin == 0:
            samples_y.append(sample_row(pair.step - lag, pair.y, pair.lp_y))
            if states_equal(pair.x, pair.y):
                tau = pair.step
                pair.met = True
    censored = tau is None
    for _ in range(extra_iterations):
        pair = advance_coupled(pair, setup.kernel, data)
        if (pair.step - lag) % thin == 0 and pair.met and not states_equal(pair.x, pair.y):
            raise FaithfulnessError(f"pair {pair_index} separated at iteration {pair.step}")
    record = MeetingRecord(
        pair_index=pair_index,
        lag=lag,
        tau=max_iter if censored else tau,
        censored=censored,
        wall_seconds=time.perf_counter() - t_start,
    )
    return record, samples_x, samples_y


def _run_one(args):
    data, setup, lag, max_iter, master_seed, pair_index = args
    rng = RandomStream(master_seed, lag, pair_index)
    try:
        record, sx, sy = run_pair(data, setup, lag, max_iter, rng, pair_index)
    except Exception as exc:  # a failed pair must not sink the experiment
        record = MeetingRecord(pair_index, lag, max_iter, True, 0.0, error=f"{type(exc).__name__}: {exc}")
        sx, sy = [], []
    return record, sx, sy


def run_experiment(data: PatternData | None, setup: ChainSetup, lags, n_pairs: int,
                   master_seed: int, max_iter: int, threads: int = 1, sample_sink=None):
    """n_pairs independent pairs at each lag, streams derived from
    (master_seed, lag, pair); results are ordered by (lag, pair) and do not
    depend on scheduling."""
    jobs = [(data, setup, lag, max_iter, master_seed, k) for lag in lags for k in range(n_pairs)]
    results = []
    if threads > 1:
        # spawn, not fork: workers must not inherit lock state from a busy parent
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    records = []
    for (record, sx, sy), job in zip(results, jobs):
        if sample_sink is not None:
            sample_sink(record, sx, sy)
        records.append(record)
    records.sort(key=lambda r: (r.lag, r.pair_index))
    return records
