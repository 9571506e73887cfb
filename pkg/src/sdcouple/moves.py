"""The mixture proposal kernel: marginal and coupled variants of every move.

Each move returns a ProposalOutcome whose `log_hastings` carries the full
log proposal-density ratio (reverse over forward, Jacobians included);
the accept step adds the log-posterior difference, so their sum is the
log Metropolis-Hastings ratio.  Failed proposals keep the current state
and are guaranteed rejections.

Coupled variants mirror the marginal moves step for step, drawing every
stochastic quantity through the couplers module.  The per-chain marginal
of a coupled proposal coincides with the marginal move, and two identical
(housekept) states take identical code paths, so they produce bitwise
identical proposals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import couplings as cp
from .couplings import BinomialLaw, NegBinomialLaw, ShiftedExponentialLaw, UniformLaw
from .sdmodel import SDState, cat_count_conditional
from .treespace import InvalidEdit, Tree, apply_spr, apply_swap


class MoveId(IntEnum):
    SWAP_NARROW = 1
    SWAP_WIDE = 2
    SPR_NARROW = 3
    SPR_WIDE = 4
    NODE_TIME = 5
    LEAF_TIME = 6
    RESCALE_TREE = 7
    RESCALE_SUBTREE = 8
    RESCALE_ABOVE_CLADES = 9
    CAT_ADD = 10
    CAT_DELETE = 11
    CAT_MOVE = 12
    CAT_RESAMPLE = 13
    RESCALE_MU = 15
    RESCALE_KAPPA = 17
    RESCALE_XI_ONE = 18
    RESCALE_XI_ALL = 19


MOVE_NAMES = {
    MoveId.SWAP_NARROW: "swap_narrow",
    MoveId.SWAP_WIDE: "swap_wide",
    MoveId.SPR_NARROW: "spr_narrow",
    MoveId.SPR_WIDE: "spr_wide",
    MoveId.NODE_TIME: "node_time",
    MoveId.LEAF_TIME: "leaf_time",
    MoveId.RESCALE_TREE: "rescale_tree",
    MoveId.RESCALE_SUBTREE: "rescale_subtree",
    MoveId.RESCALE_ABOVE_CLADES: "rescale_above_clades",
    MoveId.CAT_ADD: "cat_add",
    MoveId.CAT_DELETE: "cat_delete",
    MoveId.CAT_MOVE: "cat_move",
    MoveId.CAT_RESAMPLE: "cat_resample_branch",
    MoveId.RESCALE_MU: "rescale_mu",
    MoveId.RESCALE_KAPPA: "rescale_kappa",
    MoveId.RESCALE_XI_ONE: "rescale_xi_one",
    MoveId.RESCALE_XI_ALL: "rescale_xi_all",
}
MOVE_IDS = {name: mid for mid, name in MOVE_NAMES.items()}


@dataclass
class KernelConfig:
    """Move weights plus the few kernel-level constants.

    `jacobian_exponent_offset` perturbs the scaling-move exponent; it
    exists so the prior-recovery suite can falsify a wrong Jacobian and
    must stay 0 in real runs.
    """

    weights: dict[MoveId, float]
    theta: float = 0.01
    jacobian_exponent_offset: int = 0

    def __post_init__(self):
        if any(v < 0 for v in self.weights.values()):
            raise ValueError("move weights must be nonnegative")
        w = {MoveId(m): float(v) for m, v in self.weights.items() if v > 0}
        if not w:
            raise ValueError("kernel needs at least one positive weight")
        if (MoveId.CAT_ADD in w) != (MoveId.CAT_DELETE in w):
            raise ValueError("catastrophe add/delete must be enabled as a pair")
        total = sum(w.values())
        self.weights = {m: v / total for m, v in sorted(w.items())}
        if not self.theta > 0:
            raise ValueError("theta must be positive")

    def log_weight_ratio(self, num: MoveId, den: MoveId) -> float:
        return math.log(self.weights[num] / self.weights[den])


def default_weights(
    cats: bool = True,
    mu_varying: bool = False,
    kappa_varying: bool = False,
    xi_varying: bool = False,
    leaf_ranges: bool = False,
    multi_scaling: bool = False,
) -> dict[MoveId, float]:
    """Uniform weights over the moves applicable to a model configuration.

    Multi-coordinate rescalings cannot propose a meeting, so they default
    to off (enable them for marginal warm-up runs).
    """
    moves = [MoveId.SWAP_NARROW, MoveId.SWAP_WIDE, MoveId.SPR_NARROW, MoveId.SPR_WIDE, MoveId.NODE_TIME]
    if leaf_ranges:
        moves.append(MoveId.LEAF_TIME)
    if multi_scaling:
        moves += [MoveId.RESCALE_TREE, MoveId.RESCALE_SUBTREE, MoveId.RESCALE_ABOVE_CLADES]
    if cats:
        moves += [MoveId.CAT_ADD, MoveId.CAT_DELETE, MoveId.CAT_MOVE, MoveId.CAT_RESAMPLE]
    if mu_varying:
        moves.append(MoveId.RESCALE_MU)
    if kappa_varying:
        moves.append(MoveId.RESCALE_KAPPA)
    if xi_varying:
        moves += [MoveId.RESCALE_XI_ONE, MoveId.RESCALE_XI_ALL]
    return {m: 1.0 for m in moves}


@dataclass
class ProposalOutcome:
    state: SDState
    log_hastings: float
    failed: bool
    info: dict = field(default_factory=dict)


def _failed(state: SDState, **info) -> ProposalOutcome:
    return ProposalOutcome(state, -math.inf, True, info)


def pick_move(config: KernelConfig, rng) -> MoveId:
    """One categorical draw by weight; shared across both chains in coupled mode."""
    u = rng.uniform()
    ids = list(config.weights)
    acc = 0.0
    for m in ids[:-1]:
        acc += config.weights[m]
        if u <= acc:
            return m
    return ids[-1]


# ---------------------------------------------------------------------
# selection sets and small helpers
# ---------------------------------------------------------------------


def _nonroot_labels(tree: Tree) -> list[int]:
    return [i for i in tree.node_labels() if i != tree.root]


def _narrow_swap_candidates(tree: Tree) -> list[int]:
    return [i for i in tree.node_labels() if tree.parent[i] and tree.parent[tree.parent[i]]]


def _wide_swap_pairs(tree: Tree) -> list[tuple[int, int]]:
    nodes = [i for i in tree.node_labels() if tree.parent[i]]
    pairs = []
    for a in range(len(nodes)):
        i = nodes[a]
        for b in range(a + 1, len(nodes)):
            j = nodes[b]
            if tree.parent[i] == tree.parent[j] or tree.parent[i] == j or tree.parent[j] == i:
                continue
            pairs.append((i, j))
    return pairs


def spr_destinations(tree: Tree, i: int) -> list[int]:
    """Branches where parent(i) could reattach above age(i); the root always
    qualifies (reattachment above it draws an exponential overshoot)."""
    t_i = tree.age[i]
    return [j for j in tree.node_labels() if j != i and (j == tree.root or tree.age[tree.parent[j]] > t_i)]


def _cat_branches(tree: Tree) -> list[int]:
    return [i for i in tree.node_labels() if i != tree.root]


def _deltas(tree: Tree, labels) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.intp)
    return tree.age[tree.parent[lab]] - tree.age[lab]


def _weighted_pick(items, weights, rng):
    w = np.asarray(weights, dtype=np.float64)
    return items[int(rng.choice(len(items), p=w / w.sum()))]


# ---------------------------------------------------------------------
# moves 1-2: subtree swaps
# ---------------------------------------------------------------------


def _swap_finish(state: SDState, i: int, j: int, info) -> ProposalOutcome:
    # selection sets for both variants have state-independent size, so the
    # proposal-density ratio is 1
    tree = state.tree
    if tree.age[j] >= tree.age[tree.parent[i]] or tree.age[i] >= tree.age[tree.parent[j]]:
        return _failed(state, **info)
    try:
        new_tree = apply_swap(tree, i, j)
    except InvalidEdit:
        return _failed(state, **info)
    out = state.copy()
    out.tree = new_tree
    return ProposalOutcome(out, 0.0, False, info)


def move_swap(state: SDState, wide: bool, rng) -> ProposalOutcome:
    """Exchange the parents of a node pair (narrow: a node and its uncle)."""
    if wide:
        pairs = _wide_swap_pairs(state.tree)
        i, j = pairs[rng.integers(0, len(pairs))]
    else:
        cands = _narrow_swap_candidates(state.tree)
        i = cands[rng.integers(0, len(cands))]
        j = state.tree.sibling(int(state.tree.parent[i]))
    return _swap_finish(state, i, j, {"i": i, "j": j})


def couple_swap(x: SDState, y: SDState, wide: bool, rng):
    if wide:
        d = cp.couple_discrete_uniform(_wide_swap_pairs(x.tree), _wide_swap_pairs(y.tree), rng)
        (ix, jx), (iy, jy) = d.x, d.y
    else:
        d = cp.couple_discrete_uniform(_narrow_swap_candidates(x.tree), _narrow_swap_candidates(y.tree), rng)
        ix, iy = d.x, d.y
        jx = x.tree.sibling(int(x.tree.parent[ix]))
        jy = y.tree.sibling(int(y.tree.parent[iy]))
    return _swap_finish(x, ix, jx, {"i": ix, "j": jx}), _swap_finish(y, iy, jy, {"i": iy, "j": jy})


# ---------------------------------------------------------------------
# moves 3-4: subtree prune-and-regraft
# ---------------------------------------------------------------------


@dataclass
class _SprPlan:
    i: int
    p: int  # parent of i
    h: int  # sibling of i
    q: int  # parent of p, 0 when p is the root
    j: int  # destination branch
    to_root: bool
    from_root: bool


def _spr_plan(state: SDState, i: int, j: int) -> _SprPlan | None:
    """None when the drawn destination is the parent or sibling of i (the
    move fails: a separate kernel handles pure age changes)."""
    tree = state.tree
    p = int(tree.parent[i])
    h = tree.sibling(i)
    if j == p or j == h:
        return None
    return _SprPlan(i, p, h, int(tree.parent[p]), j, to_root=(j == tree.root), from_root=(p == tree.root))


def _spr_time_law(state: SDState, plan: _SprPlan, theta: float):
    tree = state.tree
    if plan.to_root:
        return ShiftedExponentialLaw(theta, float(tree.age[tree.root]))
    lo = float(max(tree.age[plan.i], tree.age[plan.j]))
    return UniformLaw(lo, float(tree.age[tree.parent[plan.j]]))


@dataclass
class _SprStage:
    """Tree already edited; the catastrophe count draw still outstanding."""

    plan: _SprPlan
    t_new: float
    new_tree: Tree
    cats: np.ndarray  # after the detach-side update, acquire side pending
    law: object  # Binomial split (interior) or conditional-prior count (root destination)


def _spr_stage1(state: SDState, plan: _SprPlan, t_new: float) -> _SprStage | None:
    try:
        new_tree = apply_spr(state.tree, plan.i, plan.j, t_new)
    except InvalidEdit:
        return None
    cats = state.cats.copy()
    if not state.params.catastrophes:
        return _SprStage(plan, t_new, new_tree, cats, None)
    if plan.from_root:
        cats[plan.h] = 0  # h becomes the root; its branch and counts vanish
    else:
        cats[plan.h] += cats[plan.p]  # h absorbs p's span
    cats[plan.p] = 0
    if plan.to_root:
        cats[plan.j] = 0  # old root gains a branch; count drawn from the conditional prior
        shadow = SDState(new_tree, state.params, cats, state.constraints)
        law = NegBinomialLaw(*cat_count_conditional(shadow, plan.j))
    else:
        tree = state.tree
        frac = (t_new - tree.age[plan.j]) / (tree.age[tree.parent[plan.j]] - tree.age[plan.j])
        law = BinomialLaw(int(state.cats[plan.j]), float(frac))
    return _SprStage(plan, t_new, new_tree, cats, law)


def _spr_finish(state: SDState, stage: _SprStage, count: int | None, theta: float, wide: bool) -> ProposalOutcome:
    plan, tree = stage.plan, state.tree
    counting = state.params.catastrophes
    out = state.copy()
    out.tree = stage.new_tree
    out.cats = stage.cats
    log_fwd = 0.0
    if counting:
        log_fwd += stage.law.logpmf(int(count))
        out.cats[plan.j] = int(count)
        if not plan.to_root:
            out.cats[plan.p] = int(state.cats[plan.j]) - int(count)

    # forward time density
    log_fwd += _spr_time_law(state, plan, theta).logpdf(stage.t_new)

    # reverse move: prune i again, reattach on branch h at p's old age
    t_p_old = float(tree.age[plan.p])
    if plan.from_root:
        # h is the proposed root, so the reverse reattachment overshoots it
        log_rev = ShiftedExponentialLaw(theta, float(tree.age[plan.h])).logpdf(t_p_old)
        if counting:
            r, pi = cat_count_conditional(state, plan.h)
            log_rev += NegBinomialLaw(r, pi).logpmf(int(state.cats[plan.h]))
    else:
        lo = float(max(tree.age[plan.i], tree.age[plan.h]))
        log_rev = UniformLaw(lo, float(tree.age[plan.q])).logpdf(t_p_old)
        if counting:
            frac_rev = (t_p_old - tree.age[plan.h]) / (tree.age[plan.q] - tree.age[plan.h])
            pool = int(state.cats[plan.h]) + int(state.cats[plan.p])
            log_rev += BinomialLaw(pool, float(frac_rev)).logpmf(int(state.cats[plan.h]))

    if wide:
        log_fwd += -math.log(len(spr_destinations(tree, plan.i)))
        log_rev += -math.log(len(spr_destinations(out.tree, plan.i)))

    info = {"i": plan.i, "j": plan.j, "t_new": stage.t_new}
    if not math.isfinite(log_rev - log_fwd):
        return _failed(state, **info)
    return ProposalOutcome(out, log_rev - log_fwd, False, info)


def move_spr(state: SDState, wide: bool, config: KernelConfig, rng) -> ProposalOutcome:
    """Prune a random subtree and regraft it (narrow: onto its parent's sibling)."""
    tree = state.tree
    nonroot = _nonroot_labels(tree)
    i = nonroot[rng.integers(0, len(nonroot))]
    if wide:
        dests = spr_destinations(tree, i)
        j = dests[rng.integers(0, len(dests))]
        info = {"i": i, "j": j, "dests": dests}
    else:
        p = int(tree.parent[i])
        if tree.parent[p] == 0:
            return _failed(state, i=i)
        j = tree.sibling(p)
        info = {"i": i, "j": j}
    plan = _spr_plan(state, i, j)
    if plan is None:
        return _failed(state, **info)
    t_new = _spr_time_law(state, plan, config.theta).sample(rng)
    stage = _spr_stage1(state, plan, t_new)
    if stage is None:
        return _failed(state, **info)
    count = stage.law.sample(rng) if stage.law is not None else None
    outcome = _spr_finish(state, stage, count, config.theta, wide)
    outcome.info.update(info)
    return outcome


def couple_spr(x: SDState, y: SDState, wide: bool, config: KernelConfig, rng):
    """Coupled SPR: subtree roots, destinations, reattachment times and
    catastrophe counts each drawn from a maximal coupling; once a chain
    fails an intermediate step the other continues marginally."""
    theta = config.theta
    d_i = cp.couple_discrete_uniform(_nonroot_labels(x.tree), _nonroot_labels(y.tree), rng)
    ix, iy = d_i.x, d_i.y

    plan_x = plan_y = None
    info_x, info_y = {"i": ix}, {"i": iy}
    if wide:
        dest_x = spr_destinations(x.tree, ix)
        dest_y = spr_destinations(y.tree, iy)
        d_j = cp.couple_discrete_uniform(dest_x, dest_y, rng)
        info_x.update(j=d_j.x, dests=dest_x)
        info_y.update(j=d_j.y, dests=dest_y)
        plan_x = _spr_plan(x, ix, d_j.x)
        plan_y = _spr_plan(y, iy, d_j.y)
    else:
        px = int(x.tree.parent[ix])
        py = int(y.tree.parent[iy])
        if x.tree.parent[px]:
            jx = x.tree.sibling(px)
            info_x.update(j=jx)
            plan_x = _spr_plan(x, ix, jx)
        if y.tree.parent[py]:
            jy = y.tree.sibling(py)
            info_y.update(j=jy)
            plan_y = _spr_plan(y, iy, jy)

    # reattachment times
    t_x = t_y = None
    if plan_x is not None and plan_y is not None:
        law_x = _spr_time_law(x, plan_x, theta)
        law_y = _spr_time_law(y, plan_y, theta)
        if isinstance(law_x, UniformLaw) and isinstance(law_y, UniformLaw):
            d_t = cp.couple_uniform_interval((law_x.lo, law_x.hi), (law_y.lo, law_y.hi), rng)
        elif isinstance(law_x, ShiftedExponentialLaw) and isinstance(law_y, ShiftedExponentialLaw):
            d_t = cp.couple_trunc_exponential(theta, law_x.shift, law_y.shift, rng)
        else:
            d_t = cp.couple_generic(law_x.sample, law_x.logpdf, law_y.sample, law_y.logpdf, rng)
        t_x, t_y = d_t.x, d_t.y
    elif plan_x is not None:
        t_x = _spr_time_law(x, plan_x, theta).sample(rng)
    elif plan_y is not None:
        t_y = _spr_time_law(y, plan_y, theta).sample(rng)

    stage_x = _spr_stage1(x, plan_x, t_x) if plan_x is not None else None
    stage_y = _spr_stage1(y, plan_y, t_y) if plan_y is not None else None

    # catastrophe count draws: couple when both chains draw the same kind
    # of update, otherwise draw independently
    count_x = count_y = None
    law_x = stage_x.law if stage_x is not None else None
    law_y = stage_y.law if stage_y is not None else None
    if law_x is not None and law_y is not None and type(law_x) is type(law_y):
        d_c = cp.couple_counts(law_x, law_y, rng)
        count_x, count_y = d_c.x, d_c.y
    else:
        if law_x is not None:
            count_x = law_x.sample(rng)
        if law_y is not None:
            count_y = law_y.sample(rng)

    out_x = _spr_finish(x, stage_x, count_x, theta, wide) if stage_x is not None else _failed(x, **info_x)
    out_y = _spr_finish(y, stage_y, count_y, theta, wide) if stage_y is not None else _failed(y, **info_y)
    out_x.info.update(info_x)
    out_y.info.update(info_y)
    return out_x, out_y


# ---------------------------------------------------------------------
# move 5: resample one internal node time
# ---------------------------------------------------------------------


def _eldest_child(tree: Tree, i: int) -> int:
    c1, c2 = tree.children(i)
    return c1 if (tree.age[c1], c1) >= (tree.age[c2], c2) else c2


def _node_time_window(state: SDState, i: int) -> tuple[float, float, int]:
    tree = state.tree
    j = _eldest_child(tree, i)
    if i == tree.root:
        return float((tree.age[i] + tree.age[j]) / 2.0), float(2.0 * tree.age[i] - tree.age[j]), j
    return float(tree.age[j]), float(tree.age[tree.parent[i]]), j


def _node_time_finish(state: SDState, i: int, j: int, t_new: float, counts, rng) -> ProposalOutcome:
    """Shared tail of move 5: apply the age change, redistribute adjacent
    catastrophe counts (drawing them if `counts` is None) and assemble ln h."""
    tree = state.tree
    info = {"i": i, "t_new": t_new}
    is_root = i == tree.root
    c1, c2 = tree.children(i)
    if t_new <= max(tree.age[c1], tree.age[c2]) or (not is_root and t_new >= tree.age[tree.parent[i]]):
        return _failed(state, **info)

    branches = sorted((c1, c2)) if is_root else sorted((i, c1, c2))

    def lengths(age_i):
        out = []
        for b in branches:
            if b == i:
                out.append(float(tree.age[tree.parent[i]]) - age_i)
            else:
                out.append(age_i - float(tree.age[b]))
        return np.asarray(out)

    old_len = lengths(float(tree.age[i]))
    new_len = lengths(t_new)
    total = int(sum(int(state.cats[b]) for b in branches))
    log_h = 0.0
    if is_root:
        log_h += math.log(tree.age[i] - tree.age[j]) - math.log(t_new - tree.age[j])
    if total > 0:
        if counts is None:
            counts = tuple(int(v) for v in rng.multinomial(total, new_len / new_len.sum()))
        log_h += cp.multinomial_logpmf(tuple(int(state.cats[b]) for b in branches), total, old_len / old_len.sum())
        log_h -= cp.multinomial_logpmf(counts, total, new_len / new_len.sum())
    else:
        counts = tuple(0 for _ in branches)
    out = state.copy()
    out.tree = tree.copy()
    out.tree.age[i] = t_new
    for b, c in zip(branches, counts):
        out.cats[b] = int(c)
    return ProposalOutcome(out, log_h, False, info)


def move_node_time(state: SDState, rng) -> ProposalOutcome:
    """Resample one internal age between its eldest child and parent (the
    root slides in an asymmetric window), redistributing the adjacent
    catastrophe counts in proportion to the new branch lengths."""
    tree = state.tree
    internals = list(tree.internal_labels())
    i = internals[rng.integers(0, len(internals))]
    lo, hi, j = _node_time_window(state, i)
    t_new = rng.uniform(lo, hi)
    return _node_time_finish(state, i, j, t_new, None, rng)


def couple_node_time(x: SDState, y: SDState, rng):
    d_i = cp.couple_discrete_uniform(list(x.tree.internal_labels()), list(y.tree.internal_labels()), rng)
    ix, iy = d_i.x, d_i.y
    lo_x, hi_x, jx = _node_time_window(x, ix)
    lo_y, hi_y, jy = _node_time_window(y, iy)
    d_t = cp.couple_uniform_interval((lo_x, hi_x), (lo_y, hi_y), rng)

    # adjacent-count redistribution: maximal multinomial coupling when the
    # totals agree, independent draws otherwise
    def branch_set(state, i):
        c1, c2 = state.tree.children(i)
        return sorted((c1, c2)) if i == state.tree.root else sorted((i, c1, c2))

    bx, by = branch_set(x, ix), branch_set(y, iy)
    tot_x = int(sum(int(x.cats[b]) for b in bx))
    tot_y = int(sum(int(y.cats[b]) for b in by))

    def probs(state, i, branches, t_new):
        tree = state.tree
        out = []
        for b in branches:
            if b == i:
                out.append(float(tree.age[tree.parent[i]]) - t_new)
            else:
                out.append(t_new - float(tree.age[b]))
        arr = np.asarray(out)
        return arr / arr.sum()

    counts_x = counts_y = None
    valid_x = d_t.x > max(x.tree.age[c] for c in bx if c != ix)
    valid_y = d_t.y > max(y.tree.age[c] for c in by if c != iy)
    if tot_x > 0 or tot_y > 0:
        if valid_x and valid_y and len(bx) == len(by):
            d_c = cp.couple_multinomial(tot_x, tot_y, probs(x, ix, bx, d_t.x), probs(y, iy, by, d_t.y), rng)
            counts_x, counts_y = d_c.x, d_c.y
        else:
            if tot_x > 0 and valid_x:
                counts_x = tuple(int(v) for v in rng.multinomial(tot_x, probs(x, ix, bx, d_t.x)))
            if tot_y > 0 and valid_y:
                counts_y = tuple(int(v) for v in rng.multinomial(tot_y, probs(y, iy, by, d_t.y)))
    return (
        _node_time_finish(x, ix, jx, d_t.x, counts_x, rng),
        _node_time_finish(y, iy, jy, d_t.y, counts_y, rng),
    )


# ---------------------------------------------------------------------
# move 6: resample a leaf time within its configured range
# ---------------------------------------------------------------------


def _leaf_time_finish(state: SDState, leaf: int, t_new: float) -> ProposalOutcome:
    tree = state.tree
    info = {"i": leaf, "t_new": t_new}
    if t_new >= tree.age[tree.parent[leaf]]:
        return _failed(state, **info)
    out = state.copy()
    out.tree.age[leaf] = t_new
    return ProposalOutcome(out, 0.0, False, info)


def move_leaf_time(state: SDState, rng) -> ProposalOutcome:
    """Resample a leaf age uniformly on its range, independently of its
    current value; degenerate ranges make the proposal a no-op."""
    tree = state.tree
    leaves = list(tree.leaf_labels())
    leaf = leaves[rng.integers(0, len(leaves))]
    lo, hi = state.params.leaf_age_ranges.get(leaf, (float(tree.age[leaf]), float(tree.age[leaf])))
    t_new = rng.uniform(lo, hi) if hi > lo else float(tree.age[leaf])
    return _leaf_time_finish(state, leaf, t_new)


def couple_leaf_time(x: SDState, y: SDState, rng):
    d_l = cp.couple_discrete_uniform(list(x.tree.leaf_labels()), list(y.tree.leaf_labels()), rng)
    leaf = d_l.x  # identical leaf label sets
    lo, hi = x.params.leaf_age_ranges.get(leaf, (0.0, 0.0))
    if hi > lo:
        d_t = cp.couple_uniform_interval((lo, hi), (lo, hi), rng)  # common draw, always matched
        tx, ty = d_t.x, d_t.y
    else:
        tx, ty = float(x.tree.age[leaf]), float(y.tree.age[leaf])
    return _leaf_time_finish(x, leaf, tx), _leaf_time_finish(y, d_l.y, ty)


# ---------------------------------------------------------------------
# moves 7-9: rescale groups of internal node times
# ---------------------------------------------------------------------

_RESCALE_VARIANTS = ("tree", "subtree", "above-clades")


def _subtree_weights(tree: Tree) -> tuple[list[int], list[int]]:
    internals = list(tree.internal_labels())
    weights = []
    for i in internals:
        weights.append(sum(1 for n in tree.subtree_nodes(i) if tree.is_leaf(n)))
    return internals, weights


def _rescale_targets(state: SDState, variant: str, anchor: int) -> tuple[list[int], float]:
    tree = state.tree
    if variant == "subtree":
        sub = tree.subtree_nodes(anchor)
        targets = [n for n in sub if not tree.is_leaf(n)]
        t0 = min(float(tree.age[n]) for n in sub if tree.is_leaf(n))
        return targets, t0
    t0 = min(float(tree.age[l]) for l in tree.leaf_labels())
    if variant == "tree":
        return list(tree.internal_labels()), t0
    excluded: set[int] = set()
    masks = None
    for c in state.constraints:
        if not c.bounded:
            continue
        if masks is None:
            from .treespace import clades

            masks = clades(tree)
        croot = masks.get(c.mask)
        if croot is not None:
            excluded.update(n for n in tree.subtree_nodes(croot) if not tree.is_leaf(n))
    return [i for i in tree.internal_labels() if i not in excluded], t0


def _rescale_finish(state: SDState, variant: str, anchor: int, targets, t0: float, t_new: float,
                    config: KernelConfig) -> ProposalOutcome:
    tree = state.tree
    t_a = float(tree.age[anchor])
    nu = (t_new - t0) / (t_a - t0)
    info = {"anchor": anchor, "nu": nu, "m": len(targets)}
    if nu <= 0:
        return _failed(state, **info)
    target_set = set(targets)
    new_age = tree.age.copy()
    for n in targets:
        new_age[n] = t0 + nu * (tree.age[n] - t0)
    # ordering against non-rescaled neighbours (leaves, bounded clades, the
    # anchor's parent) can break; ordering inside the rescaled set cannot
    for n in targets:
        for c in tree.children(n):
            if c not in target_set and new_age[n] <= new_age[c]:
                return _failed(state, **info)
    if anchor != tree.root and new_age[anchor] >= new_age[tree.parent[anchor]]:
        return _failed(state, **info)

    out = state.copy()
    out.tree.age[:] = new_age
    exponent = len(targets) - 2 + config.jacobian_exponent_offset
    if variant == "tree" and not state.params.mu_fixed:
        out.params.mu = state.params.mu / nu
        exponent -= 1
    log_h = exponent * math.log(nu)
    return ProposalOutcome(out, log_h, False, info)


def move_rescale_times(state: SDState, variant: str, rng, config: KernelConfig) -> ProposalOutcome:
    """Rescale a group of internal ages about the youngest relevant leaf age
    (move 7 also co-scales a varying death rate by 1/nu)."""
    if variant not in _RESCALE_VARIANTS:
        raise ValueError(f"unknown rescale variant {variant!r}")
    tree = state.tree
    if variant == "subtree":
        internals, weights = _subtree_weights(tree)
        anchor = _weighted_pick(internals, weights, rng)
    else:
        anchor = tree.root
    targets, t0 = _rescale_targets(state, variant, anchor)
    t_a = float(tree.age[anchor])
    t_new = rng.uniform(t0 + (t_a - t0) / 2.0, t0 + 2.0 * (t_a - t0))
    return _rescale_finish(state, variant, anchor, targets, t0, t_new, config)


def couple_rescale_times(x: SDState, y: SDState, variant: str, rng, config: KernelConfig):
    if variant == "subtree":
        ix_items, ix_w = _subtree_weights(x.tree)
        iy_items, iy_w = _subtree_weights(y.tree)
        d_a = cp.couple_discrete(ix_items, ix_w, iy_items, iy_w, rng)
        ax, ay = d_a.x, d_a.y
    else:
        ax, ay = x.tree.root, y.tree.root
    tx, t0x = _rescale_targets(x, variant, ax)
    ty, t0y = _rescale_targets(y, variant, ay)
    tax, tay = float(x.tree.age[ax]), float(y.tree.age[ay])
    d_t = cp.couple_uniform_interval(
        (t0x + (tax - t0x) / 2.0, t0x + 2.0 * (tax - t0x)),
        (t0y + (tay - t0y) / 2.0, t0y + 2.0 * (tay - t0y)),
        rng,
    )
    return (
        _rescale_finish(x, variant, ax, tx, t0x, d_t.x, config),
        _rescale_finish(y, variant, ay, ty, t0y, d_t.y, config),
    )


# ---------------------------------------------------------------------
# moves 10-13: catastrophes
# ---------------------------------------------------------------------


def move_cat_add(state: SDState, rng, log_weight_ratio: float = 0.0) -> ProposalOutcome:
    """Add one catastrophe on a branch picked in proportion to its length;
    paired with deletion through the reversible-jump ratio."""
    if not state.params.catastrophes:
        raise ValueError("catastrophe moves require a model with catastrophes")
    tree = state.tree
    branches = _cat_branches(tree)
    deltas = _deltas(tree, branches)
    i = _weighted_pick(branches, deltas, rng)
    out = state.copy()
    out.cats[i] += 1
    n = state.n_cats
    delta_i = float(tree.branch_length(i))
    log_h = math.log((int(state.cats[i]) + 1) / (n + 1)) - math.log(delta_i / float(deltas.sum()))
    return ProposalOutcome(out, log_h + log_weight_ratio, False, {"i": i})


def move_cat_delete(state: SDState, rng, log_weight_ratio: float = 0.0) -> ProposalOutcome:
    """Remove one catastrophe from a branch picked in proportion to its count."""
    if not state.params.catastrophes:
        raise ValueError("catastrophe moves require a model with catastrophes")
    tree = state.tree
    n = state.n_cats
    if n == 0:
        return _failed(state)
    branches = _cat_branches(tree)
    counts = np.array([int(state.cats[b]) for b in branches], dtype=np.float64)
    i = _weighted_pick(branches, counts, rng)
    out = state.copy()
    out.cats[i] -= 1
    deltas = _deltas(tree, branches)
    delta_i = float(tree.branch_length(i))
    log_h = math.log(delta_i / float(deltas.sum())) - math.log(int(state.cats[i]) / n)
    return ProposalOutcome(out, log_h + log_weight_ratio, False, {"i": i})


def couple_cat_add(x: SDState, y: SDState, rng, log_weight_ratio: float = 0.0):
    if not x.params.catastrophes:
        raise ValueError("catastrophe moves require a model with catastrophes")
    bx, by = _cat_branches(x.tree), _cat_branches(y.tree)
    d = cp.couple_discrete(bx, _deltas(x.tree, bx), by, _deltas(y.tree, by), rng)

    def finish(state, i):
        out = state.copy()
        out.cats[i] += 1
        n = state.n_cats
        deltas = _deltas(state.tree, _cat_branches(state.tree))
        log_h = math.log((int(state.cats[i]) + 1) / (n + 1))
        log_h -= math.log(float(state.tree.branch_length(i)) / float(deltas.sum()))
        return ProposalOutcome(out, log_h + log_weight_ratio, False, {"i": i})

    return finish(x, d.x), finish(y, d.y)


def couple_cat_delete(x: SDState, y: SDState, rng, log_weight_ratio: float = 0.0):
    if not x.params.catastrophes:
        raise ValueError("catastrophe moves require a model with catastrophes")

    def finish(state, i):
        out = state.copy()
        out.cats[i] -= 1
        deltas = _deltas(state.tree, _cat_branches(state.tree))
        log_h = math.log(float(state.tree.branch_length(i)) / float(deltas.sum()))
        log_h -= math.log(int(state.cats[i]) / state.n_cats)
        return ProposalOutcome(out, log_h + log_weight_ratio, False, {"i": i})

    nx, ny = x.n_cats, y.n_cats
    if nx == 0 and ny == 0:
        return _failed(x), _failed(y)
    if nx == 0 or ny == 0:
        active, inactive = (y, x) if nx == 0 else (x, y)
        branches = _cat_branches(active.tree)
        counts = [int(active.cats[b]) for b in branches]
        i = _weighted_pick(branches, counts, rng)
        out_active = finish(active, i)
        return (_failed(x), out_active) if nx == 0 else (out_active, _failed(y))
    bx, by = _cat_branches(x.tree), _cat_branches(y.tree)
    d = cp.couple_discrete(bx, [int(x.cats[b]) for b in bx], by, [int(y.cats[b]) for b in by], rng)
    return finish(x, d.x), finish(y, d.y)


def _cat_move_dests(tree: Tree, i: int) -> list[int]:
    out = set(tree.children(i))
    out.discard(0)
    out.add(tree.sibling(i))
    p = int(tree.parent[i])
    if p != tree.root:
        out.add(p)
    return sorted(out)


def _cat_move_finish(state: SDState, i: int, j: int) -> ProposalOutcome:
    out = state.copy()
    out.cats[i] -= 1
    out.cats[j] += 1
    n = state.n_cats
    log_fwd = math.log(int(state.cats[i]) / n) - math.log(len(_cat_move_dests(state.tree, i)))
    log_rev = math.log((int(state.cats[j]) + 1) / n) - math.log(len(_cat_move_dests(state.tree, j)))
    return ProposalOutcome(out, log_rev - log_fwd, False, {"i": i, "j": j})


def move_cat_move(state: SDState, rng) -> ProposalOutcome:
    """Shift one catastrophe to a neighbouring branch."""
    if not state.params.catastrophes:
        raise ValueError("catastrophe moves require a model with catastrophes")
    n = state.n_cats
    if n == 0:
        return _failed(state)
    tree = state.tree
    branches = _cat_branches(tree)
    i = _weighted_pick(branches, [int(state.cats[b]) for b in branches], rng)
    dests = _cat_move_dests(tree, i)
    j = dests[rng.integers(0, len(dests))]
    return _cat_move_finish(state, i, j)


def couple_cat_move(x: SDState, y: SDState, rng):
    if not x.params.catastrophes:
        raise ValueError("catastrophe moves require a model with catastrophes")
    nx, ny = x.n_cats, y.n_cats
    if nx == 0 and ny == 0:
        return _failed(x), _failed(y)
    if nx == 0 or ny == 0:
        active = y if nx == 0 else x
        out_active = move_cat_move(active, rng)
        return (_failed(x), out_active) if nx == 0 else (out_active, _failed(y))
    bx, by = _cat_branches(x.tree), _cat_branches(y.tree)
    d_i = cp.couple_discrete(bx, [int(x.cats[b]) for b in bx], by, [int(y.cats[b]) for b in by], rng)
    d_j = cp.couple_discrete_uniform(_cat_move_dests(x.tree, d_i.x), _cat_move_dests(y.tree, d_i.y), rng)
    return _cat_move_finish(x, d_i.x, d_j.x), _cat_move_finish(y, d_i.y, d_j.y)


def _cat_resample_finish(state: SDState, i: int, count: int) -> ProposalOutcome:
    law = NegBinomialLaw(*cat_count_conditional(state, i))
    out = state.copy()
    out.cats[i] = int(count)
    log_h = law.logpmf(int(state.cats[i])) - law.logpmf(int(count))
    return ProposalOutcome(out, log_h, False, {"i": i, "count": int(count)})


def move_cat_resample_branch(state: SDState, rng) -> ProposalOutcome:
    """Replace one branch's catastrophe count with a conditional-prior draw;
    the proposal pmf cancels against the prior in the acceptance ratio."""
    if not state.params.catastrophes:
        raise ValueError("catastrophe moves require a model with catastrophes")
    tree = state.tree
    branches = _cat_branches(tree)
    i = _weighted_pick(branches, _deltas(tree, branches), rng)
    count = NegBinomialLaw(*cat_count_conditional(state, i)).sample(rng)
    return _cat_resample_finish(state, i, count)


def couple_cat_resample(x: SDState, y: SDState, rng):
    if not x.params.catastrophes:
        raise ValueError("catastrophe moves require a model with catastrophes")
    bx, by = _cat_branches(x.tree), _cat_branches(y.tree)
    d_i = cp.couple_discrete(bx, _deltas(x.tree, bx), by, _deltas(y.tree, by), rng)
    law_x = NegBinomialLaw(*cat_count_conditional(x, d_i.x))
    law_y = NegBinomialLaw(*cat_count_conditional(y, d_i.y))
    d_c = cp.couple_counts(law_x, law_y, rng)
    return _cat_resample_finish(x, d_i.x, d_c.x), _cat_resample_finish(y, d_i.y, d_c.y)


# ---------------------------------------------------------------------
# moves 15, 17, 18, 19: scalar rescalings
# ---------------------------------------------------------------------


def _scalar_value(state: SDState, target: str) -> float:
    return state.params.mu if target == "mu" else state.params.kappa


def _scalar_finish(state: SDState, target: str, new: float) -> ProposalOutcome:
    cur = _scalar_value(state, target)
    info = {"target": target, "new": new}
    if target == "kappa" and new >= 1.0:
        return _failed(state, **info)
    out = state.copy()
    if target == "mu":
        out.params.mu = new
    else:
        out.params.kappa = new
    return ProposalOutcome(out, -math.log(new / cur), False, info)


def _xi_one_finish(state: SDState, leaf: int, new: float) -> ProposalOutcome:
    cur = float(state.params.xi[leaf])
    info = {"leaf": leaf, "new": new}
    if not 0.0 <= new <= 1.0:
        return _failed(state, **info)
    out = state.copy()
    out.params.xi[leaf] = new
    nu = (1.0 - new) / (1.0 - cur)
    return ProposalOutcome(out, -math.log(nu), False, info)


def move_rescale_scalar(state: SDState, target: str, rng) -> ProposalOutcome:
    """Multiply one scalar by nu ~ Uniform(1/2, 2); the xi variant scales
    the miss probability 1 - xi instead."""
    if target in ("mu", "kappa"):
        cur = _scalar_value(state, target)
        if cur == 0.0:
            return ProposalOutcome(state, 0.0, False, {"target": target, "identity": True})
        nu = rng.uniform(0.5, 2.0)
        return _scalar_finish(state, target, nu * cur)
    if target != "xi_single":
        raise ValueError(f"unknown scalar target {target!r}")
    leaves = list(state.tree.leaf_labels())
    leaf = leaves[rng.integers(0, len(leaves))]
    cur = float(state.params.xi[leaf])
    if cur == 1.0:
        return ProposalOutcome(state, 0.0, False, {"leaf": leaf, "identity": True})
    nu = rng.uniform(0.5, 2.0)
    return _xi_one_finish(state, leaf, 1.0 - nu * (1.0 - cur))


def couple_rescale_scalar(x: SDState, y: SDState, target: str, rng):
    if target in ("mu", "kappa"):
        cx, cy = _scalar_value(x, target), _scalar_value(y, target)
        if cx == 0.0 and cy == 0.0:
            return (
                ProposalOutcome(x, 0.0, False, {"target": target, "identity": True}),
                ProposalOutcome(y, 0.0, False, {"target": target, "identity": True}),
            )
        if cx == 0.0 or cy == 0.0:
            active_state, cur = (y, cy) if cx == 0.0 else (x, cx)
            out_active = _scalar_finish(active_state, target, rng.uniform(0.5, 2.0) * cur)
            idle = ProposalOutcome(x if cx == 0.0 else y, 0.0, False, {"target": target, "identity": True})
            return (idle, out_active) if cx == 0.0 else (out_active, idle)
        d = cp.couple_uniform_interval((cx / 2.0, 2.0 * cx), (cy / 2.0, 2.0 * cy), rng)
        return _scalar_finish(x, target, d.x), _scalar_finish(y, target, d.y)
    if target != "xi_single":
        raise ValueError(f"unknown scalar target {target!r}")
    d_l = cp.couple_discrete_uniform(list(x.tree.leaf_labels()), list(y.tree.leaf_labels()), rng)
    leaf = d_l.x
    yx, yy = 1.0 - float(x.params.xi[leaf]), 1.0 - float(y.params.xi[leaf])
    if yx == 0.0 and yy == 0.0:
        return (
            ProposalOutcome(x, 0.0, False, {"leaf": leaf, "identity": True}),
            ProposalOutcome(y, 0.0, False, {"leaf": leaf, "identity": True}),
        )
    if yx == 0.0 or yy == 0.0:
        active_state, cur = (y, yy) if yx == 0.0 else (x, yx)
        out_active = _xi_one_finish(active_state, leaf, 1.0 - rng.uniform(0.5, 2.0) * cur)
        idle = ProposalOutcome(x if yx == 0.0 else y, 0.0, False, {"leaf": leaf, "identity": True})
        return (idle, out_active) if yx == 0.0 else (out_active, idle)
    d = cp.couple_uniform_interval((1.0 - 2.0 * yx, 1.0 - yx / 2.0), (1.0 - 2.0 * yy, 1.0 - yy / 2.0), rng)
    return _xi_one_finish(x, leaf, d.x), _xi_one_finish(y, leaf, d.y)


def _xi_all_finish(state: SDState, nu: float, config: KernelConfig) -> ProposalOutcome:
    xi = state.params.xi
    L = state.tree.n_leaves
    new = 1.0 - nu * (1.0 - xi[1:])
    info = {"nu": nu}
    if np.any(new < 0.0) or np.any(new > 1.0):
        return _failed(state, **info)
    out = state.copy()
    out.params.xi[1:] = new
    exponent = L - 2 + config.jacobian_exponent_offset
    return ProposalOutcome(out, exponent * math.log(nu), False, info)


def move_rescale_all_missing(state: SDState, rng, config: KernelConfig) -> ProposalOutcome:
    """Scale every miss probability 1 - xi_i by a common nu ~ Uniform(1/2, 2)."""
    return _xi_all_finish(state, rng.uniform(0.5, 2.0), config)


def couple_rescale_all_missing(x: SDState, y: SDState, rng, config: KernelConfig):
    nu = cp.shared_scale(rng)  # no maximal coupling exists here; common random numbers
    return _xi_all_finish(x, nu, config), _xi_all_finish(y, nu, config)


# ---------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------


def propose_marginal(move: MoveId, state: SDState, config: KernelConfig, rng) -> ProposalOutcome:
    if move == MoveId.SWAP_NARROW:
        return move_swap(state, False, rng)
    if move == MoveId.SWAP_WIDE:
        return move_swap(state, True, rng)
    if move == MoveId.SPR_NARROW:
        return move_spr(state, False, config, rng)
    if move == MoveId.SPR_WIDE:
        return move_spr(state, True, config, rng)
    if move == MoveId.NODE_TIME:
        return move_node_time(state, rng)
    if move == MoveId.LEAF_TIME:
        return move_leaf_time(state, rng)
    if move == MoveId.RESCALE_TREE:
        return move_rescale_times(state, "tree", rng, config)
    if move == MoveId.RESCALE_SUBTREE:
        return move_rescale_times(state, "subtree", rng, config)
    if move == MoveId.RESCALE_ABOVE_CLADES:
        return move_rescale_times(state, "above-clades", rng, config)
    if move == MoveId.CAT_ADD:
        return move_cat_add(state, rng, config.log_weight_ratio(MoveId.CAT_DELETE, MoveId.CAT_ADD))
    if move == MoveId.CAT_DELETE:
        return move_cat_delete(state, rng, config.log_weight_ratio(MoveId.CAT_ADD, MoveId.CAT_DELETE))
    if move == MoveId.CAT_MOVE:
        return move_cat_move(state, rng)
    if move == MoveId.CAT_RESAMPLE:
        return move_cat_resample_branch(state, rng)
    if move == MoveId.RESCALE_MU:
        return move_rescale_scalar(state, "mu", rng)
    if move == MoveId.RESCALE_KAPPA:
        return move_rescale_scalar(state, "kappa", rng)
    if move == MoveId.RESCALE_XI_ONE:
        return move_rescale_scalar(state, "xi_single", rng)
    if move == MoveId.RESCALE_XI_ALL:
        return move_rescale_all_missing(state, rng, config)
    raise ValueError(f"unknown move {move}")


def propose_coupled(move: MoveId, x: SDState, y: SDState, config: KernelConfig, rng):
    """Coupled proposal for one shared move id; housekeeping must already
    have aligned the internal labels of x and y."""
    if move == MoveId.SWAP_NARROW:
        return couple_swap(x, y, False, rng)
    if move == MoveId.SWAP_WIDE:
        return couple_swap(x, y, True, rng)
    if move == MoveId.SPR_NARROW:
        return couple_spr(x, y, False, config, rng)
    if move == MoveId.SPR_WIDE:
        return couple_spr(x, y, True, config, rng)
    if move == MoveId.NODE_TIME:
        return couple_node_time(x, y, rng)
    if move == MoveId.LEAF_TIME:
        return couple_leaf_time(x, y, rng)
    if move == MoveId.RESCALE_TREE:
        return couple_rescale_times(x, y, "tree", rng, config)
    if move == MoveId.RESCALE_SUBTREE:
        return couple_rescale_times(x, y, "subtree", rng, config)
    if move == MoveId.RESCALE_ABOVE_CLADES:
        return couple_rescale_times(x, y, "above-clades", rng, config)
    if move == MoveId.CAT_ADD:
        return couple_cat_add(x, y, rng, config.log_weight_ratio(MoveId.CAT_DELETE, MoveId.CAT_ADD))
    if move == MoveId.CAT_DELETE:
        return couple_cat_delete(x, y, rng, config.log_weight_ratio(MoveId.CAT_ADD, MoveId.CAT_DELETE))
    if move == MoveId.CAT_MOVE:
        return couple_cat_move(x, y, rng)
    if move == MoveId.CAT_RESAMPLE:
        return couple_cat_resample(x, y, rng)
    if move == MoveId.RESCALE_MU:
        return couple_rescale_scalar(x, y, "mu", rng)
    if move == MoveId.RESCALE_KAPPA:
        return couple_rescale_scalar(x, y, "kappa", rng)
    if move == MoveId.RESCALE_XI_ONE:
        return couple_rescale_scalar(x, y, "xi_single", rng)
    if move == MoveId.RESCALE_XI_ALL:
        return couple_rescale_all_missing(x, y, rng, config)
    raise ValueError(f"unknown move {move}")


# ---------------------------------------------------------------------
# accept/reject
# ---------------------------------------------------------------------


def mh_accept(state: SDState, lp_cur: float, outcome: ProposalOutcome, u: float, log_post):
    """One chain's accept/reject with a pre-drawn uniform; returns
    (state, log posterior, accepted)."""
    if not math.isfinite(lp_cur):
        raise RuntimeError("log posterior is not finite at the current state")
    if outcome.failed:
        return state, lp_cur, False
    lp_new = log_post(outcome.state)
    if math.log(u) <= outcome.log_hastings + lp_new - lp_cur:
        return outcome.state, lp_new, True
    return state, lp_cur, False


def mh_step(x: SDState, outcome_x: ProposalOutcome, y: SDState, outcome_y: ProposalOutcome, shared_u: float, log_post):
    """Coupled accept/reject: one shared uniform decides both chains, the
    maximal coupling of the two acceptance Bernoullis."""
    new_x, _, acc_x = mh_accept(x, log_post(x), outcome_x, shared_u, log_post)
    new_y, _, acc_y = mh_accept(y, log_post(y), outcome_y, shared_u, log_post)
    return new_x, new_y, acc_x, acc_y
