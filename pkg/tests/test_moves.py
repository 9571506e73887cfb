"""Proposal kernel: per-move behaviour, Hastings algebra, coupled contracts."""

import math

import numpy as np
import pytest
from scipy import stats

from sdcouple import moves as mv
from sdcouple import sdmodel as sd
from sdcouple.chains import state_signature, states_equal
from sdcouple.rng import RandomStream
from sdcouple.treespace import clades, housekeeping, parse_newick

from .util import sample_prior_tree

ALPHA = 1e-3


def make_state(newick, mu=0.5, kappa=0.2, rho_prior=(1.5, 5.0), cats=None, xi=None, **kw):
    tree = parse_newick(newick)
    params = sd.SDParams(
        mu=mu,
        kappa=kappa,
        xi=sd.uniform_xi(tree.n_leaves) if xi is None else xi,
        rho_prior=rho_prior,
        **kw,
    )
    st = sd.initial_state(tree, params)
    for k, v in (cats or {}).items():
        st.cats[k] = v
    return st


def fig4_states():
    x = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
    y = make_state("((1:1.5,2:1.5):1.5,(3:1,4:1):2);")
    y.tree = housekeeping(x.tree, y.tree)
    return x, y


def default_kernel(**kw):
    return mv.KernelConfig(weights=mv.default_weights(**kw))


class TestKernelConfig:
    def test_weights_normalized_and_sorted(self):
        cfg = mv.KernelConfig(weights={mv.MoveId.NODE_TIME: 3.0, mv.MoveId.SWAP_NARROW: 1.0})
        assert list(cfg.weights) == [mv.MoveId.SWAP_NARROW, mv.MoveId.NODE_TIME]
        assert sum(cfg.weights.values()) == pytest.approx(1.0)

    def test_unpaired_add_delete_rejected(self):
        with pytest.raises(ValueError, match="pair"):
            mv.KernelConfig(weights={mv.MoveId.CAT_ADD: 1.0, mv.MoveId.NODE_TIME: 1.0})

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            mv.KernelConfig(weights={mv.MoveId.NODE_TIME: -1.0})


class TestPickMove:
    def test_single_move(self):
        cfg = mv.KernelConfig(weights={mv.MoveId.NODE_TIME: 1.0})
        rng = RandomStream(0)
        assert all(mv.pick_move(cfg, rng) == mv.MoveId.NODE_TIME for _ in range(100))

    def test_frequencies_match_weights(self):
        cfg = mv.KernelConfig(
            weights={mv.MoveId.SWAP_NARROW: 1.0, mv.MoveId.NODE_TIME: 2.0, mv.MoveId.CAT_ADD: 1.0, mv.MoveId.CAT_DELETE: 4.0}
        )
        rng = RandomStream(1)
        draws = [mv.pick_move(cfg, rng) for _ in range(10_000)]
        counts = [sum(d == m for d in draws) for m in cfg.weights]
        expect = [10_000 * w for w in cfg.weights.values()]
        assert stats.chisquare(counts, expect).pvalue > ALPHA

    def test_shared_in_coupled_mode(self):
        # one draw consumed: both chains see the same id by construction
        cfg = default_kernel()
        a = [mv.pick_move(cfg, RandomStream(3, k)) for k in range(50)]
        b = [mv.pick_move(cfg, RandomStream(3, k)) for k in range(50)]
        assert a == b


class TestSwap:
    def test_involution(self):
        st = make_state("((1:1,2:1):2,(3:2,4:2):1);")
        out = mv._swap_finish(st, 1, 3, {})
        assert not out.failed
        back = mv._swap_finish(out.state, 1, 3, {})
        assert states_equal(back.state, st)
        assert out.log_hastings == 0.0

    def test_narrow_three_leaf_candidates(self):
        st = make_state("((A:1,B:1):1,C:2);")
        cands = mv._narrow_swap_candidates(st.tree)
        assert cands == [1, 2]  # only the cherry leaves have a non-root parent
        for i in cands:
            assert st.tree.sibling(int(st.tree.parent[i])) == 3

    def test_age_violation_fails(self):
        # C is older than the cherry's root, so the narrow swap cannot apply
        st = make_state("((A:1,B:1):2,C:0.5);")
        out = mv._swap_finish(st, 1, 3, {})
        assert out.failed and out.state is st


class TestSprPlanning:
    def test_destination_sets_fig5(self):
        x, y = fig4_states()
        assert mv.spr_destinations(x.tree, 1) == [2, 3, 4, 5, 6, 7]
        assert mv.spr_destinations(y.tree, 1) == [2, 3, 4, 5, 6, 7]

    def test_parent_and_sibling_fail(self):
        x, _ = fig4_states()
        p = int(x.tree.parent[1])
        sib = x.tree.sibling(1)
        assert mv._spr_plan(x, 1, p) is None
        assert mv._spr_plan(x, 1, sib) is None

    def test_fig5_destination_five_gives_identical_topologies(self):
        x, y = fig4_states()
        out_x = couple_spr_forced(x, 1, 5, t_frac=0.5)
        out_y = couple_spr_forced(y, 1, 5, t_frac=0.5)
        assert not out_x.failed and not out_y.failed
        assert set(clades(out_x.state.tree)) == set(clades(out_y.state.tree))


def couple_spr_forced(state, i, j, t_frac=0.5, count=None, theta=0.01):
    """Drive the SPR machinery with explicit choices (no randomness)."""
    plan = mv._spr_plan(state, i, j)
    assert plan is not None
    law = mv._spr_time_law(state, plan, theta)
    if plan.to_root:
        t_new = law.shift + t_frac
    else:
        t_new = law.lo + t_frac * (law.hi - law.lo)
    stage = mv._spr_stage1(state, plan, t_new)
    assert stage is not None
    if count is None:
        count = stage.law.sample(RandomStream(123, i, j))
    return mv._spr_finish(state, stage, count, theta, wide=True)


class TestSprHastingsRoundtrip:
    """For any proposal, h(X', X) = 1/h(X, X'): rebuilding the exact reverse
    move must negate log_hastings and restore the state bit for bit."""

    THETA = 0.01

    def roundtrip(self, state, i, j, t_frac, count=None):
        plan = mv._spr_plan(state, i, j)
        assert plan is not None
        out = couple_spr_forced(state, i, j, t_frac=t_frac, count=count, theta=self.THETA)
        assert not out.failed
        t_p_old = float(state.tree.age[plan.p])
        rev_plan = mv._spr_plan(out.state, i, plan.h)
        assert rev_plan is not None
        rev_stage = mv._spr_stage1(out.state, rev_plan, t_p_old)
        rev_out = mv._spr_finish(out.state, rev_stage, int(state.cats[plan.h]), self.THETA, wide=True)
        assert not rev_out.failed
        assert states_equal(rev_out.state, state)
        assert rev_out.log_hastings == pytest.approx(-out.log_hastings, rel=1e-10)

    def test_interior_to_interior(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);", cats={1: 2, 3: 1, 5: 1})
        self.roundtrip(st, 3, 2, t_frac=0.4)

    def test_reattach_above_root(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);", cats={1: 1, 2: 2})
        self.roundtrip(st, 2, st.tree.root, t_frac=0.7)

    def test_prune_the_root(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);", cats={2: 1, 4: 2})
        # i = 1 hangs off the root; destination interior
        self.roundtrip(st, 1, 4, t_frac=0.3)

    def test_many_random_roundtrips(self):
        rng = RandomStream(55)
        g = np.random.default_rng(5)
        for rep in range(40):
            tree = sample_prior_tree([f"t{k}" for k in range(5)], 10.0, g)
            st = sd.initial_state(tree, sd.SDParams(mu=0.7, kappa=0.3, xi=sd.uniform_xi(5), rho_prior=(1.5, 4.0)))
            for b in mv._cat_branches(tree):
                st.cats[b] = int(g.integers(0, 3))
            nonroot = mv._nonroot_labels(tree)
            i = nonroot[rng.integers(0, len(nonroot))]
            dests = [j for j in mv.spr_destinations(tree, i) if mv._spr_plan(st, i, j) is not None]
            if not dests:
                continue
            j = dests[rng.integers(0, len(dests))]
            self.roundtrip(st, i, j, t_frac=float(rng.uniform(0.05, 0.95)))


class TestNodeTime:
    def test_support_non_root(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        node = clades(st.tree)[0b1100]
        rng = RandomStream(5)
        for _ in range(300):
            out = mv._node_time_finish(st, node, mv._eldest_child(st.tree, node), rng.uniform(*mv._node_time_window(st, node)[:2]), None, rng)
            if out.failed:
                continue
            t = out.state.tree.age[node]
            assert max(st.tree.age[3], st.tree.age[4]) < t < st.tree.age[int(st.tree.parent[node])]

    def test_root_window_length(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        lo, hi, j = mv._node_time_window(st, st.tree.root)
        t_r = st.tree.age[st.tree.root]
        assert hi - lo == pytest.approx(1.5 * (t_r - st.tree.age[j]))

    def test_zero_adjacent_counts_untouched(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        rng = RandomStream(6)
        out = mv.move_node_time(st, rng)
        assert not out.failed
        assert np.array_equal(out.state.cats, st.cats)

    def test_hastings_roundtrip_root(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);", cats={2: 1, 6: 2})
        i = st.tree.root
        lo, hi, j = mv._node_time_window(st, i)
        t_new = 0.5 * (lo + hi)
        rng = RandomStream(7)
        out = mv._node_time_finish(st, i, j, t_new, None, rng)
        assert not out.failed
        j_rev = mv._eldest_child(out.state.tree, i)
        branches = sorted(st.tree.children(i))
        old_counts = tuple(int(st.cats[b]) for b in branches)
        back = mv._node_time_finish(out.state, i, j_rev, float(st.tree.age[i]), old_counts, rng)
        assert states_equal(back.state, st)
        assert back.log_hastings == pytest.approx(-out.log_hastings, rel=1e-10)

    def test_hastings_roundtrip_internal(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);", cats={3: 2, 4: 1, 6: 1})
        i = clades(st.tree)[0b1100]
        lo, hi, j = mv._node_time_window(st, i)
        rng = RandomStream(8)
        out = mv._node_time_finish(st, i, j, 0.25 * lo + 0.75 * hi, None, rng)
        branches = sorted((i, *st.tree.children(i)))
        old_counts = tuple(int(st.cats[b]) for b in branches)
        back = mv._node_time_finish(out.state, i, mv._eldest_child(out.state.tree, i), float(st.tree.age[i]), old_counts, rng)
        assert states_equal(back.state, st)
        assert back.log_hastings == pytest.approx(-out.log_hastings, rel=1e-10)


class TestLeafTime:
    def test_degenerate_range_noop(self):
        st = make_state("((A:1,B:1):1,C:2);")
        rng = RandomStream(9)
        out = mv.move_leaf_time(st, rng)
        assert not out.failed
        assert states_equal(out.state, st)
        assert out.log_hastings == 0.0

    def test_above_parent_fails(self):
        st = make_state("((A:1,B:1):1,C:2);")
        st.params.leaf_age_ranges[1] = (0.0, 5.0)
        out = mv._leaf_time_finish(st, 1, 4.0)
        assert out.failed

    def test_coupled_always_matched(self):
        x = make_state("((A:1,B:1):1,C:2);")
        y = make_state("((A:1,C:1):1,B:2);")
        y.tree = housekeeping(x.tree, y.tree)
        for s in (x, y):
            s.params.leaf_age_ranges[2] = (0.0, 0.4)
        for k in range(100):
            ox, oy = mv.couple_leaf_time(x, y, RandomStream(10, k))
            assert ox.info["i"] == oy.info["i"]
            assert ox.state.tree.age[ox.info["i"]] == oy.state.tree.age[oy.info["i"]]


class TestRescaleTimes:
    def test_nu_one_is_identity(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        targets, t0 = mv._rescale_targets(st, "tree", st.tree.root)
        out = mv._rescale_finish(st, "tree", st.tree.root, targets, t0, float(st.tree.age[st.tree.root]), default_kernel())
        assert not out.failed
        assert out.log_hastings == 0.0
        assert states_equal(out.state, st)

    def test_two_internal_nodes_zero_jacobian(self):
        st = make_state("((A:1,B:1):1,C:2);")  # 3 leaves -> m = 2 internal nodes
        rng = RandomStream(11)
        for _ in range(50):
            out = mv.move_rescale_times(st, "tree", rng, default_kernel())
            if not out.failed:
                assert out.log_hastings == 0.0

    def test_mu_coscaled_when_varying(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);", mu_fixed=False)
        rng = RandomStream(12)
        out = mv.move_rescale_times(st, "tree", rng, default_kernel())
        assert not out.failed
        nu = out.info["nu"]
        assert out.state.params.mu == pytest.approx(st.params.mu / nu)
        # m - 3 exponent: 3 internal nodes -> 0
        assert out.log_hastings == pytest.approx(0.0)

    def test_exponent_offset_hook(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        cfg = mv.KernelConfig(weights={mv.MoveId.RESCALE_TREE: 1.0}, jacobian_exponent_offset=1)
        rng = RandomStream(13)
        out = mv.move_rescale_times(st, "tree", rng, cfg)
        assert not out.failed
        assert out.log_hastings == pytest.approx((3 - 2 + 1) * math.log(out.info["nu"]))

    def test_subtree_scales_only_subtree(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        anchor = clades(st.tree)[0b1100]
        targets, t0 = mv._rescale_targets(st, "subtree", anchor)
        assert targets == [anchor]
        out = mv._rescale_finish(st, "subtree", anchor, targets, t0, 0.8, default_kernel())
        assert not out.failed
        assert out.state.tree.age[anchor] == pytest.approx(0.8)
        assert out.state.tree.age[st.tree.root] == st.tree.age[st.tree.root]

    def test_above_clades_excludes_bounded_subtree(self):
        from sdcouple.treespace import CladeConstraint

        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        st.constraints = (CladeConstraint(0b1100, lo=0.5, hi=1.5),)
        bounded_root = clades(st.tree)[0b1100]
        targets, _ = mv._rescale_targets(st, "above-clades", st.tree.root)
        assert bounded_root not in targets
        assert st.tree.root in targets


class TestCatMoves:
    def test_delete_on_empty_fails(self):
        st = make_state("((A:1,B:1):1,C:2);")
        out = mv.move_cat_delete(st, RandomStream(14))
        assert out.failed

    def test_add_branch_frequencies(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        rng = RandomStream(15)
        branches = mv._cat_branches(st.tree)
        deltas = mv._deltas(st.tree, branches)
        counts = {b: 0 for b in branches}
        n = 10_000
        for _ in range(n):
            out = mv.move_cat_add(st, rng)
            counts[out.info["i"]] += 1
        expect = n * deltas / deltas.sum()
        assert stats.chisquare([counts[b] for b in branches], expect).pvalue > ALPHA

    def test_add_then_delete_identity(self):
        st = make_state("((A:1,B:1):1,C:2);")
        rng = RandomStream(16)
        out = mv.move_cat_add(st, rng)
        assert not out.failed
        while True:
            back = mv.move_cat_delete(out.state, rng)
            if not back.failed:
                break
        assert states_equal(back.state, st)
        assert back.log_hastings == pytest.approx(-out.log_hastings)

    def test_move_conserves_total_and_two_leaf_destination(self):
        st = make_state("(A:5,B:5);", cats={1: 2})
        out = mv.move_cat_move(st, RandomStream(17))
        assert not out.failed
        assert out.info["i"] == 1 and out.info["j"] == 2  # the sibling branch is forced
        assert out.state.n_cats == st.n_cats

    def test_move_on_empty_fails(self):
        st = make_state("(A:5,B:5);")
        assert mv.move_cat_move(st, RandomStream(18)).failed

    def test_move_hastings_roundtrip(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);", cats={2: 1, 6: 1})
        out = mv._cat_move_finish(st, 2, 6)
        back = mv._cat_move_finish(out.state, 6, 2)
        assert states_equal(back.state, st)
        assert back.log_hastings == pytest.approx(-out.log_hastings)

    def test_resample_same_count_is_identity(self):
        st = make_state("((A:1,B:1):1,C:2);", cats={1: 2})
        out = mv._cat_resample_finish(st, 1, 2)
        assert out.log_hastings == 0.0
        assert states_equal(out.state, st)

    def test_resample_branch_frequencies(self):
        st = make_state("(1:3,(2:2,(3:1,4:1):1):1);")
        rng = RandomStream(19)
        branches = mv._cat_branches(st.tree)
        deltas = mv._deltas(st.tree, branches)
        counts = {b: 0 for b in branches}
        n = 10_000
        for _ in range(n):
            out = mv.move_cat_resample_branch(st, rng)
            counts[out.info["i"]] += 1
        assert stats.chisquare([counts[b] for b in branches], n * deltas / deltas.sum()).pvalue > ALPHA

    def test_coupled_delete_match_probability(self):
        # counts-only branch-sum formula on a fixed four-branch configuration
        x = make_state("((A:1,B:1):1,C:2);", cats={1: 2, 2: 1, 3: 1})
        y = make_state("((A:1,B:1):1,C:2);", cats={1: 1, 2: 2, 4: 1})
        expect = sum(min(int(x.cats[b]) / 4, int(y.cats[b]) / 4) for b in mv._cat_branches(x.tree))
        rng = RandomStream(20)
        hits = 0
        n = 10_000
        for _ in range(n):
            ox, oy = mv.couple_cat_delete(x, y, rng)
            hits += ox.info["i"] == oy.info["i"]
        assert expect == pytest.approx(0.5)
        assert abs(hits / n - expect) < 3 * math.sqrt(expect * (1 - expect) / n)


class TestScalarMoves:
    def test_nu_one_identity(self):
        st = make_state("((A:1,B:1):1,C:2);", mu=0.7)
        out = mv._scalar_finish(st, "mu", 0.7)
        assert out.log_hastings == 0.0
        assert states_equal(out.state, st)

    def test_xi_out_of_range_fails(self):
        st = make_state("((A:1,B:1):1,C:2);")
        st.params.xi[1] = 0.2
        out = mv._xi_one_finish(st, 1, 1.0 - 2.0 * 0.8)
        assert out.failed

    def test_kappa_at_least_one_fails(self):
        st = make_state("((A:1,B:1):1,C:2);", kappa=0.6)
        out = mv._scalar_finish(st, "kappa", 1.2)
        assert out.failed

    @pytest.mark.parametrize(
        "mu_x,mu_y",
        [(1.0, 1.5), (1.0, 3.9), (1.0, 5.0), (2.0, 2.0)],
    )
    def test_coupled_mu_match_probability(self, mu_x, mu_y):
        lo, hi = min(mu_x, mu_y), max(mu_x, mu_y)
        expect = 0.0 if 2 * lo < hi / 2 else (2.0 / 3.0) * (2 * lo - hi / 2) / hi
        x = make_state("((A:1,B:1):1,C:2);", mu=mu_x, mu_fixed=False)
        y = make_state("((A:1,B:1):1,C:2);", mu=mu_y, mu_fixed=False)
        rng = RandomStream(21)
        n = 10_000
        hits = 0
        for _ in range(n):
            ox, oy = mv.couple_rescale_scalar(x, y, "mu", rng)
            hits += ox.state.params.mu == oy.state.params.mu
        sigma = math.sqrt(max(expect * (1 - expect), 1e-9) / n)
        assert abs(hits / n - expect) < 4 * sigma + 1e-9

    def test_xi_all_nu_one_identity(self):
        st = make_state("((A:1,B:1):1,C:2);", xi=np.array([0.0, 0.9, 0.8, 0.7]))
        out = mv._xi_all_finish(st, 1.0, default_kernel())
        assert out.log_hastings == 0.0
        assert states_equal(out.state, st)

    def test_xi_one_is_fixed_point_of_map(self):
        st = make_state("((A:1,B:1):1,C:2);", xi=np.array([0.0, 1.0, 0.8, 0.7]))
        rng = RandomStream(22)
        for _ in range(50):
            out = mv.move_rescale_all_missing(st, rng, default_kernel())
            if not out.failed:
                assert out.state.params.xi[1] == 1.0


class TestMhStep:
    @staticmethod
    def flat_log_post(_state):
        return 0.0

    def make_outcome(self, state, log_h):
        return mv.ProposalOutcome(state.copy(), log_h, False)

    def test_high_ratio_both_accept(self):
        st = make_state("((A:1,B:1):1,C:2);")
        ox = self.make_outcome(st, 5.0)
        oy = self.make_outcome(st, 5.0)
        nx, ny, ax, ay = mv.mh_step(st, ox, st, oy, 0.999, self.flat_log_post)
        assert ax and ay

    def test_identical_everything_identical_decision(self):
        st = make_state("((A:1,B:1):1,C:2);")
        for k in range(50):
            u = RandomStream(23, k).uniform()
            ox = self.make_outcome(st, -0.7)
            oy = self.make_outcome(st, -0.7)
            _, _, ax, ay = mv.mh_step(st, ox, st, oy, u, self.flat_log_post)
            assert ax == ay

    def test_agree_accept_probability(self):
        st = make_state("((A:1,B:1):1,C:2);")
        rng = RandomStream(24)
        n = 10_000
        both = 0
        for _ in range(n):
            u = rng.uniform()
            _, _, ax, ay = mv.mh_step(
                st, self.make_outcome(st, math.log(0.3)), st, self.make_outcome(st, math.log(0.5)), u, self.flat_log_post
            )
            both += ax and ay
        assert abs(both / n - 0.3) < 4 * math.sqrt(0.3 * 0.7 / n)

    def test_failed_auto_rejects(self):
        st = make_state("((A:1,B:1):1,C:2);")
        bad = mv.ProposalOutcome(st, -math.inf, True)
        _, _, ax, _ = mv.mh_step(st, bad, st, bad, 0.0001, self.flat_log_post)
        assert not ax

    def test_nonfinite_current_posterior_raises(self):
        st = make_state("((A:1,B:1):1,C:2);")
        with pytest.raises(RuntimeError):
            mv.mh_accept(st, -math.inf, mv.ProposalOutcome(st, 0.0, False), 0.5, self.flat_log_post)


class TestIdenticalStatesIdenticalProposals:
    def test_every_move(self):
        st = make_state(
            "(1:3,(2:2,(3:1,4:1):1):1);",
            cats={1: 1, 6: 2},
            xi=np.array([0.0, 0.9, 0.8, 0.7, 0.95]),
            mu_fixed=False,
            kappa_fixed=False,
        )
        st.params.leaf_age_ranges[1] = (0.0, 0.5)
        cfg = mv.KernelConfig(weights=mv.default_weights(cats=True, mu_varying=True, kappa_varying=True,
                                                         xi_varying=True, leaf_ranges=True, multi_scaling=True))
        for move in cfg.weights:
            for k in range(30):
                rng = RandomStream(31, int(move), k)
                ox, oy = mv.propose_coupled(move, st, st.copy(), cfg, rng)
                assert ox.failed == oy.failed, move
                assert state_signature(ox.state) == state_signature(oy.state), move
                if not ox.failed:
                    assert ox.log_hastings == oy.log_hastings, move


class TestEq4MatchRates:
    def test_destination_agreement_over_random_pairs(self):
        g = np.random.default_rng(77)
        for rep in range(3):
            tx = sample_prior_tree([f"t{k}" for k in range(5)], 10.0, g)
            ty = sample_prior_tree([f"t{k}" for k in range(5)], 10.0, g)
            x = sd.initial_state(tx, sd.SDParams(mu=1.0, xi=sd.uniform_xi(5)))
            y = sd.initial_state(ty, sd.SDParams(mu=1.0, xi=sd.uniform_xi(5)))
            y.tree = housekeeping(x.tree, y.tree)
            rng = RandomStream(40, rep)
            for i in mv._nonroot_labels(x.tree):
                jx = mv.spr_destinations(x.tree, i)
                jy = mv.spr_destinations(y.tree, i)
                expect = len(set(jx) & set(jy)) / max(len(jx), len(jy))
                n = 2000
                hits = sum(
                    cp.matched for cp in (mv.cp.couple_discrete_uniform(jx, jy, rng) for _ in range(n))
                )
                sigma = math.sqrt(max(expect * (1 - expect), 1e-9) / n)
                assert abs(hits / n - expect) < 4.5 * sigma + 1e-9


class TestMarginalFaithfulness:
    """The x-marginal of a coupled proposal is the marginal move."""

    def test_spr_wide_summaries(self):
        x, y = fig4_states()
        cfg = default_kernel()
        rng_c, rng_m = RandomStream(41), RandomStream(42)
        n = 8000
        coup_t, coup_j, marg_t, marg_j = [], [], [], []
        for _ in range(n):
            ox, _ = mv.couple_spr(x, y.copy(), True, cfg, rng_c)
            om = mv.move_spr(x, True, cfg, rng_m)
            if not ox.failed:
                coup_t.append(ox.info["t_new"])
                coup_j.append(ox.info["j"])
            if not om.failed:
                marg_t.append(om.info["t_new"])
                marg_j.append(om.info["j"])
        assert stats.ks_2samp(coup_t, marg_t).pvalue > ALPHA
        cats_c = np.bincount(coup_j, minlength=8)[1:]
        cats_m = np.bincount(marg_j, minlength=8)[1:]
        keep = (cats_c + cats_m) > 0
        assert stats.chi2_contingency(np.vstack([cats_c[keep], cats_m[keep]])).pvalue > ALPHA

    def test_node_time_summaries(self):
        x, y = fig4_states()
        x.cats[3] = 2
        rng_c, rng_m = RandomStream(43), RandomStream(44)
        n = 8000
        coup, marg = [], []
        for _ in range(n):
            ox, _ = mv.couple_node_time(x, y.copy(), rng_c)
            om = mv.move_node_time(x, rng_m)
            if not ox.failed:
                coup.append(ox.info["t_new"])
            if not om.failed:
                marg.append(om.info["t_new"])
        assert stats.ks_2samp(coup, marg).pvalue > ALPHA

    def test_scalar_mu_marginal(self):
        x = make_state("((A:1,B:1):1,C:2);", mu=1.0, mu_fixed=False)
        y = make_state("((A:1,B:1):1,C:2);", mu=1.7, mu_fixed=False)
        rng_c, rng_m = RandomStream(45), RandomStream(46)
        n = 8000
        coup = [mv.couple_rescale_scalar(x, y, "mu", rng_c)[0].state.params.mu for _ in range(n)]
        marg = [mv.move_rescale_scalar(x, "mu", rng_m).state.params.mu for _ in range(n)]
        assert stats.ks_2samp(coup, marg).pvalue > ALPHA


class TestReversibilityFlow:
    def test_swap_flow_balance_three_leaves(self):
        # prior-only chain driven by wide swaps alone: transition flows
        # between the three labeled topologies must balance
        st = make_state("((A:1,B:1):1,C:2);", root_age_bound=5.0)
        cfg = mv.KernelConfig(weights={mv.MoveId.SWAP_WIDE: 0.5, mv.MoveId.NODE_TIME: 0.5})
        rng = RandomStream(47)
        from sdcouple.chains import advance_marginal

        from .util import three_leaf_shape

        flows: dict[tuple, int] = {}
        prev = three_leaf_shape(st.tree)
        state = st

        def hook(it, s, lp):
            nonlocal prev
            cur = three_leaf_shape(s.tree)
            if cur != prev:
                flows[(prev, cur)] = flows.get((prev, cur), 0) + 1
            prev = cur

        advance_marginal(state, cfg, rng, 40_000, None, hook=hook)
        for a, b in [((1, 2), (1, 3)), ((1, 2), (2, 3)), ((1, 3), (2, 3))]:
            fab = flows.get((a, b), 0)
            fba = flows.get((b, a), 0)
            assert fab + fba > 50
            assert abs(fab - fba) < 4 * math.sqrt(fab + fba)
