"""Tree representation, Newick I/O, clades, housekeeping and edit primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdcouple.rng import RandomStream
from sdcouple.treespace import (
    InvalidEdit,
    TreeError,
    apply_spr,
    apply_swap,
    clades,
    housekeeping,
    parse_newick,
    random_tree,
    serialize_newick,
    splits,
    tree_equal,
)


def fig4_pair():
    """Two 4-leaf trees one SPR apart sharing exactly the {3,4} clade and the
    root; drives the housekeeping and coupled-SPR examples."""
    x = parse_newick("(1:3,(2:2,(3:1,4:1):1):1);")
    y = parse_newick("((1:1.5,2:1.5):1.5,(3:1,4:1):2);")
    return x, y


class TestParseNewick:
    def test_three_leaf_ages(self):
        t = parse_newick("((A:1,B:1):1,C:2);")
        assert t.age[t.root] == pytest.approx(2.0)
        internal = [i for i in t.internal_labels() if i != t.root]
        assert t.age[internal[0]] == pytest.approx(1.0)
        assert all(t.age[leaf] == 0.0 for leaf in t.leaf_labels())

    def test_roundtrip_identity(self):
        for text in ("((A:1,B:1):1,C:2);", "(A:5,B:5);", "((A:1,B:2):1,(C:0.5,D:3):2);"):
            t = parse_newick(text)
            again = parse_newick(serialize_newick(t))
            assert tree_equal(t, again)

    def test_degree_three_rejected(self):
        with pytest.raises(TreeError, match="degree 3"):
            parse_newick("((A:1,B:1,C:1):1,D:2);")

    def test_duplicate_leaf(self):
        with pytest.raises(TreeError, match="duplicate"):
            parse_newick("((A:1,A:1):1,C:2);")

    def test_malformed_position(self):
        with pytest.raises(TreeError, match="position"):
            parse_newick("((A:1,B:x):1,C:2);")

    def test_nonpositive_length(self):
        with pytest.raises(TreeError):
            parse_newick("((A:1,B:0):1,C:2);")

    def test_single_leaf_rejected(self):
        with pytest.raises(TreeError):
            parse_newick("A:1;")


class TestSerializeNewick:
    def test_two_leaf(self):
        t = parse_newick("(A:5,B:5);")
        assert serialize_newick(t) == "(A:5.0,B:5.0);"

    def test_fixed_point_exact_on_representable_ages(self):
        t = parse_newick("((A:1,B:1):1,(C:0.5,D:2.5):0.5);")
        assert tree_equal(parse_newick(serialize_newick(t)), t)

    def test_fixed_point_random_tree(self):
        # branch lengths are age differences, so reparsing reconstructs ages
        # only to rounding error; clades are exact
        t = random_tree([f"s{i}" for i in range(6)], 10.0, RandomStream(3))
        u = parse_newick(serialize_newick(t))
        cu, ct = clades(u), clades(t)
        assert cu.keys() == ct.keys()
        for mask in ct:
            assert u.age[cu[mask]] == pytest.approx(t.age[ct[mask]], rel=1e-12)

    def test_noncontemporaneous_leaves(self):
        # leaf A at age 0, leaf B at age 1: terminal branch lengths differ
        t = parse_newick("((A:2,B:1):1,C:3);")
        assert t.age[1] == 0.0  # A deepest
        assert t.age[2] == pytest.approx(1.0)
        text = serialize_newick(t)
        assert "A:2.0" in text and "B:1.0" in text


class TestClades:
    def test_two_leaf(self):
        t = parse_newick("(A:5,B:5);")
        assert clades(t) == {0b11: t.root}

    def test_fig4_x(self):
        x, _ = fig4_pair()
        masks = set(clades(x))
        assert 0b1100 in masks  # {3,4}
        assert 0b1111 in masks
        assert masks == {0b1100, 0b1110, 0b1111}

    def test_caterpillar_nested(self):
        t = parse_newick("(((A:1,B:1):1,C:2):1,D:3);")
        masks = set(clades(t))
        assert masks == {0b0011, 0b0111, 0b1111}


class TestHousekeeping:
    def test_self_is_identity(self):
        _, y = fig4_pair()
        hk = housekeeping(y, y)
        assert np.array_equal(hk.parent, y.parent)
        assert np.array_equal(hk.child1, y.child1)
        assert hk.root == y.root

    def test_fig4_matches_common_clades(self):
        x, y = fig4_pair()
        hk = housekeeping(x, y)
        cx, chk = clades(x), clades(hk)
        assert chk[0b1100] == cx[0b1100]  # shared {3,4} clade
        assert hk.root == x.root
        # remaining internal label drawn from x's leftover pool
        assert sorted(chk.values()) == sorted(cx.values())

    def test_disjoint_structure_forces_only_root(self):
        x = parse_newick("((A:1,B:1):2,(C:1,D:1):2);")
        y = parse_newick("((A:1,C:1):2,(B:1,D:1):2);")
        hk = housekeeping(x, y)
        assert hk.root == x.root
        assert set(clades(hk).values()) == set(clades(x).values())

    def test_topology_and_ages_untouched(self):
        x, y = fig4_pair()
        hk = housekeeping(x, y)
        assert tree_equal(hk, y)

    def test_mismatched_leaves_rejected(self):
        x = parse_newick("(A:1,B:1);")
        y = parse_newick("(A:1,C:1);")
        with pytest.raises(TreeError):
            housekeeping(x, y)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_idempotent_on_random_pairs(self, seed):
        rng = RandomStream(seed, 11)
        names = [f"s{i}" for i in range(6)]
        x = random_tree(names, 10.0, rng)
        y = random_tree(names, 8.0, rng)
        once = housekeeping(x, y)
        twice = housekeeping(x, once)
        assert np.array_equal(once.parent, twice.parent)
        assert np.array_equal(once.child1, twice.child1)
        assert np.array_equal(once.child2, twice.child2)
        assert once.root == twice.root
        # common clades share labels with x
        cx, c1 = clades(x), clades(once)
        for mask in cx.keys() & c1.keys():
            assert cx[mask] == c1[mask]

    def test_common_clades_share_labels_exactly(self):
        x, y = fig4_pair()
        hk = housekeeping(x, y)
        cx, chk = clades(x), clades(hk)
        common = cx.keys() & chk.keys()
        assert common == {0b1100, 0b1111}  # the shared clade and the root
        for mask in common:
            assert cx[mask] == chk[mask]

    def test_equal_after_housekeeping_iff_same_clades_and_ages(self):
        x, y = fig4_pair()
        hk = housekeeping(x, y)
        assert not tree_equal(x, hk)  # clades differ
        z = housekeeping(x, x.copy())
        assert tree_equal(x, z)


class TestSplits:
    def test_balanced_four(self):
        t = parse_newick("((A:1,B:1):1,(C:1,D:1):1);")
        assert splits(t) == {0b0011}

    def test_three_leaf_empty(self):
        assert splits(parse_newick("((A:1,B:1):1,C:2);")) == set()

    def test_caterpillar_five(self):
        t = parse_newick("((((A:1,B:1):1,C:2):1,D:3):1,E:4);")
        assert splits(t) == {0b00011, 0b00111}

    def test_relabel_invariance(self):
        x, y = fig4_pair()
        assert splits(y) == splits(housekeeping(x, y))


class TestRandomTree:
    def test_two_leaves(self):
        t = random_tree(["A", "B"], 7.5, RandomStream(1))
        assert t.age[t.root] == pytest.approx(7.5)
        assert set(clades(t)) == {0b11}

    def test_three_leaf_topologies_uniform(self):
        from scipy.stats import chisquare

        from .util import three_leaf_shape

        rng = RandomStream(42, 5)
        counts = {(1, 2): 0, (1, 3): 0, (2, 3): 0}
        for _ in range(10_000):
            t = random_tree(["a", "b", "c"], 1.0, rng)
            counts[three_leaf_shape(t)] += 1
        res = chisquare(list(counts.values()))
        assert res.pvalue > 0.001

    def test_ages_strictly_decreasing(self):
        rng = RandomStream(9)
        for _ in range(50):
            t = random_tree([f"x{i}" for i in range(7)], 100.0, rng)
            for node in t.node_labels():
                p = int(t.parent[node])
                if p:
                    assert t.age[node] < t.age[p]


class TestTreeEqual:
    def test_reflexive(self):
        t = random_tree(list("abcde"), 4.0, RandomStream(2))
        assert tree_equal(t, t.copy())

    def test_tiny_age_perturbation_differs(self):
        t = random_tree(list("abcde"), 4.0, RandomStream(2))
        u = t.copy()
        u.age[u.root] += 1e-12
        assert not tree_equal(t, u)

    def test_fig4_pair_differs(self):
        x, y = fig4_pair()
        assert not tree_equal(x, y)


class TestEditPrimitives:
    def test_spr_onto_sibling_moves_age_only(self):
        x, _ = fig4_pair()
        i = 3
        sib = x.sibling(i)
        p = int(x.parent[i])
        lo = max(x.age[i], x.age[sib])
        t_new = (lo + x.age[x.parent[p]]) / 2.0
        out = apply_spr(x, i, sib, t_new)
        assert set(clades(out)) == set(clades(x))
        assert out.age[p] == pytest.approx(t_new)

    def test_spr_reattachment_scenario(self):
        # prune leaf 1's parent and reattach along the branch into leaf 4
        x, _ = fig4_pair()
        out = apply_spr(x, 1, 4, 0.5)
        masks = set(clades(out))
        assert 0b1001 in masks  # {1, 4} now a cherry
        assert out.age[int(out.parent[1])] == pytest.approx(0.5)
        out.validate()

    def test_spr_rejects_destination_inside_subtree(self):
        x, _ = fig4_pair()
        top = clades(x)[0b1110]
        with pytest.raises(InvalidEdit):
            apply_spr(x, top, 3, 5.0)

    def test_spr_rejects_bad_age(self):
        x, _ = fig4_pair()
        with pytest.raises(InvalidEdit):
            apply_spr(x, 1, 4, x.age[int(x.parent[4])] + 1.0)

    def test_swap_with_sibling_is_identity(self):
        x, _ = fig4_pair()
        out = apply_swap(x, 3, 4)
        assert tree_equal(out, x)

    def test_swap_exchanges_parents(self):
        x, _ = fig4_pair()
        out = apply_swap(x, 2, 3)
        masks = set(clades(out))
        assert 0b1010 in masks or 0b0110 in masks  # 2 joined 3's old cherry
        out.validate()

    def test_swap_rejects_parent_child(self):
        x, _ = fig4_pair()
        p = int(x.parent[1])
        with pytest.raises(InvalidEdit):
            apply_swap(x, 1, p)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_sprs_preserve_invariants(self, seed):
        rng = RandomStream(seed, 77)
        t = random_tree([f"s{i}" for i in range(6)], 10.0, rng)
        for _ in range(10):
            nonroot = [i for i in t.node_labels() if i != t.root]
            i = nonroot[rng.integers(0, len(nonroot))]
            dests = [
                j
                for j in t.node_labels()
                if j != i and j not in (int(t.parent[i]), t.sibling(i))
                and (j == t.root or t.age[t.parent[j]] > t.age[i])
            ]
            if not dests:
                continue
            j = dests[rng.integers(0, len(dests))]
            if j == t.root:
                t_new = t.age[t.root] + rng.exponential(1.0)
            else:
                lo = max(t.age[i], t.age[j])
                t_new = rng.uniform(lo, t.age[t.parent[j]])
            try:
                t = apply_spr(t, i, j, t_new)
            except InvalidEdit:
                continue
            t.validate()  # explicit: every edit keeps all invariants
