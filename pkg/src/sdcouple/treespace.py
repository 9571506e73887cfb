"""Rooted, dated, strictly bifurcating trees with integer node labels.

Leaves carry labels ``1..L`` (a fixed bijection with the sorted taxon
names) and internal nodes a permutation of ``L+1..2L-1``.  Arrays are
indexed directly by label, slot 0 is unused.  Ages increase from the
leaves towards the root and the ordering ``t_i < t_parent(i)`` is strict
everywhere, which is what makes the structural edit primitives safe.

Clades are bitmasks over the leaf set (bit ``label-1``), kept as plain
Python integers so that comparing two clades is a single machine-word
sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Validate after every structural edit.  Benchmarks may switch this off.
VALIDATE_EDITS = True


class TreeError(ValueError):
    """Malformed input or broken tree invariant."""


class InvalidEdit(Exception):
    """Structural edit that cannot be applied; callers treat the move as rejected."""


@dataclass(frozen=True)
class CladeConstraint:
    """A leaf subset required to form a subtree, optionally with age bounds on its root."""

    mask: int
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.mask <= 0:
            raise TreeError("clade constraint needs a nonempty leaf subset")
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise TreeError("clade constraint has lo > hi")

    @property
    def bounded(self) -> bool:
        return self.lo is not None or self.hi is not None


class Tree:
    """Array-backed rooted bifurcating tree; see module docstring for layout."""

    __slots__ = ("n_leaves", "parent", "child1", "child2", "age", "root", "names")

    def __init__(self, n_leaves: int, names: tuple[str, ...]):
        if n_leaves < 2:
            raise TreeError("need at least 2 leaves")
        if len(names) != n_leaves:
            raise TreeError("names must match leaf count")
        size = 2 * n_leaves
        self.n_leaves = n_leaves
        self.parent = np.zeros(size, dtype=np.int32)
        self.child1 = np.zeros(size, dtype=np.int32)
        self.child2 = np.zeros(size, dtype=np.int32)
        self.age = np.zeros(size, dtype=np.float64)
        self.root = 0
        self.names = names

    # -- basic queries ------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_leaves - 1

    def is_leaf(self, i: int) -> bool:
        return 1 <= i <= self.n_leaves

    def leaf_labels(self) -> range:
        return range(1, self.n_leaves + 1)

    def internal_labels(self) -> range:
        return range(self.n_leaves + 1, 2 * self.n_leaves)

    def node_labels(self) -> range:
        return range(1, 2 * self.n_leaves)

    def children(self, i: int) -> tuple[int, int]:
        return int(self.child1[i]), int(self.child2[i])

    def sibling(self, i: int) -> int:
        p = self.parent[i]
        if p == 0:
            raise TreeError("root has no sibling")
        c1, c2 = self.child1[p], self.child2[p]
        return int(c2 if c1 == i else c1)

    def branch_length(self, i: int) -> float:
        p = self.parent[i]
        if p == 0:
            raise TreeError("no branch above the root")
        return float(self.age[p] - self.age[i])

    def total_branch_length(self) -> float:
        below = np.arange(1, 2 * self.n_leaves) != self.root
        lab = np.arange(1, 2 * self.n_leaves)[below]
        return float(np.sum(self.age[self.parent[lab]] - self.age[lab]))

    def copy(self) -> "Tree":
        t = Tree.__new__(Tree)
        t.n_leaves = self.n_leaves
        t.parent = self.parent.copy()
        t.child1 = self.child1.copy()
        t.child2 = self.child2.copy()
        t.age = self.age.copy()
        t.root = self.root
        t.names = self.names
        return t

    # -- traversal ----------------------------------------------------

    def post_order(self) -> list[int]:
        """Children before parents, deterministic (child1 branch first)."""
        out: list[int] = []
        stack = [(self.root, False)]
        while stack:
            node, seen = stack.pop()
            if self.is_leaf(node):
                out.append(node)
            elif seen:
                out.append(node)
            else:
                stack.append((node, True))
                stack.append((int(self.child2[node]), False))
                stack.append((int(self.child1[node]), False))
        return out

    def subtree_nodes(self, i: int) -> list[int]:
        out = []
        stack = [i]
        while stack:
            n = stack.pop()
            out.append(n)
            if not self.is_leaf(n):
                stack.append(int(self.child2[n]))
                stack.append(int(self.child1[n]))
        return out

    def leaf_mask_below(self, i: int) -> int:
        m = 0
        for n in self.subtree_nodes(i):
            if self.is_leaf(n):
                m |= 1 << (n - 1)
        return m

    # -- validation ---------------------------------------------------

    def validate(self) -> None:
        L = self.n_leaves
        if not (L + 1 <= self.root <= 2 * L - 1):
            raise TreeError("root must be an internal label")
        if self.parent[self.root] != 0:
            raise TreeError("root has a parent")
        seen = set()
        for node in self.post_order():
            if node in seen:
                raise TreeError(f"node {node} reached twice (cycle)")
            seen.add(node)
            if self.is_leaf(node):
                if self.child1[node] or self.child2[node]:
                    raise TreeError(f"leaf {node} has children")
            else:
                c1, c2 = self.children(node)
                if not c1 or not c2 or c1 == c2:
                    raise TreeError(f"internal node {node} is not bifurcating")
                for c in (c1, c2):
                    if self.parent[c] != node:
                        raise TreeError(f"parent pointer of {c} disagrees with {node}")
                    if not self.age[c] < self.age[node]:
                        raise TreeError(f"age ordering violated at edge {node}->{c}")
        if len(seen) != 2 * L - 1:
            raise TreeError("tree does not span all node labels")

    def satisfies(self, constraints) -> bool:
        if not constraints:
            return True
        masks = clades(self)
        for c in constraints:
            node = masks.get(c.mask)
            if node is None:
                return False
            a = self.age[node]
            if c.lo is not None and a < c.lo:
                return False
            if c.hi is not None and a > c.hi:
                return False
        return True

    # -- mutation helpers (used by edit primitives) ---------------------

    def _replace_child(self, parent: int, old: int, new: int) -> None:
        if self.child1[parent] == old:
            self.child1[parent] = new
        elif self.child2[parent] == old:
            self.child2[parent] = new
        else:
            raise TreeError(f"{old} is not a child of {parent}")
        self.parent[new] = parent

    def _canonicalize_slots(self) -> None:
        """Order child slots by clade bitmask.

        The mask order is intrinsic to (topology, leaf labels), so two
        equal trees traverse identically regardless of edit history or
        internal relabeling; every arithmetic reduction over the tree is
        then bitwise reproducible, which the coupling's exact-equality
        contract relies on.
        """
        masks = [0] * (2 * self.n_leaves)
        for node in self.post_order():
            if self.is_leaf(node):
                masks[node] = 1 << (node - 1)
            else:
                c1, c2 = int(self.child1[node]), int(self.child2[node])
                if masks[c2] < masks[c1]:
                    self.child1[node], self.child2[node] = c2, c1
                masks[node] = masks[c1] | masks[c2]

    def __repr__(self):
        return f"<Tree {self.n_leaves} leaves, root {self.root} @ {self.age[self.root]:g}>"


# ---------------------------------------------------------------------
# Newick I/O
# ---------------------------------------------------------------------


def parse_newick(text: str) -> Tree:
    """Parse a rooted Newick string with branch lengths into a Tree.

    Ages are reconstructed by root-to-leaf accumulation of branch lengths
    and shifted so the youngest leaf sits at age 0.  Non-ultrametric
    inputs are accepted; leaf ages are retained.
    """
    s = text.strip()
    if not s.endswith(";"):
        raise TreeError("newick must end with ';'")
    s = s[:-1]
    pos = 0

    # node records: (name or None, children list, length or None, position)
    records: list[tuple[str | None, list[int], float | None, int]] = []

    def error(msg, at):
        raise TreeError(f"newick parse error at position {at}: {msg}")

    def parse_name(allow_empty):
        nonlocal pos
        start = pos
        while pos < len(s) and s[pos] not in "(),:;":
            pos += 1
        name = s[start:pos].strip()
        if not name and not allow_empty:
            error("expected a name", start)
        return name or None

    def parse_length():
        nonlocal pos
        if pos >= len(s) or s[pos] != ":":
            return None
        pos += 1
        start = pos
        while pos < len(s) and s[pos] not in "(),;":
            pos += 1
        try:
            return float(s[start:pos])
        except ValueError:
            error(f"bad branch length {s[start:pos]!r}", start)

    def parse_subtree():
        nonlocal pos
        at = pos
        if pos < len(s) and s[pos] == "(":
            pos += 1
            kids = [parse_subtree()]
            while pos < len(s) and s[pos] == ",":
                pos += 1
                kids.append(parse_subtree())
            if pos >= len(s) or s[pos] != ")":
                error("unbalanced parenthesis", at)
            pos += 1
            if len(kids) != 2:
                error(f"node of degree {len(kids)}", at)
            parse_name(allow_empty=True)  # internal labels are ignored
            ln = parse_length()
            records.append((None, kids, ln, at))
        else:
            name = parse_name(allow_empty=False)
            ln = parse_length()
            records.append((name, [], ln, at))
        return len(records) - 1

    root_rec = parse_subtree()
    if pos != len(s):
        error(f"trailing characters {s[pos:]!r}", pos)

    leaf_names = [r[0] for r in records if r[0] is not None]
    if len(leaf_names) != len(set(leaf_names)):
        dup = sorted({n for n in leaf_names if leaf_names.count(n) > 1})
        raise TreeError(f"duplicate leaf name {dup[0]!r}")
    if len(leaf_names) < 2:
        raise TreeError("need at least 2 leaves")

    names = tuple(sorted(leaf_names))
    L = len(names)
    label_of_name = {n: i + 1 for i, n in enumerate(names)}

    tree = Tree(L, names)

    # depth-first assignment: leaves take their name labels, internals
    # take L+1.. in post-order of the record list (records is already
    # post-ordered by construction).
    next_internal = L + 1
    label_of_rec: dict[int, int] = {}
    for idx, (name, kids, ln, at) in enumerate(records):
        if name is not None:
            label_of_rec[idx] = label_of_name[name]
        else:
            label_of_rec[idx] = next_internal
            next_internal += 1

    # depths from the root
    depth = {root_rec: 0.0}
    stack = [root_rec]
    while stack:
        idx = stack.pop()
        _, kids, _, _ = records[idx]
        for k in kids:
            _, _, ln, at = records[k]
            if ln is None:
                raise TreeError(f"newick parse error at position {at}: missing branch length")
            if not ln > 0:
                raise TreeError(f"newick parse error at position {at}: branch length must be > 0")
            depth[k] = depth[idx] + ln
            stack.append(k)

    max_leaf_depth = max(depth[i] for i, r in enumerate(records) if r[0] is not None)
    for idx, (name, kids, _, _) in enumerate(records):
        lab = label_of_rec[idx]
        tree.age[lab] = max_leaf_depth - depth[idx]
        for k in kids:
            tree.parent[label_of_rec[k]] = lab
        if kids:
            tree.child1[lab] = label_of_rec[kids[0]]
            tree.child2[lab] = label_of_rec[kids[1]]
    tree.root = label_of_rec[root_rec]
    tree._canonicalize_slots()
    tree.validate()
    return tree


def serialize_newick(tree: Tree) -> str:
    """Newick text with full-precision branch lengths; no internal labels."""

    def emit(i: int) -> str:
        if tree.is_leaf(i):
            body = tree.names[i - 1]
        else:
            body = f"({emit(int(tree.child1[i]))},{emit(int(tree.child2[i]))})"
        p = tree.parent[i]
        if p == 0:
            return body
        return f"{body}:{float(tree.age[p] - tree.age[i])!r}"

    return emit(tree.root) + ";"


# ---------------------------------------------------------------------
# Clades, splits, equality
# ---------------------------------------------------------------------


def clades(tree: Tree) -> dict[int, int]:
    """Map from leaf bitmask to internal node label, one entry per internal node."""
    masks = np.zeros(2 * tree.n_leaves, dtype=object)
    out: dict[int, int] = {}
    for node in tree.post_order():
        if tree.is_leaf(node):
            masks[node] = 1 << (node - 1)
        else:
            m = masks[tree.child1[node]] | masks[tree.child2[node]]
            masks[node] = m
            out[int(m)] = node
    return out


def splits(tree: Tree) -> set[int]:
    """Nontrivial bipartitions of the leaf set, as canonical bitmasks.

    The unrooted view merges the two root edges, so the root's children
    induce one and the same split; the canonical side is the one holding
    leaf label 1.
    """
    full = (1 << tree.n_leaves) - 1
    out: set[int] = set()
    for mask, node in clades(tree).items():
        if node == tree.root:
            continue
        if mask.bit_count() < 2 or (full ^ mask).bit_count() < 2:
            continue
        out.add(mask if mask & 1 else full ^ mask)
    return out


def tree_equal(x: Tree, y: Tree) -> bool:
    """Exact equality of clade sets and node ages; labels are irrelevant."""
    if x.names != y.names:
        raise TreeError("trees do not share a leaf set")
    for lab in x.leaf_labels():
        if x.age[lab] != y.age[lab]:
            return False
    cx, cy = clades(x), clades(y)
    if cx.keys() != cy.keys():
        return False
    return all(x.age[cx[m]] == y.age[cy[m]] for m in cx)


# ---------------------------------------------------------------------
# Housekeeping
# ---------------------------------------------------------------------


def _region_inorder(tree: Tree, entry: int, matched: set[int]) -> list[int]:
    """Unmatched internal nodes below `entry`, stopping at matched subtree
    roots, in in-order traversal order."""
    out: list[int] = []

    def walk(node: int):
        if tree.is_leaf(node) or node in matched:
            return
        walk(int(tree.child1[node]))
        out.append(node)
        walk(int(tree.child2[node]))

    walk(int(tree.child1[entry]))
    walk(int(tree.child2[entry]))
    return out


def housekeeping(x: Tree, y: Tree) -> Tree:
    """Relabel y's internal nodes so clades shared with x carry x's labels.

    Within each maximal shared clade, the remaining internal nodes of y's
    subtree reuse exactly the labels x spends inside its corresponding
    subtree: unmatched y nodes in in-order traversal order receive x's
    spare labels in ascending order.  Topology, ages and leaf labels are
    untouched.
    """
    return housekeeping_with_map(x, y)[0]


def housekeeping_with_map(x: Tree, y: Tree) -> tuple["Tree", dict[int, int]]:
    """housekeeping plus the old-label -> new-label permutation it applied,
    so label-indexed satellite data (catastrophe counts) can follow."""
    if x.names != y.names:
        raise TreeError("trees do not share a leaf set")
    cx, cy = clades(x), clades(y)
    common = sorted(cx.keys() & cy.keys(), key=lambda m: (-m.bit_count(), m))

    relabel: dict[int, int] = {}
    for m in common:
        relabel[cy[m]] = cx[m]

    matched_x = {cx[m] for m in common}
    matched_y = {cy[m] for m in common}
    for m in common:
        y_nodes = _region_inorder(y, cy[m], matched_y)
        x_labels = sorted(_region_inorder(x, cx[m], matched_x))
        if len(y_nodes) != len(x_labels):  # cannot happen: equal clade sizes
            raise TreeError("housekeeping region size mismatch")
        for node, lab in zip(y_nodes, x_labels):
            relabel[node] = lab

    out = Tree.__new__(Tree)
    out.n_leaves = y.n_leaves
    out.names = y.names
    size = 2 * y.n_leaves
    out.parent = np.zeros(size, dtype=np.int32)
    out.child1 = np.zeros(size, dtype=np.int32)
    out.child2 = np.zeros(size, dtype=np.int32)
    out.age = np.zeros(size, dtype=np.float64)

    def new(i: int) -> int:
        return relabel.get(i, i)  # leaves map to themselves

    for i in y.node_labels():
        j = new(i)
        out.age[j] = y.age[i]
        out.parent[j] = new(int(y.parent[i])) if y.parent[i] else 0
        out.child1[j] = new(int(y.child1[i])) if y.child1[i] else 0
        out.child2[j] = new(int(y.child2[i])) if y.child2[i] else 0
    out.root = new(y.root)
    out._canonicalize_slots()
    if VALIDATE_EDITS:
        out.validate()
    return out, relabel


# ---------------------------------------------------------------------
# Random trees
# ---------------------------------------------------------------------


def random_tree(leaf_names, root_age: float, rng) -> Tree:
    """Uniform sequential-coalescent topology rescaled to the given root age."""
    names = tuple(sorted(leaf_names))
    L = len(names)
    if L < 2:
        raise TreeError("need at least 2 leaves")
    if not root_age > 0:
        raise TreeError("root age must be positive")
    tree = Tree(L, names)
    lineages = list(range(1, L + 1))
    t = 0.0
    nxt = L + 1
    while len(lineages) > 1:
        k = len(lineages)
        t += rng.exponential(2.0 / (k * (k - 1)))
        a, b = sorted(rng.choice(k, size=2, replace=False))
        u, v = lineages[a], lineages[b]
        tree.child1[nxt], tree.child2[nxt] = u, v
        tree.parent[u] = tree.parent[v] = nxt
        tree.age[nxt] = t
        lineages[a] = nxt
        del lineages[b]
        nxt += 1
    tree.root = nxt - 1
    scale = root_age / tree.age[tree.root]
    for i in tree.internal_labels():
        tree.age[i] *= scale
    tree._canonicalize_slots()
    tree.validate()
    return tree


# ---------------------------------------------------------------------
# Structural edit primitives
# ---------------------------------------------------------------------


def apply_spr(tree: Tree, i: int, j: int, new_parent_age: float) -> Tree:
    """Detach parent(i) and reattach it on branch j at the given age.

    Returns an edited copy; raises InvalidEdit when the reattachment is
    mechanically impossible.  ``j = sibling(i)`` is mechanically fine (the
    kernel layer, not this primitive, treats it as a failed proposal).
    """
    p = int(tree.parent[i])
    if p == 0:
        raise InvalidEdit("cannot prune the root")
    if j == i or j == p:
        raise InvalidEdit("destination must differ from the pruned subtree and its parent")
    # j must not sit strictly inside the subtree of i
    k = int(tree.parent[j])
    while k:
        if k == i:
            raise InvalidEdit("destination inside the pruned subtree")
        k = int(tree.parent[k])
    if not new_parent_age > tree.age[i]:
        raise InvalidEdit("new parent age must exceed the subtree root age")

    out = tree.copy()
    h = out.sibling(i)
    q = int(out.parent[p])

    # detach p; h bridges to q (or becomes the root)
    if q:
        out._replace_child(q, p, h)
    else:
        out.parent[h] = 0
        out.root = h

    # reattach on branch j (j's parent is evaluated after the detach)
    w = int(out.parent[j])
    if w == 0:
        if not new_parent_age > out.age[j]:
            raise InvalidEdit("new root age must exceed the old root age")
        out.parent[p] = 0
        out.root = p
    else:
        if not (out.age[j] < new_parent_age < out.age[w]):
            raise InvalidEdit("new parent age outside the destination branch")
        out._replace_child(w, j, p)
    if out.child1[p] == i:
        out.child2[p] = j
    else:
        out.child1[p] = j
    out.parent[j] = p
    out.parent[i] = p
    out.age[p] = new_parent_age
    out._canonicalize_slots()
    if VALIDATE_EDITS:
        out.validate()
    return out


def apply_swap(tree: Tree, i: int, j: int) -> Tree:
    """Exchange the parents of nodes i and j (returns an edited copy)."""
    if i == j:
        raise InvalidEdit("need two distinct nodes")
    a, b = int(tree.parent[i]), int(tree.parent[j])
    if a == 0 or b == 0:
        raise InvalidEdit("cannot swap the root")
    if a == j or b == i:
        raise InvalidEdit("cannot swap a node with its own parent")
    if a == b:
        return tree.copy()  # swapping siblings is the identity
    if not (tree.age[i] < tree.age[b] and tree.age[j] < tree.age[a]):
        raise InvalidEdit("age ordering forbids the swap")
    out = tree.copy()
    out._replace_child(a, i, j)
    out._replace_child(b, j, i)
    out._canonicalize_slots()
    if VALIDATE_EDITS:
        out.validate()
    return out
