"""Dated rooted binary trees with per-edge catastrophes and clade constraints."""
from __future__ import annotations

import math
from dataclasses import dataclass, field


class TreeError(Exception):
    pass


class ConstraintError(Exception):
    pass


@dataclass(frozen=True)
class CladeConstraint:
    """A monophyly constraint with optional age windows.

    Root bounds apply to the clade's most recent common ancestor; originate
    bounds apply to the parent of that node.  A single-taxon clade encodes a
    sampling-age window for that leaf.
    """

    name: str
    taxa: frozenset
    rootmin: float | None = None
    rootmax: float | None = None
    originatemin: float | None = None
    originatemax: float | None = None

    def __post_init__(self):
        if not self.taxa:
            raise ConstraintError(f"clade {self.name!r} has no taxa")
        if self.rootmin is not None and self.rootmax is not None and self.rootmin > self.rootmax:
            raise ConstraintError(f"clade {self.name!r}: rootmin > rootmax")
        if (self.originatemin is not None and self.originatemax is not None
                and self.originatemin > self.originatemax):
            raise ConstraintError(f"clade {self.name!r}: originatemin > originatemax")

    def is_leaf_window(self) -> bool:
        return len(self.taxa) == 1

    def without_ages(self) -> "CladeConstraint":
        # Age-ignored clades keep monophyly with a nominal 1-year lower bound.
        return CladeConstraint(self.name, self.taxa, rootmin=1.0)


class ConstraintSet:
    """Clade constraints plus the maximum root age for the uniform-root prior.

    Partially overlapping (non-nested) clades are rejected outright: the
    sampler cannot satisfy both and silently picking one would be worse.
    """

    def __init__(self, clades=(), max_root_age: float | None = None):
        self.clades: list[CladeConstraint] = list(clades)
        self.max_root_age = max_root_age
        for i, a in enumerate(self.clades):
            for b in self.clades[i + 1:]:
                inter = a.taxa & b.taxa
                if inter and not (a.taxa <= b.taxa or b.taxa <= a.taxa):
                    raise ConstraintError(
                        f"clades {a.name!r} and {b.name!r} overlap without nesting")
        if max_root_age is not None:
            for c in self.clades:
                for lo in (c.rootmin, c.originatemin):
                    if lo is not None and lo >= max_root_age:
                        raise ConstraintError(
                            f"max root age {max_root_age} does not exceed the lower "
                            f"bound {lo} of clade {c.name!r}")

    def __iter__(self):
        return iter(self.clades)

    def __len__(self):
        return len(self.clades)

    def leaf_windows(self) -> dict:
        """Sampling-age windows keyed by taxon name, from single-taxon clades."""
        out = {}
        for c in self.clades:
            if c.is_leaf_window():
                (name,) = tuple(c.taxa)
                lo = c.rootmin if c.rootmin is not None else 0.0
                out[name] = (lo, c.rootmax)
        return out

    def upper_bound_max(self) -> float:
        """Largest finite upper bound imposed by any clade (0 if none)."""
        best = 0.0
        for c in self.clades:
            for hi in (c.rootmax, c.originatemax):
                if hi is not None:
                    best = max(best, hi)
        return best


class Tree:
    """Rooted binary dated tree.

    Leaves carry ids 1..L (matching data-matrix row order); internal nodes are
    L+1..2L-1.  Edges are indexed by their child node; the root has no finite
    parent edge.  ``cats[i]`` holds the relative positions in (0,1), measured
    upward from the child node, of the catastrophes on edge i.
    """

    __slots__ = ("parent", "children", "age", "cats", "leaf_names", "root")

    def __init__(self, parent, children, age, leaf_names, root, cats=None):
        self.parent: dict = parent
        self.children: dict = children
        self.age: dict = age
        self.leaf_names: dict = leaf_names
        self.root: int = root
        if cats is None:
            cats = {v: [] for v in parent}
        self.cats: dict = cats

    # -- construction -----------------------------------------------------

    @classmethod
    def from_links(cls, links, ages, leaf_names, cats=None):
        """Build from {child: parent} links; the unique unlinked node is the root."""
        parent = dict(links)
        children: dict = {}
        for c, p in parent.items():
            children.setdefault(p, []).append(c)
        roots = [v for v in ages if v not in parent]
        if len(roots) != 1:
            raise TreeError(f"expected one root, found {roots}")
        for v, ch in children.items():
            if len(ch) != 2:
                raise TreeError(f"node {v} has {len(ch)} children; trees must be binary")
        cat_map = {v: list(cats.get(v, [])) for v in parent} if cats else None
        return cls(parent, {v: list(ch) for v, ch in children.items()},
                   dict(ages), dict(leaf_names), roots[0], cat_map)

    def copy(self) -> "Tree":
        return Tree(dict(self.parent),
                    {v: list(c) for v, c in self.children.items()},
                    dict(self.age),
                    self.leaf_names,
                    self.root,
                    {v: list(p) for v, p in self.cats.items()})

    # -- basic queries -----------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_names)

    def leaves(self):
        return sorted(self.leaf_names)

    def internal_nodes(self):
        return sorted(self.children)

    def is_leaf(self, v) -> bool:
        return v in self.leaf_names

    def edges(self):
        """Finite edges, as the sorted child-node ids."""
        return sorted(self.parent)

    def edge_length(self, v) -> float:
        return self.age[self.parent[v]] - self.age[v]

    def sibling(self, v):
        a, b = self.children[self.parent[v]]
        return b if a == v else a

    def postorder(self):
        """Children before parents, iteratively (trees can be deep)."""
        out, stack = [], [self.root]
        while stack:
            v = stack.pop()
            out.append(v)
            if v in self.children:
                stack.extend(self.children[v])
        out.reverse()
        return out

    def subtree_nodes(self, v):
        out, stack = [], [v]
        while stack:
            u = stack.pop()
            out.append(u)
            if u in self.children:
                stack.extend(self.children[u])
        return out

    def leafset(self, v) -> frozenset:
        return frozenset(u for u in self.subtree_nodes(v) if u in self.leaf_names)

    def leafsets(self) -> dict:
        """Leaf-id set below every node, bottom-up."""
        out = {}
        for v in self.postorder():
            if v in self.leaf_names:
                out[v] = frozenset((v,))
            else:
                a, b = self.children[v]
                out[v] = out[a] | out[b]
        return out

    def name_to_leaf(self) -> dict:
        return {name: v for v, name in self.leaf_names.items()}

    def total_cats(self) -> int:
        return sum(len(p) for p in self.cats.values())

    def ancestors(self, v):
        out = []
        while v != self.root:
            v = self.parent[v]
            out.append(v)
        return out


def mrca(tree: Tree, taxa) -> int:
    """Most recent common ancestor of a non-empty set of node ids (usually leaves)."""
    taxa = set(taxa)
    if not taxa:
        raise TreeError("mrca of an empty taxon set")
    unknown = taxa - set(tree.age)
    if unknown:
        raise TreeError(f"unknown leaf ids {sorted(unknown)}")
    it = iter(taxa)
    path = set()
    v = next(it)
    path.add(v)
    path.update(tree.ancestors(v))
    deepest = None
    for u in it:
        while u not in path:
            u = tree.parent[u]
        # retain the eldest intersection point seen so far
        if deepest is None or tree.age[u] > tree.age[deepest]:
            deepest = u
    if deepest is None:           # singleton
        return next(iter(taxa))
    return deepest


def tree_length(tree: Tree) -> float:
    """Sum of all finite branch lengths."""
    return sum(tree.age[tree.parent[v]] - tree.age[v] for v in tree.parent)


def effective_edge_length(tree: Tree, edge: int, mu: float, kappa: float | None = None) -> float:
    """Edge length with each catastrophe folded in as -log(1-kappa)/mu extra time."""
    raw = tree.edge_length(edge)
    k = len(tree.cats.get(edge, ()))
    if k == 0:
        return raw
    if kappa is None:
        raise TreeError("kappa required for edges carrying catastrophes")
    if kappa >= 1.0:
        return math.inf
    return raw + k * (-math.log1p(-kappa) / mu)


def validate(tree: Tree, constraints: ConstraintSet) -> list:
    """Constraint violations for an accepted state; empty list means valid.

    Checks strict age ordering, monophyly and age windows for every clade,
    the root-age cap, and offset-leaf sampling windows.
    """
    bad = []
    for v in tree.parent:
        if tree.age[tree.parent[v]] <= tree.age[v]:
            bad.append(f"edge into node {v} has non-positive length")
    if not constraints.clades:
        if constraints.max_root_age is not None:
            if tree.age[tree.root] >= constraints.max_root_age:
                bad.append(f"root age {tree.age[tree.root]:g} >= max root age "
                           f"{constraints.max_root_age:g}")
        return bad
    name_to_leaf = tree.name_to_leaf()
    leafsets = tree.leafsets()
    for c in constraints:
        missing = c.taxa - set(name_to_leaf)
        if missing:
            bad.append(f"clade {c.name!r}: taxa {sorted(missing)} not in tree")
            continue
        ids = frozenset(name_to_leaf[t] for t in c.taxa)
        m = mrca(tree, ids)
        if leafsets[m] != ids:
            bad.append(f"clade {c.name!r} is not monophyletic")
            continue
        t_root = tree.age[m]
        if c.rootmin is not None and t_root < c.rootmin:
            bad.append(f"clade {c.name!r} root age {t_root:g} < rootmin {c.rootmin:g}")
        if c.rootmax is not None and t_root > c.rootmax:
            bad.append(f"clade {c.name!r} root age {t_root:g} > rootmax {c.rootmax:g}")
        if c.originatemin is not None or c.originatemax is not None:
            if m == tree.root:
                bad.append(f"clade {c.name!r} covers all taxa; originate bounds unusable")
            else:
                t_or = tree.age[tree.parent[m]]
                if c.originatemin is not None and t_or < c.originatemin:
                    bad.append(f"clade {c.name!r} originate age {t_or:g} < "
                               f"originatemin {c.originatemin:g}")
                if c.originatemax is not None and t_or > c.originatemax:
                    bad.append(f"clade {c.name!r} originate age {t_or:g} > "
                               f"originatemax {c.originatemax:g}")
    if constraints.max_root_age is not None:
        if tree.age[tree.root] >= constraints.max_root_age:
            bad.append(f"root age {tree.age[tree.root]:g} >= max root age "
                       f"{constraints.max_root_age:g}")
    return bad


def random_exponential_tree(L: int, theta: float, rng, names=None) -> Tree:
    """Random dated tree: leaves at age 0, successive coalescences Exp(theta) apart.

    Starting from the L leaf lineages, a uniformly random pair merges after each
    exponential(theta) interval until the root forms.
    """
    if L < 2:
        raise TreeError("need at least two leaves")
    if theta <= 0:
        raise TreeError("theta must be positive")
    if names is None:
        names = [f"taxon_{i}" for i in range(1, L + 1)]
    if len(names) != L:
        raise TreeError("names length must equal L")
    parent, children, age = {}, {}, {}
    lineages = list(range(1, L + 1))
    for v in lineages:
        age[v] = 0.0
    t = 0.0
    nxt = L + 1
    while len(lineages) > 1:
        t += rng.exponential(1.0 / theta)
        i = int(rng.integers(len(lineages)))
        a = lineages.pop(i)
        j = int(rng.integers(len(lineages)))
        b = lineages.pop(j)
        parent[a] = nxt
        parent[b] = nxt
        children[nxt] = [a, b]
        age[nxt] = t
        lineages.append(nxt)
        nxt += 1
    leaf_names = {i + 1: n for i, n in enumerate(names)}
    return Tree(parent, children, age, leaf_names, lineages[0])


def leaf_sampling_ages(names, constraints: ConstraintSet, rng) -> dict:
    """Draw each taxon's sampling age: 0 unless an offset window applies."""
    windows = constraints.leaf_windows()
    ages = {}
    for n in names:
        if n in windows:
            lo, hi = windows[n]
            if hi is None:
                hi = lo  # unbounded-above window: start at the lower edge
            ages[n] = lo if hi <= lo else float(rng.uniform(lo, hi))
        else:
            ages[n] = 0.0
    return ages


def constrained_initial_tree(names, theta, constraints: ConstraintSet, rng,
                             max_tries: int = 200, burnin=None) -> Tree:
    """A random tree satisfying all constraints.

    Clade subtrees are assembled bottom-up with ages drawn inside their
    feasible windows; remaining lineages are joined by the exponential
    process.  A caller-supplied ``burnin`` hook (tree, rng) -> tree can run a
    short prior-targeting chain afterwards.
    """
    last_err = None
    for _ in range(max_tries):
        try:
            tree = _heuristic_tree(names, theta, constraints, rng)
        except _BuildFailure as err:
            last_err = err
            continue
        if not validate(tree, constraints):
            if burnin is not None:
                tree = burnin(tree, rng)
            return tree
    raise ConstraintError(
        f"could not build a tree satisfying the constraints after {max_tries} "
        f"attempts{': ' + str(last_err) if last_err else ''}")


class _BuildFailure(Exception):
    pass


def _heuristic_tree(names, theta, constraints, rng) -> Tree:
    L = len(names)
    if L < 2:
        raise TreeError("need at least two leaves")
    leaf_ages = leaf_sampling_ages(names, constraints, rng)
    parent, children, age = {}, {}, {}
    leaf_names = {i + 1: n for i, n in enumerate(names)}
    for v, n in leaf_names.items():
        age[v] = leaf_ages[n]
    nxt = L + 1
    T = constraints.max_root_age

    # Lineage bookkeeping: top node, covered taxa, pending originate window for
    # the next join above this lineage.
    lineages = [{"top": v, "taxa": frozenset((leaf_names[v],)), "window": None}
                for v in sorted(leaf_names)]
    for c in constraints:
        if c.is_leaf_window():
            if c.originatemin is not None or c.originatemax is not None:
                for ln in lineages:
                    if ln["taxa"] == c.taxa:
                        ln["window"] = (c.originatemin, c.originatemax)

    multi = sorted((c for c in constraints if len(c.taxa) > 1), key=lambda c: len(c.taxa))

    def join(a, b, t):
        nonlocal nxt
        v = nxt
        nxt += 1
        parent[a["top"]] = v
        parent[b["top"]] = v
        children[v] = [a["top"], b["top"]]
        age[v] = t
        merged = {"top": v, "taxa": a["taxa"] | b["taxa"], "window": None}
        lineages.remove(a)
        lineages.remove(b)
        lineages.append(merged)
        return merged

    def join_age(a, b, lo_extra=None, hi_extra=None):
        lo = max(age[a["top"]], age[b["top"]])
        hi = None
        for ln in (a, b):
            if ln["window"] is not None:
                wlo, whi = ln["window"]
                if wlo is not None:
                    lo = max(lo, wlo)
                if whi is not None:
                    hi = whi if hi is None else min(hi, whi)
        if lo_extra is not None:
            lo = max(lo, lo_extra)
        if hi_extra is not None:
            hi = hi_extra if hi is None else min(hi, hi_extra)
        if hi is None:
            hi = lo + rng.exponential(1.0 / theta)
            if T is not None:
                hi = min(hi, 0.5 * (lo + T))
        if hi <= lo:
            raise _BuildFailure(f"empty join window [{lo:g}, {hi:g}]")
        return float(rng.uniform(lo, hi))

    # Assemble each constrained clade, smallest first (nesting guaranteed at
    # ConstraintSet construction).
    for c in multi:
        members = [ln for ln in lineages if ln["taxa"] <= c.taxa]
        covered = frozenset().union(*(ln["taxa"] for ln in members))
        if covered != c.taxa:
            raise _BuildFailure(f"clade {c.name!r} straddles built lineages")
        while len(members) > 2:
            i = int(rng.integers(len(members)))
            a = members.pop(i)
            j = int(rng.integers(len(members)))
            b = members.pop(j)
            hi_cap = c.rootmax if c.rootmax is not None else T
            merged = join(a, b, join_age(a, b, hi_extra=hi_cap))
            members.append(merged)
        if len(members) == 2:
            a, b = members
            top = join(a, b, join_age(a, b, lo_extra=c.rootmin, hi_extra=c.rootmax))
        else:
            (top,) = members
            t_top = age[top["top"]]
            if c.rootmin is not None and t_top < c.rootmin:
                raise _BuildFailure(f"clade {c.name!r} root too young")
            if c.rootmax is not None and t_top > c.rootmax:
                raise _BuildFailure(f"clade {c.name!r} root too old")
        top["window"] = (c.originatemin, c.originatemax)

    while len(lineages) > 1:
        # Prefer lineages whose pending window is closing lowest.
        order = sorted(range(len(lineages)),
                       key=lambda i: (math.inf if lineages[i]["window"] is None
                                      or lineages[i]["window"][1] is None
                                      else lineages[i]["window"][1]))
        a = lineages[order[0]]
        others = [ln for ln in lineages if ln is not a]
        b = others[int(rng.integers(len(others)))]
        join(a, b, join_age(a, b, hi_extra=T))

    root = lineages[0]["top"]
    if T is not None and age[root] >= T:
        raise _BuildFailure("root age exceeded the maximum")
    return Tree(parent, children, age, leaf_names, root)


def restrict_to_taxa(tree: Tree, names) -> Tree:
    """Prune the tree down to the given taxa, merging unary nodes.

    Catastrophes on merged edges are combined with their relative positions
    rescaled; surviving leaves are re-numbered 1..L in the order of ``names``.
    """
    keep = set(names)
    have = set(tree.leaf_names.values())
    if not keep <= have:
        raise TreeError(f"tree lacks taxa {sorted(keep - have)}")
    name_to_leaf = tree.name_to_leaf()
    keep_ids = {name_to_leaf[n] for n in keep}
    if len(keep_ids) < 2:
        raise TreeError("need at least two taxa after restriction")

    # Absolute catastrophe ages survive the surgery; positions are re-derived.
    events = {v: [tree.age[v] + q * tree.edge_length(v) for q in tree.cats[v]]
              for v in tree.parent}
    live = {}
    for v in tree.postorder():
        if v in tree.leaf_names:
            live[v] = v in keep_ids
        else:
            live[v] = any(live[c] for c in tree.children[v])

    def collapse(v):
        """Return (node id in source tree, catastrophe ages on its stem)."""
        if v in tree.leaf_names:
            return v, list(events.get(v, ()))
        kids = [c for c in tree.children[v] if live[c]]
        if len(kids) == 2:
            return v, list(events.get(v, ()))
        sub, ev = collapse(kids[0])
        return sub, ev + list(events.get(v, ()))

    new_root, _ = collapse(tree.root)
    order = sorted(keep_ids, key=lambda v: names.index(tree.leaf_names[v]) if isinstance(names, list) else v)
    relabel = {}
    for i, v in enumerate(order):
        relabel[v] = i + 1
    nxt = len(order) + 1

    parent, children, age, cats, leaf_names = {}, {}, {}, {}, {}

    def build(v, ev):
        nonlocal nxt
        if v in tree.leaf_names:
            nid = relabel[v]
            leaf_names[nid] = tree.leaf_names[v]
        else:
            nid = nxt
            nxt += 1
        age[nid] = tree.age[v]
        if v in tree.children:
            kids = [c for c in tree.children[v] if live[c]]
            ids = []
            for c in kids:
                sub, sub_ev = collapse(c)
                cid = build(sub, sub_ev)
                parent[cid] = nid
                ids.append(cid)
            children[nid] = ids
        cats[nid] = ev
        return nid

    rid = build(new_root, [])
    cats.pop(rid, None)
    out = Tree(parent, children, age, leaf_names, rid,
               {v: [] for v in parent})
    # Shift so the youngest kept leaf sits at age 0.
    base = min(out.age[v] for v in out.leaf_names)
    if base != 0.0:
        for v in out.age:
            out.age[v] -= base
    for v, ev in cats.items():
        if v in out.parent:
            ln = out.edge_length(v)
            out.cats[v] = sorted((e - base - out.age[v]) / ln for e in ev)
    return out
