"""Metropolis-Hastings sampler over dated trees, catastrophes and scalar rates."""
from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import likelihood as lk
from . import priors
from .nexus import (OutputSet, ParsedNexus, TraceRecord, parse_nexus,
                    read_trace, read_tree_samples)
from .parfile import RunConfig, write_par
from .trees import (ConstraintSet, Tree, constrained_initial_tree,
                    restrict_to_taxa, tree_length, validate)

MOVE_IDS = (1, 2, 3, 4, 5, 6, 7, 8, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21)

# Multiplier half-widths; whole-tree rescalings use a slightly gentler default
# (still wide: timid rescalings make the near-zero-age region very sticky).
DEFAULT_SCALE = math.log(2.0)
DEFAULT_TREE_SCALE = 0.5


class RunError(Exception):
    pass


@dataclass
class Model:
    """The target density and move configuration for one run."""

    table: lk.PatternTable
    constraints: ConstraintSet
    tree_prior: str = "uniform_root"
    topology_uniform: bool = False
    vary_topology: bool = True
    vary_mu: bool = True
    catastrophes: bool = False
    vary_kappa: bool = True
    rho_marginalized: bool = True
    rho_fixed: float | None = None
    model_missing: bool = False
    d: int = 1
    coupled: bool = False
    move_weights: dict = field(default_factory=dict)
    move_scales: dict = field(default_factory=dict)
    leaf_windows: dict = field(default_factory=dict)   # leaf id -> (lo, hi|None)
    _emissions: dict = field(default_factory=dict, repr=False)
    _schedule: dict = field(default_factory=dict, repr=False)

    @property
    def max_root_age(self):
        return self.constraints.max_root_age

    def scale(self, move_id: int) -> float:
        default = DEFAULT_TREE_SCALE if move_id in (6, 7, 12) else DEFAULT_SCALE
        return self.move_scales.get(move_id, default)

    def bound_ceiling(self) -> float:
        return self.constraints.upper_bound_max()

    def leaf_emissions(self, xi: np.ndarray):
        key = xi.tobytes()
        hit = self._emissions.get(key)
        if hit is None:
            hit = lk._leaf_log_emissions(self.table.patterns, xi)
            if len(self._emissions) > 64:
                self._emissions.clear()
            self._emissions[key] = hit
        return hit


@dataclass
class ChainState:
    tree: Tree
    mu: float
    kappa: float | None
    xi: np.ndarray
    beta: float | None = None
    log_post: float = math.nan
    log_lik: float = math.nan
    log_prior: float = math.nan

    def params(self, model: Model) -> lk.LikelihoodParams:
        return lk.LikelihoodParams(mu=self.mu, xi=self.xi, kappa=self.kappa, d=model.d)

    def canonical_tree(self):
        """Id-free tree summary: (leaf set, age, stem catastrophe count) rows.

        Internal node ids can end up permuted between two chains whose trees
        are otherwise identical; every observable (trace rows, Newick output)
        is id-free, so meeting is declared on this canonical form.
        """
        tree = self.tree
        sets = tree.leafsets()
        rows = [(tuple(sorted(sets[v])), tree.age[v],
                 len(tree.cats[v]) if v in tree.parent else -1)
                for v in tree.age]
        rows.sort()
        return rows

    def equal_components(self, other: "ChainState") -> bool:
        """Exact match of canonical topology, ages, counts and scalars
        (catastrophe positions excluded: they carry no posterior mass without
        lateral transfer)."""
        if (self.mu != other.mu or self.kappa != other.kappa
                or not np.array_equal(self.xi, other.xi)):
            return False
        return self.canonical_tree() == other.canonical_tree()


def _clone(state: ChainState, tree=None, **kw) -> ChainState:
    return ChainState(tree=tree if tree is not None else state.tree,
                      mu=kw.get("mu", state.mu),
                      kappa=kw.get("kappa", state.kappa),
                      xi=kw.get("xi", state.xi),
                      beta=kw.get("beta", state.beta))


def evaluate(state: ChainState, model: Model) -> ChainState:
    """Fill the cached log posterior (and components) of a state."""
    if validate(state.tree, model.constraints):
        state.log_post = -math.inf
        state.log_lik = math.nan
        state.log_prior = -math.inf
        return state
    if model.tree_prior == "uniform_root":
        lp = priors.log_tree_prior_uniform_root(state.tree, model.constraints,
                                                model.topology_uniform)
    else:
        lp = priors.log_tree_prior_exponential(state.tree)
    lp += priors.log_param_priors(state.mu, state.kappa, state.xi,
                                  vary_mu=model.vary_mu,
                                  vary_kappa=model.catastrophes and model.vary_kappa,
                                  vary_xi=model.model_missing)
    if model.catastrophes:
        lp += priors.log_catastrophe_count_prior(
            state.tree, marginalized=model.rho_marginalized, rho=model.rho_fixed)
    if lp == -math.inf:
        state.log_post, state.log_lik, state.log_prior = -math.inf, math.nan, lp
        return state
    if model.table.n_total:
        ll = lk.log_integrated_likelihood(model.table, state.tree,
                                          state.params(model),
                                          model.leaf_emissions(state.xi))
    else:
        ll = 0.0
    state.log_prior = lp
    state.log_lik = ll
    state.log_post = lp + ll
    return state


# -- proposal kernels -------------------------------------------------------
#
# Moves are generators yielding draw requests:
#   ("uniform", lo, hi) | ("choice", items) | ("negbin", r, q) | ("poisson", lam)
# and returning (candidate, log_hastings) or None for an unworkable pick.
# The single-chain driver feeds rng draws; the coupled driver feeds maximal
# couplings of the two chains' requests.


def _move_internal_age(state, model):
    tree = state.tree
    v = yield ("choice", tuple(tree.internal_nodes()))
    lo = max(tree.age[c] for c in tree.children[v])
    if v == tree.root:
        if model.max_root_age is not None:
            if model.max_root_age <= lo:
                return None
            t = yield ("uniform", lo, model.max_root_age)
            loghr = 0.0
        else:
            # No finite cap: multiply the gap above the children instead.
            gap, logm = yield from _log_scale_draw(tree.age[v] - lo,
                                                   model.scale(1))
            t = lo + gap
            loghr = logm
    else:
        t = yield ("uniform", lo, tree.age[tree.parent[v]])
        loghr = 0.0
    nt = tree.copy()
    nt.age[v] = t
    return _clone(state, nt), loghr


def _move_leaf_age(state, model):
    tree = state.tree
    ids = tuple(sorted(model.leaf_windows))
    if not ids:
        return None
    j = yield ("choice", ids)
    lo, hi = model.leaf_windows[j]
    cap = tree.age[tree.parent[j]]
    hi = cap if hi is None else min(hi, cap)
    if hi <= lo:
        return None
    t = yield ("uniform", lo, hi)
    nt = tree.copy()
    nt.age[j] = t
    return _clone(state, nt), 0.0


def _in_subtree(tree, node, top):
    while node != tree.root:
        if node == top:
            return True
        node = tree.parent[node]
    return node == top


def _move_exchange_narrow(state, model):
    tree = state.tree
    elig = tuple(v for v in sorted(tree.age)
                 if v != tree.root and tree.parent[v] != tree.root)
    if not elig:
        return None
    v = yield ("choice", elig)
    w = tree.parent[v]
    g = tree.parent[w]
    u = tree.sibling(w)
    if tree.age[w] <= tree.age[u]:
        return None
    nt = tree.copy()
    nt.children[w][nt.children[w].index(v)] = u
    nt.children[g][nt.children[g].index(u)] = v
    nt.parent[v] = g
    nt.parent[u] = w
    return _clone(state, nt), 0.0


def _move_exchange_wide(state, model):
    tree = state.tree
    ids = tuple(v for v in sorted(tree.age) if v != tree.root)
    a = yield ("choice", ids)
    b = yield ("choice", tuple(v for v in ids if v != a))
    pa, pb = tree.parent[a], tree.parent[b]
    if pa == pb:
        return None
    if _in_subtree(tree, pb, a) or _in_subtree(tree, pa, b):
        return None
    if tree.age[pa] <= tree.age[b] or tree.age[pb] <= tree.age[a]:
        return None
    nt = tree.copy()
    nt.children[pa][nt.children[pa].index(a)] = b
    nt.children[pb][nt.children[pb].index(b)] = a
    nt.parent[a] = pb
    nt.parent[b] = pa
    return _clone(state, nt), 0.0


def _edge_neighbours(tree, y):
    """Edges sharing a node with edge y, plus y itself."""
    out = [y]
    p = tree.parent[y]
    if p != tree.root:
        out.append(p)
    out.append(tree.sibling(y))
    if y in tree.children:
        out.extend(tree.children[y])
    return sorted(out)


def _move_spr(state, model, wide):
    tree = state.tree
    prunable = tuple(v for v in sorted(tree.parent) if tree.parent[v] != tree.root)
    if not prunable:
        return None
    v = yield ("choice", prunable)
    w = tree.parent[v]
    p = tree.parent[w]
    s = tree.sibling(v)
    age_v = tree.age[v]
    lo_old = max(age_v, tree.age[s])
    hi_old = tree.age[p]

    nt = tree.copy()
    # Merge edge s into edge w; positions stay tied to their absolute ages.
    # The linear remaps of the relative positions enter the Hastings ratio
    # through their Jacobian, accumulated in logj.
    A = nt.age[p] - nt.age[w]
    B = nt.age[w] - nt.age[s]
    logj = (len(nt.cats[s]) * math.log(B / (A + B))
            + len(nt.cats[w]) * math.log(A / (A + B)))
    nt.cats[s] = sorted([q * B / (A + B) for q in nt.cats[s]]
                        + [(B + q * A) / (A + B) for q in nt.cats[w]])
    nt.children[p][nt.children[p].index(w)] = s
    nt.parent[s] = p
    del nt.children[w], nt.parent[w], nt.cats[w], nt.age[w]

    pruned = set(nt.subtree_nodes(v))
    del nt.parent[v]
    host_edges = [y for y in nt.parent if y not in pruned]
    valid = sorted(y for y in host_edges
                   if nt.age[nt.parent[y]] > max(age_v, nt.age[y]))
    if wide:
        dests = tuple(valid)
        loghr_sel = 0.0
    else:
        nb_old = set(_edge_neighbours_merged(nt, s, tree.root))
        dests = tuple(y for y in valid if y in nb_old)
    if not dests:
        return None
    y = yield ("choice", dests)
    x = nt.parent[y]
    lo = max(age_v, nt.age[y])
    hi = nt.age[x]
    t_w = yield ("uniform", lo, hi)
    if not wide:
        nb_new = set(_edge_neighbours_merged(nt, y, tree.root))
        valid_new = [z for z in valid if z in nb_new]
        loghr_sel = math.log(len(dests)) - math.log(len(valid_new))

    # Reinsert w on edge (x -> y) at age t_w, splitting its catastrophes.
    span = nt.age[x] - nt.age[y]
    below, above = [], []
    for q in nt.cats[y]:
        e_age = nt.age[y] + q * span
        if e_age < t_w:
            below.append((e_age - nt.age[y]) / (t_w - nt.age[y]))
        else:
            above.append((e_age - t_w) / (nt.age[x] - t_w))
    logj += (len(below) * math.log(span / (t_w - nt.age[y]))
             + len(above) * math.log(span / (nt.age[x] - t_w)))
    nt.age[w] = t_w
    nt.children[x][nt.children[x].index(y)] = w
    nt.parent[w] = x
    nt.children[w] = [v, y]
    nt.parent[v] = w
    nt.parent[y] = w
    nt.cats[w] = sorted(above)
    nt.cats[y] = sorted(below)
    # reverse re-places w in its old interval: ratio = |new interval|/|old|
    loghr = math.log(hi - lo) - math.log(hi_old - lo_old) + loghr_sel + logj
    return _clone(state, nt), loghr


def _edge_neighbours_merged(nt, y, root):
    """Neighbour edges of edge y in the pruned (merged) tree."""
    out = [y]
    p = nt.parent[y]
    if p != root:
        out.append(p)
    a, b = nt.children[p]
    out.append(b if a == y else a)
    if y in nt.children:
        out.extend(nt.children[y])
    return out


def _scaled_ids(tree, model, top=None):
    if top is None:
        ids = list(tree.children)
        ids += [j for j in model.leaf_windows if j in tree.leaf_names]
    else:
        sub = tree.subtree_nodes(top)
        ids = [u for u in sub if not tree.is_leaf(u) or u in model.leaf_windows]
    return sorted(ids)


def _move_scale_tree(state, model):
    tree = state.tree
    delta = model.scale(6)
    m = math.exp((yield ("uniform", -delta, delta)))
    ids = _scaled_ids(tree, model)
    nt = tree.copy()
    for u in ids:
        nt.age[u] *= m
    return _clone(state, nt), len(ids) * math.log(m)


def _move_scale_subtree(state, model):
    tree = state.tree
    v = yield ("choice", tuple(tree.internal_nodes()))
    delta = model.scale(7)
    m = math.exp((yield ("uniform", -delta, delta)))
    ids = _scaled_ids(tree, model, top=v)
    nt = tree.copy()
    for u in ids:
        nt.age[u] *= m
    return _clone(state, nt), len(ids) * math.log(m)


def _move_scale_above_bounds(state, model):
    tree = state.tree
    ceiling = model.bound_ceiling()
    ids = [v for v in tree.internal_nodes() if tree.age[v] > ceiling]
    if not ids:
        return None
    delta = model.scale(12)
    m = math.exp((yield ("uniform", -delta, delta)))
    nt = tree.copy()
    for u in ids:
        nt.age[u] *= m
        if nt.age[u] <= ceiling:
            return None  # the scaled set must be the same in reverse
    return _clone(state, nt), len(ids) * math.log(m)


def _log_scale_draw(value, delta):
    """Request a multiplier proposal as a log-value interval.

    Yielding the value-space interval (rather than the increment) lets the
    coupled driver maximally couple the two chains' proposals, which is what
    makes scalar components able to meet exactly.
    """
    centre = math.log(value)
    new_log = yield ("uniform", centre - delta, centre + delta)
    return math.exp(new_log), new_log - centre  # (new value, log multiplier)


def _move_scale_mu(state, model):
    new, logm = yield from _log_scale_draw(state.mu, model.scale(8))
    return _clone(state, mu=new), logm


def _move_scale_kappa(state, model):
    new, logm = yield from _log_scale_draw(state.kappa, model.scale(16))
    return _clone(state, kappa=new), logm


def _move_scale_beta(state, model):
    if state.beta is None:
        return None
    new, logm = yield from _log_scale_draw(state.beta, model.scale(21))
    return _clone(state, beta=new), logm


def _move_scale_one_xi(state, model):
    leaf = yield ("choice", tuple(range(1, state.tree.n_leaves + 1)))
    new, logm = yield from _log_scale_draw(state.xi[leaf - 1], model.scale(19))
    xi = state.xi.copy()
    xi[leaf - 1] = new
    return _clone(state, xi=xi), logm


def _move_scale_all_xi(state, model):
    # the common factor is parameterized by the first leaf's proposed value
    new0, logm = yield from _log_scale_draw(state.xi[0], model.scale(20))
    return (_clone(state, xi=state.xi * math.exp(logm)),
            state.tree.n_leaves * logm)


def _cat_items(tree):
    return tuple((e, i) for e in sorted(tree.parent) for i in range(len(tree.cats[e])))


def _move_add_cat(state, model):
    # positions live on per-edge ordered simplices, so inserting into an edge
    # holding k events picks up a (k+1) density factor alongside the usual
    # uniform-edge / uniform-deletion proposal ratio
    tree = state.tree
    e = yield ("choice", tuple(sorted(tree.parent)))
    q = yield ("uniform", 0.0, 1.0)
    total = tree.total_cats()
    k_e = len(tree.cats[e])
    nt = tree.copy()
    nt.cats[e] = sorted(nt.cats[e] + [q])
    loghr = (math.log(len(tree.parent)) + math.log(k_e + 1)
             - math.log(total + 1))
    return _clone(state, nt), loghr


def _move_delete_cat(state, model):
    tree = state.tree
    items = _cat_items(tree)
    if not items:
        return None
    e, i = yield ("choice", items)
    k_e = len(tree.cats[e])
    nt = tree.copy()
    nt.cats[e] = nt.cats[e][:i] + nt.cats[e][i + 1:]
    loghr = (math.log(len(items)) - math.log(len(tree.parent))
             - math.log(k_e))
    return _clone(state, nt), loghr


def _move_resample_edge_cats(state, model):
    tree = state.tree
    e = yield ("choice", tuple(sorted(tree.parent)))
    k_old = len(tree.cats[e])
    if model.rho_marginalized:
        r = priors.RHO_SHAPE + (tree.total_cats() - k_old)
        q = tree.edge_length(e) / (priors.RHO_RATE + tree_length(tree))
        k_new = yield ("negbin", r, q)
        lp_old = priors.conditional_count_logpmf(k_old, r, q)
        lp_new = priors.conditional_count_logpmf(k_new, r, q)
    else:
        lam = model.rho_fixed * tree.edge_length(e)
        k_new = yield ("poisson", lam)
        lp_old = priors.poisson_logpmf(k_old, lam)
        lp_new = priors.poisson_logpmf(k_new, lam)
    pos = []
    for _ in range(k_new):
        pos.append((yield ("uniform", 0.0, 1.0)))
    nt = tree.copy()
    nt.cats[e] = sorted(pos)
    return _clone(state, nt), lp_old - lp_new


def _move_cat_position(state, model):
    tree = state.tree
    items = _cat_items(tree)
    if not items:
        return None
    e, i = yield ("choice", items)
    q = yield ("uniform", 0.0, 1.0)
    nt = tree.copy()
    pos = nt.cats[e][:i] + nt.cats[e][i + 1:]
    nt.cats[e] = sorted(pos + [q])
    return _clone(state, nt), 0.0


def _move_cat_to_neighbour(state, model):
    tree = state.tree
    items = _cat_items(tree)
    if not items:
        return None
    e, i = yield ("choice", items)
    nb = _edge_neighbours(tree, e)
    nb = [f for f in nb if f != e]
    if not nb:
        return None
    f = yield ("choice", tuple(nb))
    q = yield ("uniform", 0.0, 1.0)
    k_e, k_f = len(tree.cats[e]), len(tree.cats[f])
    nt = tree.copy()
    nt.cats[e] = nt.cats[e][:i] + nt.cats[e][i + 1:]
    nt.cats[f] = sorted(nt.cats[f] + [q])
    nb_f = [g for g in _edge_neighbours(tree, f) if g != f]
    loghr = (math.log(len(nb)) - math.log(len(nb_f))
             + math.log(k_f + 1) - math.log(k_e))
    return _clone(state, nt), loghr


MOVES = {
    1: _move_internal_age,
    2: _move_exchange_narrow,
    3: _move_exchange_wide,
    4: lambda s, m: _move_spr(s, m, wide=False),
    5: lambda s, m: _move_spr(s, m, wide=True),
    6: _move_scale_tree,
    7: _move_scale_subtree,
    8: _move_scale_mu,
    11: _move_leaf_age,
    12: _move_scale_above_bounds,
    13: _move_add_cat,
    14: _move_delete_cat,
    15: _move_resample_edge_cats,
    16: _move_scale_kappa,
    17: _move_cat_position,
    18: _move_cat_to_neighbour,
    19: _move_scale_one_xi,
    20: _move_scale_all_xi,
    21: _move_scale_beta,
}


def enabled_moves(model: Model, n_leaves: int) -> list:
    out = [1]
    if model.leaf_windows:
        out.append(11)
    if model.vary_topology and n_leaves >= 3:
        out.extend((2, 3, 4, 5))
    if not model.coupled:
        out.extend((6, 7))
        if model.bound_ceiling() > 0:
            out.append(12)
    if model.catastrophes:
        out.extend((13, 14, 15, 17, 18))
        if model.vary_kappa:
            out.append(16)
    if model.vary_mu:
        out.append(8)
    if model.model_missing:
        out.extend((19, 20))
    return sorted(out)


def draw_value(req, rng):
    kind = req[0]
    if kind == "uniform":
        return float(rng.uniform(req[1], req[2]))
    if kind == "choice":
        return req[1][int(rng.integers(len(req[1])))]
    if kind == "negbin":
        r, q = req[1], req[2]
        if q <= 0.0:
            return 0
        return int(rng.negative_binomial(r, 1.0 - q))
    if kind == "poisson":
        return int(rng.poisson(req[1]))
    raise ValueError(f"unknown draw request {req!r}")


def drive(gen, rng):
    """Run a proposal generator to completion with plain rng draws."""
    try:
        req = next(gen)
        while True:
            req = gen.send(draw_value(req, rng))
    except StopIteration as stop:
        return stop.value


def propose(move_id: int, state: ChainState, model: Model, rng):
    """Draw one proposal: (candidate, log Hastings ratio) or None."""
    if move_id not in MOVES:
        raise RunError(f"unknown move id {move_id}")
    return drive(MOVES[move_id](state, model), rng)


class MoveStats:
    def __init__(self):
        self.proposed = {m: 0 for m in MOVE_IDS}
        self.accepted = {m: 0 for m in MOVE_IDS}

    def reset(self):
        for m in MOVE_IDS:
            self.proposed[m] = 0
            self.accepted[m] = 0

    def fractions(self):
        return {m: (self.accepted[m] / self.proposed[m] if self.proposed[m] else math.nan)
                for m in MOVE_IDS}


def _move_schedule(model: Model, n_leaves: int):
    cached = model._schedule.get(n_leaves)
    if cached is None:
        moves = enabled_moves(model, n_leaves)
        weights = np.array([model.move_weights.get(m, 1.0) for m in moves],
                           dtype=float)
        if np.any(weights < 0) or weights.sum() <= 0:
            raise RunError("move weights must be non-negative with positive total")
        cached = (moves, np.cumsum(weights / weights.sum()))
        model._schedule[n_leaves] = cached
    return cached


def pick_move(model: Model, n_leaves: int, rng) -> int:
    moves, cum = _move_schedule(model, n_leaves)
    idx = int(np.searchsorted(cum, rng.random(), side="right"))
    return moves[min(idx, len(moves) - 1)]


def step(state: ChainState, model: Model, rng, stats: MoveStats | None = None,
         move_id: int | None = None) -> ChainState:
    """One Metropolis-Hastings update; returns the (possibly unchanged) state."""
    if move_id is None:
        move_id = pick_move(model, state.tree.n_leaves, rng)
    if stats is not None:
        stats.proposed[move_id] += 1
    out = propose(move_id, state, model, rng)
    if out is None:
        return state
    cand, loghr = out
    evaluate(cand, model)
    if cand.log_post == -math.inf:
        return state
    if math.log(rng.random()) < cand.log_post - state.log_post + loghr:
        if stats is not None:
            stats.accepted[move_id] += 1
        return cand
    return state


def monitor_line(sample: int, loglik: float, stats: MoveStats) -> str:
    parts = [f"({sample},{loglik:.6f})"]
    fr = stats.fractions()
    for m in MOVE_IDS:
        parts.append("NaN" if math.isnan(fr[m]) else f"{fr[m]:.2f}")
    return " ".join(parts)


# -- run orchestration -------------------------------------------------------

def make_streams(entropy, n: int):
    seq = np.random.SeedSequence(entropy)
    return [np.random.default_rng(s) for s in seq.spawn(n)]


@dataclass
class Prepared:
    taxa_names: list
    table: lk.PatternTable
    constraints: ConstraintSet
    model: Model
    matrix_kept: np.ndarray
    notes: list


def prepare_run(cfg: RunConfig, parsed: ParsedNexus, coupled: bool = False) -> Prepared:
    """Apply omissions, reconcile clades with them, tabulate, build the model."""
    notes = []
    matrix = parsed.matrix
    L = matrix.n_taxa
    keep_idx = [i for i in range(L) if (i + 1) not in set(cfg.omitted_taxa)]
    names = [matrix.taxa_names[i] for i in keep_idx]
    clades = []
    if cfg.impose_clades:
        for num, c in enumerate(parsed.clades, start=1):
            if num in set(cfg.ignore_clades):
                continue
            if num in set(cfg.ignore_clade_ages):
                c = c.without_ages()
            kept = c.taxa & set(names)
            if not kept:
                notes.append(f"clade {c.name!r} dropped: all taxa omitted")
                continue
            if kept != c.taxa:
                notes.append(f"clade {c.name!r} reduced to {sorted(kept)}: "
                             f"omitted taxa removed")
                c = replace(c, taxa=frozenset(kept))
            clades.append(c)
    T = cfg.max_root_age if cfg.tree_prior == "uniform_root" else None
    constraints = ConstraintSet(clades, max_root_age=T)
    table = lk.tabulate_patterns(matrix, cfg.omitted_taxa, cfg.omitted_traits,
                                 d=cfg.d, missing_as_absent=not cfg.model_missing)
    if table.n_dropped_singletons:
        notes.append(f"dropped {table.n_dropped_singletons} single-taxon traits "
                     f"(registration threshold 2)")
    if table.n_dropped_empty:
        notes.append(f"dropped {table.n_dropped_empty} traits with no recorded presence")
    windows = constraints.leaf_windows()
    leaf_windows = {i + 1: windows[n] for i, n in enumerate(names) if n in windows}
    model = Model(table=table, constraints=constraints,
                  tree_prior=cfg.tree_prior,
                  topology_uniform=cfg.topology_uniform,
                  vary_topology=cfg.vary_topology,
                  vary_mu=cfg.vary_loss_rate,
                  catastrophes=cfg.catastrophes,
                  vary_kappa=cfg.vary_kappa,
                  rho_marginalized=cfg.rho_marginalized,
                  rho_fixed=None if cfg.rho_marginalized else cfg.initial_rho,
                  model_missing=cfg.model_missing,
                  d=cfg.d,
                  coupled=coupled,
                  move_weights=dict(cfg.move_weights),
                  move_scales=dict(cfg.move_scales),
                  leaf_windows=leaf_windows)
    cells = matrix.cells[np.ix_(keep_idx, [j for j in range(matrix.n_traits)
                                           if (j + 1) not in set(cfg.omitted_traits)])]
    return Prepared(taxa_names=names, table=table, constraints=constraints,
                    model=model, matrix_kept=cells, notes=notes)


def prior_burnin(model: Model, steps: int | None = None):
    """Burn-in hook for initial trees: a short chain targeting the tree prior."""
    empty = lk.PatternTable(patterns=np.empty((0, 0), dtype=np.int8),
                            counts=np.empty(0, dtype=np.int64), taxa_names=())

    def burn(tree, rng):
        prior_model = replace(model, table=empty, catastrophes=False,
                              vary_mu=False, model_missing=False)
        state = ChainState(tree=tree, mu=1e-3, kappa=None,
                           xi=np.ones(tree.n_leaves))
        evaluate(state, prior_model)
        n = steps if steps is not None else 100 + 20 * tree.n_leaves
        for _ in range(n):
            state = step(state, prior_model, rng)
        return state.tree

    return burn


def initial_state(cfg: RunConfig, prepared: Prepared, parsed: ParsedNexus, rng,
                  burnin_steps: int | None = None) -> ChainState:
    names = prepared.taxa_names
    model = prepared.model
    if cfg.start_tree == "random":
        tree = constrained_initial_tree(names, cfg.theta, prepared.constraints, rng,
                                        burnin=prior_burnin(model, burnin_steps))
        mu = priors.psi_to_mu(cfg.initial_loss_rate)
        kappa = None
        if cfg.catastrophes:
            kappa = (float(rng.uniform(priors.KAPPA_MIN, priors.KAPPA_MAX))
                     if cfg.vary_kappa else cfg.initial_kappa)
        xi = np.full(len(names), 0.5) if cfg.model_missing else np.ones(len(names))
        return ChainState(tree=tree, mu=mu, kappa=kappa, xi=xi)
    if cfg.start_tree == "true":
        if parsed.embedded_tree is None:
            raise RunError("Start_tree=true but the data file has no trees block")
        tree = restrict_to_taxa(parsed.embedded_tree, names)
        mu = priors.psi_to_mu(cfg.initial_loss_rate)
        kappa = cfg.initial_kappa if cfg.catastrophes else None
        if cfg.catastrophes and cfg.vary_kappa:
            kappa = float(rng.uniform(priors.KAPPA_MIN, priors.KAPPA_MAX))
        xi = np.full(len(names), 0.5) if cfg.model_missing else np.ones(len(names))
        state = ChainState(tree=tree, mu=mu, kappa=kappa, xi=xi)
        _resample_cat_positions(state.tree, rng, keep=cfg.catastrophes)
        return state
    # start_tree == "output": inherit tree and parameter values from a past run
    stem = cfg.initial_tree_file
    if stem.endswith(".nex"):
        stem = stem[:-4]
    trees = read_tree_samples(f"{stem}.nex", f"{stem}cat.nex")
    idx = cfg.initial_tree_index
    if not 1 <= idx <= len(trees):
        raise RunError(f"tree index {idx} outside 1..{len(trees)}")
    tree = restrict_to_taxa(trees[idx - 1], names)
    _resample_cat_positions(tree, rng, keep=cfg.catastrophes)
    trace = read_trace(f"{stem}.txt")
    mu = float(trace["mu"][idx - 1])
    kappa = float(trace["kappa"][idx - 1]) if cfg.catastrophes else None
    if kappa is not None and math.isnan(kappa):
        kappa = cfg.initial_kappa
    xi = np.ones(len(names))
    if cfg.model_missing:
        try:
            xi_cols = read_trace(f"{stem}XI.txt")
            xi = np.array([xi_cols[n][idx - 1] for n in names])
        except FileNotFoundError:
            xi = np.full(len(names), 0.5)
    return ChainState(tree=tree, mu=mu, kappa=kappa, xi=xi)


def _resample_cat_positions(tree: Tree, rng, keep: bool):
    """Catastrophe locations are never serialized; redraw them (or drop all)."""
    for v in tree.parent:
        k = len(tree.cats[v])
        if not keep:
            tree.cats[v] = []
        elif k:
            tree.cats[v] = sorted(float(rng.uniform()) for _ in range(k))


@dataclass
class RunResult:
    sample_indices: list
    trees: list
    trace: list
    final_state: ChainState
    paths: dict
    tau: int | None = None


def _record(out: OutputSet, s: int, state: ChainState, model: Model, rng):
    params = state.params(model)
    lam = lk.sample_lambda(model.table, state.tree, params, rng)
    if model.catastrophes:
        rho = (priors.sample_rho(state.tree, rng) if model.rho_marginalized
               else model.rho_fixed)
        kappa = state.kappa
    else:
        rho, kappa = math.nan, math.nan
    pois = lk.log_poisson_likelihood(model.table, state.tree, params, lam)
    rec = TraceRecord(sample=s, root_age=state.tree.age[state.tree.root],
                      mu=state.mu, kappa=kappa, lam=lam, rho=rho,
                      log_prior=state.log_prior, log_likelihood=state.log_lik,
                      poisson_log_likelihood=pois)
    out.write_sample(rec, state.tree, state.xi)
    return rec


def run(cfg: RunConfig, parsed: ParsedNexus | None = None, suffix: str = "",
        out_dir: str | None = None, monitor=None, quiet: bool = False) -> RunResult:
    """Run a single chain per the configuration, writing the output file set."""
    if parsed is None:
        with open(cfg.data_path) as f:
            parsed = parse_nexus(f.read())
    entropy = cfg.seed_entropy()
    if entropy is None:
        entropy = int(np.random.SeedSequence().entropy) % (2 ** 63)
        cfg = replace(cfg, seed=entropy)
    init_rng, chain_rng = make_streams(entropy, 2)
    prepared = prepare_run(cfg, parsed)
    model = prepared.model
    if not quiet:
        for note in prepared.notes:
            print(note, file=monitor or sys.stdout)
    state = initial_state(cfg, prepared, parsed, init_rng)
    evaluate(state, model)
    if state.log_post == -math.inf:
        raise RunError("initial state violates the run constraints; "
                       + "; ".join(validate(state.tree, model.constraints)))

    stem = cfg.output_stem
    if out_dir is not None:
        stem = os.path.join(out_dir, os.path.basename(stem))
    out = OutputSet(stem, prepared.taxa_names, write_par(cfg),
                    with_xi=cfg.model_missing, suffix=str(suffix))
    stats = MoveStats()
    result = RunResult([], [], [], state, out.paths)
    stream = monitor or sys.stdout

    def record(s):
        rec = _record(out, s, state, model, chain_rng)
        result.sample_indices.append(s)
        result.trees.append(state.tree.copy())
        result.trace.append(rec)
        if not quiet:
            print(monitor_line(len(result.sample_indices) - 1, state.log_lik, stats),
                  file=stream)
        stats.reset()

    try:
        record(0)
        for s in range(1, cfg.run_length + 1):
            state = step(state, model, chain_rng, stats)
            if s % cfg.sample_interval == 0:
                result.final_state = state
                record(s)
    finally:
        out.close()
    result.final_state = state
    return result


def run_batch(par_path: str, suffix="", out_dir: str | None = None,
              monitor=None, quiet: bool = False):
    """Batch entry point: dispatch a .par file to a single or coupled run."""
    from .parfile import read_par
    cfg = read_par(par_path)
    if cfg.coupled:
        from .coupling import run_coupled
        return run_coupled(cfg, suffix=suffix, out_dir=out_dir, monitor=monitor,
                           quiet=quiet)
    return run(cfg, suffix=suffix, out_dir=out_dir, monitor=monitor, quiet=quiet)
