"""Tree and parameter priors, the marginal catastrophe-count prior, and the posterior."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .trees import ConstraintSet, Tree, mrca, tree_length, validate
from . import likelihood as lk

MU_SHAPE, MU_RATE = 0.001, 0.001          # broad Gamma on the death rate
BETA_SHAPE, BETA_RATE = 0.001, 0.001      # same family for the transfer rate
RHO_SHAPE, RHO_RATE = 1.5, 5000.0         # catastrophe rate
KAPPA_MIN, KAPPA_MAX = 0.25, 1.0          # weak catastrophes excluded


def log_gamma_pdf(x: float, shape: float, rate: float) -> float:
    if x <= 0:
        return -math.inf
    return shape * math.log(rate) - gammaln(shape) + (shape - 1) * math.log(x) - rate * x


def psi_to_mu(psi: float) -> float:
    """Loss rate over a millennium -> death rate per year."""
    if not 0.0 < psi < 1.0:
        raise ValueError("psi must lie strictly between 0 and 1")
    return -math.log1p(-psi) / 1000.0


def mu_to_psi(mu: float) -> float:
    return -math.expm1(-1000.0 * mu)


def log_tree_prior_exponential(tree: Tree) -> float:
    """Branching-rate-marginal prior: density proportional to |g|^-(L-1)."""
    g = tree_length(tree)
    if g <= 0:
        return -math.inf
    return -(tree.n_leaves - 1) * math.log(g)


def _lower_bounds_below(tree: Tree, constraints: ConstraintSet) -> dict:
    """Per-node minimum feasible age: constraint lower bounds in its subtree."""
    name_to_leaf = tree.name_to_leaf()
    windows = constraints.leaf_windows()
    direct = {v: 0.0 for v in tree.age}
    for v, name in tree.leaf_names.items():
        # A pinned leaf floors its ancestors at its sampling age; an offset
        # leaf can slide down to its window's lower edge.
        direct[v] = windows[name][0] if name in windows else tree.age[v]
    leafsets = tree.leafsets()
    for c in constraints:
        if len(c.taxa) < 2:
            continue
        ids = frozenset(name_to_leaf[t] for t in c.taxa if t in name_to_leaf)
        if len(ids) < 2:
            continue
        m = mrca(tree, ids)
        if leafsets[m] != ids:
            continue
        if c.rootmin is not None:
            direct[m] = max(direct[m], c.rootmin)
        if c.originatemin is not None and m != tree.root:
            p = tree.parent[m]
            direct[p] = max(direct[p], c.originatemin)
    out = {}
    for v in tree.postorder():
        if tree.is_leaf(v):
            out[v] = direct[v]
        else:
            a, b = tree.children[v]
            out[v] = max(direct[v], out[a], out[b])
    return out


def _upper_bounded_nodes(tree: Tree, constraints: ConstraintSet) -> set:
    """Nodes carrying a direct finite upper age bound from some clade."""
    name_to_leaf = tree.name_to_leaf()
    leafsets = tree.leafsets()
    bounded = set()
    for c in constraints:
        ids = frozenset(name_to_leaf[t] for t in c.taxa if t in name_to_leaf)
        if not ids:
            continue
        m = mrca(tree, ids)
        if leafsets[m] != ids:
            continue
        if c.rootmax is not None:
            bounded.add(m)
        if c.originatemax is not None and m != tree.root:
            bounded.add(tree.parent[m])
    return bounded


def free_nodes(tree: Tree, constraints: ConstraintSet) -> dict:
    """Internal nodes bounded above only by the root-age cap, with their floors.

    A node is free when neither it nor any ancestor carries a direct clade
    upper bound.  Returns {node: minimum feasible age}.
    """
    if not constraints.clades:
        ages = [tree.age[v] for v in tree.leaf_names]
        if max(ages) == min(ages):
            base = ages[0]
            return {v: base for v in tree.children}
    bounded = _upper_bounded_nodes(tree, constraints)
    floors = _lower_bounds_below(tree, constraints)
    out = {}
    for v in tree.internal_nodes():
        free = True
        u = v
        while True:
            if u in bounded:
                free = False
                break
            if u == tree.root:
                break
            u = tree.parent[u]
        if free:
            out[v] = floors[v]
    return out


def log_ranking_count(tree: Tree) -> float:
    """Log number of orderings of the internal nodes consistent with ancestry."""
    sizes = {}
    for v in tree.postorder():
        if tree.is_leaf(v):
            sizes[v] = 0
        else:
            a, b = tree.children[v]
            sizes[v] = 1 + sizes[a] + sizes[b]
    L = tree.n_leaves
    return float(gammaln(L)) - sum(math.log(sizes[v]) for v in tree.internal_nodes())


def log_tree_prior_uniform_root(tree: Tree, constraints: ConstraintSet,
                                topology_weighted: bool = False) -> float:
    """Prior making the marginal root age close to uniform on (0, T).

    Each free non-root node i contributes (T - s_i)/(t_r - s_i), where s_i is
    the node's minimum feasible age; the root contributes the indicator
    t_r < T.  With ``topology_weighted`` the density is divided by the number
    of internal-node rankings so unranked topologies get equal weight.
    """
    T = constraints.max_root_age
    if T is None:
        raise ValueError("uniform-root prior needs a maximum root age")
    t_r = tree.age[tree.root]
    if t_r >= T:
        return -math.inf
    out = 0.0
    for v, s in free_nodes(tree, constraints).items():
        if v == tree.root:
            continue
        if t_r <= s:
            return -math.inf
        out += math.log(T - s) - math.log(t_r - s)
    if topology_weighted:
        out -= log_ranking_count(tree)
    return out


def log_param_priors(mu: float, kappa: float | None, xi,
                     vary_mu: bool, vary_kappa: bool, vary_xi: bool,
                     beta: float | None = None, vary_beta: bool = False) -> float:
    """Sum of log prior densities over the parameters being estimated."""
    out = 0.0
    if vary_mu:
        out += log_gamma_pdf(mu, MU_SHAPE, MU_RATE)
    if vary_kappa:
        if kappa is None or not KAPPA_MIN <= kappa <= KAPPA_MAX:
            return -math.inf
        out += -math.log(KAPPA_MAX - KAPPA_MIN)
    if vary_xi:
        x = np.asarray(xi, dtype=float)
        if np.any(x <= 0.0) or np.any(x > 1.0):
            return -math.inf
        # Uniform(0,1) contributes zero.
    if vary_beta:
        out += log_gamma_pdf(beta, BETA_SHAPE, BETA_RATE)
    return out


def log_catastrophe_count_prior(tree: Tree, marginalized: bool = True,
                                rho: float | None = None,
                                shape: float = RHO_SHAPE,
                                rate: float = RHO_RATE) -> float:
    """Log prior of the per-edge catastrophe counts.

    With the rate integrated out the counts are negative-multinomial over the
    finite edges; with a fixed rate they are independent Poissons.
    """
    ks, ls = [], []
    for v in tree.parent:
        ks.append(len(tree.cats[v]))
        ls.append(tree.edge_length(v))
    ks = np.asarray(ks, dtype=float)
    ls = np.asarray(ls, dtype=float)
    if np.any(ks < 0):
        raise ValueError("negative catastrophe count")
    total_k = ks.sum()
    total_l = ls.sum()
    if marginalized:
        out = float(gammaln(shape + total_k) - gammaln(shape)
                    - gammaln(ks + 1).sum()
                    + shape * (math.log(rate) - math.log(rate + total_l)))
        nz = ks > 0
        if np.any(nz):
            if np.any(ls[nz] <= 0):
                return -math.inf
            out += float((ks[nz] * (np.log(ls[nz]) - math.log(rate + total_l))).sum())
        return out
    if rho is None or rho <= 0:
        raise ValueError("fixed-rate mode needs rho > 0")
    out = -rho * total_l - float(gammaln(ks + 1).sum())
    nz = ks > 0
    if np.any(nz):
        if np.any(ls[nz] <= 0):
            return -math.inf
        out += float((ks[nz] * np.log(rho * ls[nz])).sum())
    return out


def conditional_count_logpmf(k: int, r: float, q: float) -> float:
    """Log pmf of one edge's count given the rest, marginal-rate mode (NB(r, q))."""
    if k < 0:
        return -math.inf
    if q <= 0.0:
        return 0.0 if k == 0 else -math.inf
    return float(gammaln(r + k) - gammaln(r) - gammaln(k + 1)
                 + k * math.log(q) + r * math.log1p(-q))


def poisson_logpmf(k: int, lam: float) -> float:
    if k < 0:
        return -math.inf
    if lam <= 0.0:
        return 0.0 if k == 0 else -math.inf
    return k * math.log(lam) - lam - float(gammaln(k + 1))


def sample_rho(tree: Tree, rng, shape: float = RHO_SHAPE, rate: float = RHO_RATE) -> float:
    """Draw the catastrophe rate from its conditional posterior Gamma(a+K, b+|g|)."""
    total_k = tree.total_cats()
    total_l = tree_length(tree)
    return float(rng.gamma(shape + total_k, 1.0 / (rate + total_l)))
