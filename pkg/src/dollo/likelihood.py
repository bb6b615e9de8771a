"""Integrated trait-presence likelihood with catastrophes, missing data and registration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .trees import Tree, effective_edge_length

ABSENT, PRESENT, MISSING = 0, 1, 2


class DataError(Exception):
    pass


@dataclass
class PatternTable:
    """Distinct observed leaf columns and their multiplicities.

    ``patterns`` is (n_patterns, L) over {ABSENT, PRESENT, MISSING} with
    columns in data-file taxon order (leaf id i maps to column i-1).
    """

    patterns: np.ndarray
    counts: np.ndarray
    taxa_names: tuple
    n_dropped_empty: int = 0
    n_dropped_singletons: int = 0

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_leaves(self) -> int:
        return self.patterns.shape[1]


@dataclass
class LikelihoodParams:
    """Scalar model parameters entering the pattern intensities.

    xi holds per-leaf recording probabilities; all ones when missingness is
    not modelled ('?' cells are then recoded absent upstream).  d is the
    registration threshold: traits must be recorded present in >= d taxa.
    """

    mu: float
    xi: np.ndarray
    kappa: float | None = None
    d: int = 1

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.d not in (1, 2):
            raise ValueError("registration threshold d must be 1 or 2")
        if np.any(self.xi <= 0) or np.any(self.xi > 1):
            raise ValueError("recording probabilities must lie in (0, 1]")


def tabulate_patterns(matrix, omitted_taxa=(), omitted_traits=(), d: int = 1,
                      missing_as_absent: bool = False) -> PatternTable:
    """Tabulate site patterns after omissions and registration filtering.

    Omission indices are 1-based row/column numbers as they appear in the
    data file.  Columns with no recorded presence are dropped always;
    singleton columns are dropped too when d=2.
    """
    cells = np.asarray(matrix.cells, dtype=np.int8)
    taxa = list(matrix.taxa_names)
    L, N = cells.shape
    for idx in omitted_taxa:
        if not 1 <= idx <= L:
            raise DataError(f"omitted taxon index {idx} out of range 1..{L}")
    for idx in omitted_traits:
        if not 1 <= idx <= N:
            raise DataError(f"omitted trait index {idx} out of range 1..{N}")
    keep_rows = [i for i in range(L) if (i + 1) not in set(omitted_taxa)]
    if len(keep_rows) < 2:
        raise DataError("fewer than two taxa remain after omission")
    keep_cols = [j for j in range(N) if (j + 1) not in set(omitted_traits)]
    sub = cells[np.ix_(keep_rows, keep_cols)]
    if missing_as_absent:
        sub = np.where(sub == MISSING, ABSENT, sub)

    ones = (sub == PRESENT).sum(axis=0)
    keep = ones >= 1
    n_empty = int(np.count_nonzero(~keep))
    n_single = 0
    if d == 2:
        single = ones == 1
        n_single = int(np.count_nonzero(single))
        keep &= ~single
    sub = sub[:, keep]

    cols = np.ascontiguousarray(sub.T)
    if cols.shape[0] == 0:
        patterns = np.empty((0, len(keep_rows)), dtype=np.int8)
        counts = np.empty(0, dtype=np.int64)
    else:
        patterns, counts = np.unique(cols, axis=0, return_counts=True)
    return PatternTable(patterns=patterns.astype(np.int8),
                        counts=counts.astype(np.int64),
                        taxa_names=tuple(taxa[i] for i in keep_rows),
                        n_dropped_empty=n_empty,
                        n_dropped_singletons=n_single)


def _log1mexp(x: float) -> float:
    """log(1 - exp(x)) for x <= 0."""
    if x == 0.0:
        return -math.inf
    if x > -0.6931471805599453:
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def _leaf_log_emissions(patterns: np.ndarray, xi: np.ndarray):
    """Per-leaf log emission arrays given the trait is alive / dead there."""
    n, L = patterns.shape
    la = np.empty((L, n))
    ld = np.empty((L, n))
    with np.errstate(divide="ignore"):
        lxi = np.log(xi)
        lmx = np.log1p(-xi)
    for j in range(L):
        p = patterns[:, j]
        la[j] = np.where(p == PRESENT, lxi[j], np.where(p == ABSENT, -np.inf, lmx[j]))
        ld[j] = np.where(p == PRESENT, -np.inf, np.where(p == ABSENT, lxi[j], lmx[j]))
    return la, ld


def pattern_log_intensities(tree: Tree, params: LikelihoodParams,
                            patterns: np.ndarray,
                            leaf_emissions=None) -> np.ndarray:
    """log z_p for each pattern row: expected trait count per unit birth rate.

    A pruning pass gives, per node, the log probability that a single trait
    alive there emits the observed sub-pattern below; births integrate the
    survival kernel along each (catastrophe-extended) edge and the root uses
    the equilibrium mass 1/mu.  Leaves outside a birth edge's subtree
    contribute their dead-state emissions.
    """
    patterns = np.asarray(patterns)
    if patterns.ndim != 2 or patterns.shape[1] != tree.n_leaves:
        raise DataError("pattern length does not match the number of leaves")
    mu = params.mu
    if leaf_emissions is None:
        leaf_emissions = _leaf_log_emissions(patterns, params.xi)
    leaf_la, leaf_ld = leaf_emissions

    order = tree.postorder()
    la, ld = {}, {}
    l1me = {}
    for v in order:
        if tree.is_leaf(v):
            la[v] = leaf_la[v - 1]
            ld[v] = leaf_ld[v - 1]
        else:
            a, b = tree.children[v]
            acc_a = None
            acc_d = ld[a] + ld[b]
            for c in (a, b):
                tau = effective_edge_length(tree, c, mu, params.kappa)
                e = -mu * tau
                l1me[c] = _log1mexp(e)
                term = np.logaddexp(e + la[c], l1me[c] + ld[c])
                acc_a = term if acc_a is None else acc_a + term
            la[v] = acc_a
            ld[v] = acc_d

    lout = {tree.root: 0.0}
    for v in reversed(order):
        if not tree.is_leaf(v):
            a, b = tree.children[v]
            lout[a] = lout[v] + ld[b]
            lout[b] = lout[v] + ld[a]

    log_mu = math.log(mu)
    rows = np.empty((len(order), patterns.shape[0]))
    i = 0
    for v in order:
        if v == tree.root:
            continue
        # log((1 - exp(-mu*tau)) / mu) without recomputing tau
        rows[i] = (l1me[v] - log_mu) + la[v] + lout[v]
        i += 1
    rows[i] = la[tree.root] - log_mu
    top = np.max(rows, axis=0)
    finite = top > -np.inf
    out = np.full(patterns.shape[0], -np.inf)
    if np.any(finite):
        sub = rows[:, finite]
        out[finite] = top[finite] + np.log(np.exp(sub - top[finite]).sum(axis=0))
    return out


def pattern_intensity(tree: Tree, params: LikelihoodParams, pattern) -> float:
    """z_p for a single pattern over {ABSENT, PRESENT, MISSING}."""
    logz = pattern_log_intensities(tree, params, np.asarray([pattern], dtype=np.int8))
    return float(np.exp(logz[0]))


def registered_normalizer(tree: Tree, params: LikelihoodParams) -> float:
    """Z = sum of z_q over observable patterns, in closed form (linear in L).

    Z is the expected number of traits with >= 1 recorded presence, minus the
    expected number with exactly one when d=2; both follow from per-node
    probabilities of producing no (or exactly one) recorded presence.
    """
    mu = params.mu
    xi = params.xi
    u, s = {}, {}
    psurv = {}
    for v in tree.postorder():
        if tree.is_leaf(v):
            u[v] = 1.0 - xi[v - 1]
            s[v] = xi[v - 1]
        else:
            a, b = tree.children[v]
            for c in (a, b):
                tau = effective_edge_length(tree, c, mu, params.kappa)
                psurv[c] = math.exp(-mu * tau)
            qa = psurv[a] * u[a] + (1.0 - psurv[a])
            qb = psurv[b] * u[b] + (1.0 - psurv[b])
            u[v] = qa * qb
            s[v] = psurv[a] * s[a] * qb + psurv[b] * s[b] * qa

    z_any = (1.0 - u[tree.root]) / mu
    z_one = s[tree.root] / mu
    for v in tree.parent:
        w = (1.0 - psurv[v]) / mu
        z_any += w * (1.0 - u[v])
        z_one += w * s[v]
    return z_any - z_one if params.d == 2 else z_any


def log_integrated_likelihood(table: PatternTable, tree: Tree,
                              params: LikelihoodParams,
                              leaf_emissions=None) -> float:
    """Birth-rate-marginal log likelihood: sum_p N_p (log z_p - log Z)."""
    if table.n_total == 0:
        return 0.0
    logz = pattern_log_intensities(tree, params, table.patterns, leaf_emissions)
    if np.any(np.isneginf(logz)):
        return -math.inf
    Z = registered_normalizer(tree, params)
    return float(table.counts @ logz) - table.n_total * math.log(Z)


def log_poisson_likelihood(table: PatternTable, tree: Tree,
                           params: LikelihoodParams, lam: float) -> float:
    """Log likelihood of the pattern counts at a fixed birth rate lambda."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n = table.n_total
    Z = registered_normalizer(tree, params)
    if lam == 0.0:
        return 0.0 if n == 0 else -math.inf
    if n == 0:
        return -lam * Z
    logz = pattern_log_intensities(tree, params, table.patterns)
    if np.any(np.isneginf(logz)):
        return -math.inf
    return (n * math.log(lam) - lam * Z + float(table.counts @ logz)
            - float(gammaln(table.counts + 1).sum()))


def sample_lambda(table: PatternTable, tree: Tree, params: LikelihoodParams,
                  rng) -> float:
    """Draw the birth rate from its conditional posterior Gamma(N, Z)."""
    n = table.n_total
    if n == 0:
        return 0.0
    Z = registered_normalizer(tree, params)
    return float(rng.gamma(n, 1.0 / Z))
