"""Post-run summaries: consensus trees, MRCA series, data checks and diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .likelihood import MISSING, PRESENT
from .trees import Tree, TreeError, mrca


class AnalysisError(Exception):
    pass


@dataclass
class ConsensusNode:
    taxa: frozenset
    support: float
    branch_length: float | None
    cat_count: int | None
    label: str | None
    children: list = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return len(self.taxa) == 1


def _splits(tree: Tree) -> dict:
    """Clade leaf-name sets with (stem length, stem cat count, node age)."""
    names = tree.leaf_names
    sets = tree.leafsets()
    out = {}
    for v in tree.age:
        taxa = frozenset(names[u] for u in sets.get(v) or tree.leafset(v))
        if v == tree.root:
            out[taxa] = (None, None, tree.age[v])
        else:
            out[taxa] = (tree.edge_length(v), len(tree.cats[v]), tree.age[v])
    return out


def consensus(samples, threshold: float = 0.5, subsample: int = 1) -> ConsensusNode:
    """Majority-rule consensus with support labels and per-branch summaries.

    Splits at or above the threshold enter the tree (greedily, by support, so
    exact ties cannot conflict); supports in [threshold, 0.95) are labelled,
    unanimous-enough ones are not.  Branch lengths and catastrophe counts are
    means over the samples containing the split, counts rounded half-up.
    """
    if threshold < 0.5:
        raise AnalysisError("consensus thresholds below 50% are not supported")
    samples = list(samples)[::subsample]
    if not samples:
        raise AnalysisError("no tree samples supplied")
    n = len(samples)
    stats: dict = {}
    for t in samples:
        for taxa, (ln, k, age) in _splits(t).items():
            rec = stats.setdefault(taxa, [0, 0.0, 0.0, 0.0])
            rec[0] += 1
            rec[1] += ln if ln is not None else 0.0
            rec[2] += k if k is not None else 0.0
            rec[3] += age

    all_taxa = max(stats, key=len)
    chosen: list = []
    for taxa, rec in sorted(stats.items(), key=lambda kv: (-kv[1][0], -len(kv[0]))):
        support = rec[0] / n
        if support < threshold:
            continue
        if all(taxa <= c or c <= taxa or not (taxa & c) for c in chosen):
            chosen.append(taxa)

    def make(taxa) -> ConsensusNode:
        count, ln_sum, k_sum, _ = stats[taxa]
        support = count / n
        label = None
        if taxa != all_taxa and support < 0.95:
            label = f"{round(100 * support)}%"
        ln = None if taxa == all_taxa else ln_sum / count
        k = None if taxa == all_taxa else math.floor(k_sum / count + 0.5)
        return ConsensusNode(taxa=taxa, support=support, branch_length=ln,
                             cat_count=k, label=label)

    nodes = {taxa: make(taxa) for taxa in chosen}
    for taxa in sorted(chosen, key=len):
        if taxa == all_taxa:
            continue
        parent = min((c for c in chosen if taxa < c), key=len)
        nodes[parent].children.append(nodes[taxa])
    for node in nodes.values():
        node.children.sort(key=lambda c: sorted(c.taxa))
    return nodes[all_taxa]


def consensus_newick(node: ConsensusNode, fmt: str = ".6g") -> str:
    def render(v: ConsensusNode) -> str:
        if v.is_leaf:
            body = next(iter(v.taxa))
        else:
            body = "(" + ",".join(render(c) for c in v.children) + ")"
            if v.label:
                body += v.label
        if v.branch_length is None:
            return body
        out = f"{body}:{v.branch_length:{fmt}}"
        if v.cat_count:
            out += f"[&k={v.cat_count}]"
        return out

    return render(node) + ";"


def mrca_age_series(samples, taxa) -> tuple:
    """Per-sample MRCA ages and exact-clade indicators for a taxon-name set.

    The mean of the indicator series is the clade's posterior probability.
    """
    taxa = set(taxa)
    ages, flags = [], []
    for t in samples:
        name_to_leaf = t.name_to_leaf()
        unknown = taxa - set(name_to_leaf)
        if unknown:
            raise AnalysisError(f"unknown taxa {sorted(unknown)}")
        ids = frozenset(name_to_leaf[x] for x in taxa)
        m = mrca(t, ids)
        ages.append(t.age[m])
        flags.append(t.leafset(m) == ids)
    return np.asarray(ages), np.asarray(flags, dtype=bool)


def data_histograms(matrix) -> tuple:
    """(taxa-per-trait column sums, traits-per-taxon row sums) of recorded 1s."""
    cells = np.asarray(matrix.cells)
    present = cells == PRESENT
    return present.sum(axis=0), present.sum(axis=1)


def synthetic_comparison(tree: Tree, mu: float, lam: float, matrix, rng,
                         missing: bool = False, remove_rare: bool = False):
    """Histograms of the data next to a same-size synthetic set on one tree."""
    from .simulate import SynthConfig, apply_observation_model, simulate_traits
    if matrix is None or np.asarray(matrix.cells).size == 0:
        raise AnalysisError("no data to compare against")
    from .priors import mu_to_psi
    cfg = SynthConfig(tree=tree, K=lam / mu, psi=mu_to_psi(mu),
                      missing=missing, remove_rare=remove_rare)
    sim = simulate_traits(tree, cfg, rng)
    synth = apply_observation_model(sim, cfg, rng)
    return data_histograms(matrix), data_histograms(synth)


def map_pairwise_time(matrix, pair, mu_hat: float) -> float | None:
    """Divergence-time estimate for a taxon pair from shared trait counts.

    Under the basic model the shared count decays as exp(-2 mu t) relative to
    the per-taxon counts, giving t = -log(n_ij / sqrt(n_i n_j)) / (2 mu).
    Valid when all traits, including singletons, are recorded.  Returns None
    when the pair shares nothing.
    """
    cells = np.asarray(matrix.cells)
    i, j = pair
    pi = cells[i] == PRESENT
    pj = cells[j] == PRESENT
    n_i, n_j = int(pi.sum()), int(pj.sum())
    n_ij = int((pi & pj).sum())
    if n_ij == 0 or n_i == 0 or n_j == 0:
        return None
    return -math.log(n_ij / math.sqrt(n_i * n_j)) / (2.0 * mu_hat)


def distance_outputs(matrix, tree: Tree, mu_hat: float):
    """Pairwise divergence estimates plus (estimate, tree MRCA age) pairs.

    The matrix rows follow data-file taxon order; the depth-distance pairs
    support the fit diagnostic where points should track the diagonal.
    """
    L = len(matrix.taxa_names)
    name_to_leaf = tree.name_to_leaf()
    dist = np.zeros((L, L))
    pairs = []
    for i in range(L):
        for j in range(i + 1, L):
            t_hat = map_pairwise_time(matrix, (i, j), mu_hat)
            val = math.nan if t_hat is None else t_hat
            dist[i, j] = dist[j, i] = val
            ids = (name_to_leaf[matrix.taxa_names[i]],
                   name_to_leaf[matrix.taxa_names[j]])
            depth = tree.age[mrca(tree, ids)]
            pairs.append((matrix.taxa_names[i], matrix.taxa_names[j], val, depth))
    return dist, pairs


def active_trait_counts(tree: Tree, matrix) -> dict:
    """Per internal node: traits recorded only inside that node's clade.

    The root reports the total trait count of the matrix.
    """
    cells = np.asarray(matrix.cells)
    name_to_leaf = tree.name_to_leaf()
    rows = {name_to_leaf[nm]: cells[i] == PRESENT
            for i, nm in enumerate(matrix.taxa_names)}
    sets = tree.leafsets()
    counts = {}
    any_present = np.zeros(cells.shape[1], dtype=bool)
    for v in rows:
        any_present |= rows[v]
    for v in tree.internal_nodes():
        inside = np.zeros(cells.shape[1], dtype=bool)
        for u in sets[v]:
            inside |= rows[u]
        outside = np.zeros(cells.shape[1], dtype=bool)
        for u in set(rows) - set(sets[v]):
            outside |= rows[u]
        counts[v] = int((inside & ~outside).sum()) if v != tree.root \
            else int(any_present.sum())
    return counts


REQUIRED, POSSIBLE_BIRTH, ABSENT_OR_DIED = "required-present", "possible-birth", "absent-or-died"


def trait_path(tree: Tree, matrix, trait: int) -> dict:
    """Classify each edge for one trait column under single-origin logic.

    Edges between presence leaves and their MRCA must have carried the trait;
    the MRCA's stem and everything above could host the single birth; the
    rest either never saw it or lost it.  Missing cells leave their leaves
    unconstrained.
    """
    cells = np.asarray(matrix.cells)
    col = cells[:, trait]
    name_to_leaf = tree.name_to_leaf()
    present = [name_to_leaf[nm] for i, nm in enumerate(matrix.taxa_names)
               if col[i] == PRESENT]
    if not present:
        raise AnalysisError("trait has no recorded presence")
    m = mrca(tree, present)
    required = set()
    for v in present:
        u = v
        while u != m:
            required.add(u)
            u = tree.parent[u]
    out = {}
    for v in tree.parent:
        if v in required:
            out[v] = REQUIRED
        elif v == m or _is_ancestor(tree, v, m):
            out[v] = POSSIBLE_BIRTH
        else:
            out[v] = ABSENT_OR_DIED
    return out


def _is_ancestor(tree: Tree, v, node) -> bool:
    while node != tree.root:
        node = tree.parent[node]
        if node == v:
            return True
    return False


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """Lag-k autocorrelations, k = 0..max_lag."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    var = float(x @ x)
    if var == 0:
        return np.ones(max_lag + 1)
    out = np.empty(max_lag + 1)
    for k in range(max_lag + 1):
        out[k] = float(x[: len(x) - k] @ x[k:]) / var if k < len(x) else 0.0
    return out


def effective_sample_size(series) -> float:
    """ESS from the initial positive sequence of autocorrelations."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < 3:
        return float(n)
    acf = autocorrelation(x, min(n - 2, 1000))
    total = 0.0
    for k in range(1, len(acf)):
        if acf[k] <= 0:
            break
        total += acf[k]
    return n / (1.0 + 2.0 * total)
