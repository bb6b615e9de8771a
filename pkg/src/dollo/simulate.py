"""Forward simulation of trait matrices: birth-death traits with catastrophes,
rate heterogeneity, observation classes, borrowing, and the observation model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .likelihood import ABSENT, MISSING, PRESENT
from .nexus import TraitMatrix, write_data_nexus
from .priors import psi_to_mu
from .trees import CladeConstraint, Tree, TreeError, random_exponential_tree


class SimulationError(Exception):
    pass


@dataclass
class SynthConfig:
    """Synthesis settings: tree source, rates, and the optional extensions."""

    n_leaves: int = 8
    theta: float = 0.001
    tree: Tree | None = None
    K: float = 30.0                   # mean traits per taxon
    psi: float = 0.3                  # loss over a millennium; mu derives from it
    rho: float | None = None          # catastrophe rate per lineage-year
    kappa: float | None = None        # death probability at a catastrophe
    sigma: float = 0.0                # relative sd of branch death rates
    n_classes: int | None = None      # observation classes (no-empty-field)
    varsigma: float = 0.0             # relative sd across classes
    borrow_rate: float = 0.0          # b; instances copy at rate b*mu
    borrow_dist: float | None = None  # None = global borrowing
    missing: bool = False
    remove_rare: bool = False
    n_clades: int = 0
    clade_accuracy: float = 10.0
    seed: int | None = None
    nef_budget: int = 1000

    def __post_init__(self):
        if self.K <= 0:
            raise SimulationError("K must be positive")
        if not 0.0 < self.psi < 1.0:
            raise SimulationError("psi must lie strictly between 0 and 1")
        if self.rho is not None:
            if self.rho <= 0:
                raise SimulationError("rho must be positive")
            if self.kappa is None or not 0.0 < self.kappa <= 1.0:
                raise SimulationError("catastrophes need kappa in (0, 1]")

    @property
    def mu(self) -> float:
        return psi_to_mu(self.psi)

    @property
    def lam(self) -> float:
        return self.K * self.mu


@dataclass
class SimResult:
    """Raw simulation output before the observation model."""

    tree: Tree
    presence: np.ndarray            # (L, N) bool, leaf order 1..L
    classes: np.ndarray             # (N,) class index per trait
    truth: dict = field(default_factory=dict)


def _edge_rates(tree: Tree, mu: float, sigma: float, n_classes: int,
                varsigma: float, rng) -> dict:
    """Per (edge, class) death rates; Gamma-distributed when heterogeneous."""
    rates = {}
    for e in tree.parent:
        if sigma > 0:
            mu_e = float(rng.gamma(1.0 / sigma ** 2, mu * sigma ** 2))
        else:
            mu_e = mu
        if varsigma > 0:
            per_class = rng.gamma(1.0 / varsigma ** 2, mu_e * varsigma ** 2,
                                  size=n_classes)
            rates[e] = np.maximum(per_class, 1e-300)
        else:
            rates[e] = np.full(n_classes, mu_e)
    return rates


def draw_catastrophes(tree: Tree, rho: float, rng) -> Tree:
    """Attach Poisson(rho * length) catastrophes at uniform edge positions."""
    out = tree.copy()
    for e in out.parent:
        n = int(rng.poisson(rho * out.edge_length(e)))
        out.cats[e] = sorted(float(rng.uniform()) for _ in range(n))
    return out


def _cat_schedule(tree: Tree):
    """Catastrophe events as (age, edge), oldest first."""
    events = []
    for e in tree.parent:
        ln = tree.edge_length(e)
        for q in tree.cats[e]:
            events.append((tree.age[e] + q * ln, e))
    events.sort(reverse=True)
    return events


def _sim_class_fast(tree: Tree, lam: float, mu_base: float, edge_mu: dict,
                    kappa: float | None, nu: float, rng) -> dict:
    """Exact per-segment sampling of one class's trait process (no borrowing).

    Equivalent in law to event-by-event simulation: survivors of each edge
    segment are Bernoulli(exp(-mu*s)) thinnings and the births surviving to
    the segment end are Poisson(lam*(1-exp(-mu*s))/mu).
    """
    counter = [0]

    def fresh(n):
        ids = np.arange(counter[0], counter[0] + n, dtype=np.int64)
        counter[0] += n
        return ids

    presence = {}
    root_ids = fresh(int(rng.poisson(lam / mu_base)))
    stack = [(c, root_ids) for c in tree.children[tree.root]]
    while stack:
        v, ids = stack.pop()
        mu_e = float(edge_mu[v])
        t_hi = tree.age[tree.parent[v]]
        ln = tree.edge_length(v)
        marks = sorted((tree.age[v] + q * ln for q in tree.cats[v]), reverse=True)
        for t_cat in marks:
            s = t_hi - t_cat
            ids = ids[rng.random(ids.size) < math.exp(-mu_e * s)]
            ids = np.concatenate(
                [ids, fresh(int(rng.poisson(lam * -math.expm1(-mu_e * s) / mu_e)))])
            # the catastrophe: each trait dies w.p. kappa, Poisson(nu) are born
            ids = ids[rng.random(ids.size) < 1.0 - kappa]
            ids = np.concatenate([ids, fresh(int(rng.poisson(nu)))])
            t_hi = t_cat
        s = t_hi - tree.age[v]
        ids = ids[rng.random(ids.size) < math.exp(-mu_e * s)]
        ids = np.concatenate(
            [ids, fresh(int(rng.poisson(lam * -math.expm1(-mu_e * s) / mu_e)))])
        if tree.is_leaf(v):
            presence[v] = ids
        else:
            for c in tree.children[v]:
                stack.append((c, ids))
    presence["n_traits"] = counter[0]
    return presence


class _BorrowSim:
    """Event-driven simulation of one trait class with lateral transfer.

    Traits are independent given the catastrophe schedule, so each trait's
    carrier set is simulated on its own over the time-sliced tree.
    """

    def __init__(self, tree: Tree, lam, mu_base, edge_mu, kappa, nu, b, dist, rng):
        self.tree = tree
        self.lam, self.mu_base = lam, mu_base
        self.edge_mu = {e: float(m) for e, m in edge_mu.items()}
        self.kappa, self.nu, self.b, self.dist = kappa, nu, b, dist
        self.rng = rng
        self.cat_events = _cat_schedule(tree)
        node_marks = [(tree.age[v], v) for v in tree.age if v != tree.root]
        self.node_events = sorted(node_marks, reverse=True)
        self.div_age = self._divergence_ages()

    def _divergence_ages(self):
        sets = self.tree.leafsets()
        ages = {}
        edges = list(self.tree.parent)
        for i, e in enumerate(edges):
            for f in edges[i:]:
                m = e
                while not (sets[f] <= sets[m]):
                    m = self.tree.parent[m]
                ages[(e, f)] = ages[(f, e)] = self.tree.age[m] if e != f \
                    else self.tree.age[e]
        return ages

    def extant(self, t):
        tr = self.tree
        return [v for v in tr.parent if tr.age[v] <= t < tr.age[tr.parent[v]]]

    def _targets(self, e, t):
        pool = self.extant(t)
        if self.dist is None:
            return pool
        return [f for f in pool if self.div_age[(e, f)] <= t + self.dist]

    def births(self):
        """All trait birth sites for one class: (age, edge|None) tuples."""
        tr, rng = self.tree, self.rng
        sites = [(tr.age[tr.root], None)] * int(rng.poisson(self.lam / self.mu_base))
        for e in tr.parent:
            ln = tr.edge_length(e)
            for _ in range(int(rng.poisson(self.lam * ln))):
                sites.append((tr.age[e] + float(rng.uniform(0, ln)), e))
        for age, e in self.cat_events:
            for _ in range(int(rng.poisson(self.nu))):
                sites.append((age, e))
        return sites

    def run_trait(self, t0, site):
        """Follow one trait from its birth; returns the set of presence leaves."""
        tr, rng = self.tree, self.rng
        if site is None:
            carriers = set(tr.children[tr.root])
        else:
            carriers = {site}
        found = set()
        det = [ev for ev in self.node_events if ev[0] < t0]
        det += [ev + ("cat",) for ev in self.cat_events if ev[0] < t0]
        det.sort(key=lambda ev: ev[0], reverse=True)
        t = t0
        for ev in det:
            if not carriers:
                return found
            t_next = ev[0]
            t = self._evolve(carriers, t, t_next)
            if t is None:
                return found
            if len(ev) == 3:
                self._catastrophe(carriers, ev[1], t_next)
            else:
                v = ev[1]
                if v in carriers:
                    carriers.remove(v)
                    if tr.is_leaf(v):
                        found.add(v)
                    else:
                        carriers.update(tr.children[v])
        return found

    def _evolve(self, carriers, t_hi, t_lo):
        """Gillespie death/borrow dynamics on (t_lo, t_hi); returns t_lo or None."""
        rng = self.rng
        t = t_hi
        while carriers:
            rates = [(e, self.edge_mu[e]) for e in sorted(carriers)]
            total = sum(m * (1.0 + self.b) for _, m in rates)
            t -= rng.exponential(1.0 / total)
            if t <= t_lo:
                return t_lo
            u = float(rng.uniform(0.0, total))
            acc = 0.0
            for e, m in rates:
                acc += m * (1.0 + self.b)
                if u < acc:
                    if u < acc - m * self.b:
                        carriers.remove(e)       # death
                    else:                        # borrowing attempt
                        pool = self._targets(e, t)
                        if pool:
                            f = pool[int(rng.integers(len(pool)))]
                            if f not in carriers:
                                carriers.add(f)
                    break
        return t_lo if carriers else None

    def _catastrophe(self, carriers, e, t):
        """Advance edge e through a catastrophe: death, and transfer-in only."""
        mu_e = self.edge_mu[e]
        span = -math.log1p(-self.kappa) / mu_e
        pool = self.extant(t)
        donors = [f for f in carriers if f != e and
                  (self.dist is None or self.div_age[(e, f)] <= t + self.dist)]
        in_rate = self.b * sum(self.edge_mu[f] for f in donors) / max(len(pool), 1)
        present = e in carriers
        s = 0.0
        while True:
            rate = mu_e if present else in_rate
            if rate <= 0:
                break
            s += self.rng.exponential(1.0 / rate)
            if s >= span:
                break
            present = not present
        if present:
            carriers.add(e)
        else:
            carriers.discard(e)


def _sim_class_borrowing(tree, lam, mu_base, edge_mu, kappa, nu, b, dist, rng):
    sim = _BorrowSim(tree, lam, mu_base, edge_mu, kappa, nu, b, dist, rng)
    presence = {v: [] for v in tree.leaf_names}
    n = 0
    for t0, site in sim.births():
        leaves = sim.run_trait(t0, site)
        for v in leaves:
            presence[v].append(n)
        n += 1
    out = {v: np.asarray(ids, dtype=np.int64) for v, ids in presence.items()}
    out["n_traits"] = n
    return out


def simulate_traits(tree: Tree, cfg: SynthConfig, rng) -> SimResult:
    """Simulate the full trait matrix on a tree (before the observation model).

    Catastrophes come from cfg.rho (drawn) or from catastrophes already on the
    tree; classes are simulated independently at rate lam/n_classes each, with
    per-class rejection when the no-empty-field assumption is imposed.
    """
    if cfg.rho is not None:
        tree = draw_catastrophes(tree, cfg.rho, rng)
    elif tree.total_cats() and cfg.kappa is None:
        raise SimulationError("tree carries catastrophes but kappa is not set")
    mu, lam = cfg.mu, cfg.lam
    n_cls = cfg.n_classes or 1
    edge_rates = _edge_rates(tree, mu, cfg.sigma, n_cls, cfg.varsigma, rng)
    nu_cls = (cfg.kappa or 0.0) * (lam / mu) / n_cls
    lam_cls = lam / n_cls
    leaves = tree.leaves()

    blocks, class_ids = [], []
    for c in range(n_cls):
        edge_mu = {e: edge_rates[e][c] for e in tree.parent}
        for attempt in range(cfg.nef_budget):
            if cfg.borrow_rate > 0:
                out = _sim_class_borrowing(tree, lam_cls, mu, edge_mu, cfg.kappa,
                                           nu_cls, cfg.borrow_rate,
                                           cfg.borrow_dist, rng)
            else:
                out = _sim_class_fast(tree, lam_cls, mu, edge_mu, cfg.kappa,
                                      nu_cls, rng)
            ids = np.unique(np.concatenate([out[v] for v in leaves])) \
                if out["n_traits"] else np.empty(0, dtype=np.int64)
            if cfg.n_classes is None:
                break
            if ids.size and all(out[v].size for v in leaves):
                break  # every leaf shows at least one trait of this class
        else:
            raise SimulationError(
                f"no-empty-field rejection budget exhausted for class {c}")
        block = np.zeros((len(leaves), ids.size), dtype=bool)
        for i, v in enumerate(leaves):
            block[i] = np.isin(ids, out[v], assume_unique=False)
        blocks.append(block)
        class_ids.append(np.full(ids.size, c))

    presence = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(leaves), 0), bool)
    classes = np.concatenate(class_ids) if class_ids else np.empty(0, int)
    truth = {"mu": mu, "lambda": lam, "psi": cfg.psi, "K": cfg.K,
             "root_age": tree.age[tree.root],
             "n_catastrophes": tree.total_cats()}
    if cfg.kappa is not None:
        truth["kappa"] = cfg.kappa
    if cfg.rho is not None:
        truth["rho"] = cfg.rho
    return SimResult(tree=tree, presence=presence, classes=classes, truth=truth)


def apply_observation_model(sim: SimResult, cfg: SynthConfig, rng) -> TraitMatrix:
    """Mask cells missing-at-random, then drop unobserved (and rare) traits.

    With observation classes, masking happens in (taxon, class) blocks.
    Recording probabilities are Beta(1, 1/3) draws, stored in sim.truth.
    """
    L, N = sim.presence.shape
    cells = np.where(sim.presence, PRESENT, ABSENT).astype(np.int8)
    if cfg.missing:
        xi = rng.beta(1.0, 1.0 / 3.0, size=L)
        sim.truth["xi"] = xi
        if cfg.n_classes is not None:
            block_mask = rng.random((L, cfg.n_classes)) > xi[:, None]
            mask = block_mask[:, sim.classes] if N else np.zeros((L, 0), bool)
        else:
            mask = rng.random((L, N)) > xi[:, None]
        cells[mask] = MISSING
    recorded = (cells == PRESENT).sum(axis=0)
    keep = recorded >= 1
    if cfg.remove_rare:
        keep &= recorded != 1
    cells = cells[:, keep]
    sim.truth["kept_traits"] = int(keep.sum())
    sim.truth["kept_classes"] = sim.classes[keep]
    names = [sim.tree.leaf_names[v] for v in sim.tree.leaves()]
    return TraitMatrix(taxa_names=names, cells=cells)


def enforce_no_empty_field(sim_fn, n_obs: int, budget: int, rng):
    """Rejection wrapper: resample a class until every leaf displays it."""
    for _ in range(budget):
        out = sim_fn(rng)
        if all(ids.size for key, ids in out.items() if key != "n_traits"):
            return out
    raise SimulationError("no-empty-field rejection budget exhausted")


def synthesize_clades(tree: Tree, count: int, accuracy: float, rng) -> list:
    """Clade constraints from random internal nodes, ages within +/- accuracy%."""
    internals = tree.internal_nodes()
    if not 1 <= count <= len(internals):
        raise SimulationError(f"clade count must lie in 1..{len(internals)}")
    chosen = rng.choice(len(internals), size=count, replace=False)
    clades = []
    for idx, i in enumerate(sorted(int(c) for c in chosen), start=1):
        v = internals[i]
        t = tree.age[v]
        taxa = frozenset(tree.leaf_names[u] for u in tree.leafset(v))
        clades.append(CladeConstraint(
            name=f"clade_{idx}", taxa=taxa,
            rootmin=(1.0 - accuracy / 100.0) * t,
            rootmax=(1.0 + accuracy / 100.0) * t))
    return clades


def synthesize(cfg: SynthConfig, rng=None):
    """Full synthesis: tree, traits, observation model, clades.

    Returns (matrix, tree, clades, truth).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    tree = cfg.tree
    if tree is None:
        tree = random_exponential_tree(cfg.n_leaves, cfg.theta, rng)
    sim = simulate_traits(tree, cfg, rng)
    matrix = apply_observation_model(sim, cfg, rng)
    clades = []
    if cfg.n_clades:
        clades = synthesize_clades(sim.tree, cfg.n_clades, cfg.clade_accuracy, rng)
    return matrix, sim.tree, clades, sim.truth


def _synth_params(cfg: SynthConfig, truth: dict) -> dict:
    out = {"K": cfg.K, "Psi": cfg.psi, "Mu": truth["mu"], "Lambda": truth["lambda"],
           "Root_age": truth["root_age"]}
    if cfg.rho is not None:
        out["Rho"] = cfg.rho
    if cfg.kappa is not None:
        out["Kappa"] = cfg.kappa
    if cfg.sigma:
        out["Branch_rate_sd"] = cfg.sigma
    if cfg.n_classes is not None:
        out["Classes"] = cfg.n_classes
        if cfg.varsigma:
            out["Class_rate_sd"] = cfg.varsigma
    if cfg.borrow_rate:
        out["Borrow_rate"] = cfg.borrow_rate
        if cfg.borrow_dist is not None:
            out["Borrow_distance"] = cfg.borrow_dist
    out["Missing"] = int(cfg.missing)
    out["Remove_rare"] = int(cfg.remove_rare)
    if cfg.seed is not None:
        out["Seed"] = cfg.seed
    return out


def write_synthetic(path: str, matrix: TraitMatrix, tree: Tree, cfg: SynthConfig,
                    truth: dict, clades=()):
    """Write the synthetic Nexus file and its record-keeping .par sidecar."""
    params = _synth_params(cfg, truth)
    with open(path, "w") as f:
        f.write(write_data_nexus(matrix, clades=clades, tree=tree,
                                 synthesize_params=params))
    stem = path[:-4] if path.endswith(".nex") else path
    with open(stem + ".par", "w") as f:
        for k, v in params.items():
            f.write(f"{k} = {v}\n")
