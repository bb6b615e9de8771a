import math
import os
import re

import numpy as np
import pytest
from scipy.stats import chisquare, kstest

import dollo.mcmc as mc
from dollo.likelihood import PatternTable, tabulate_patterns
from dollo.nexus import parse_nexus, read_trace, write_data_nexus
from dollo.parfile import RunConfig
from dollo.priors import RHO_RATE, RHO_SHAPE
from dollo.trees import (CladeConstraint, ConstraintSet, Tree,
                         random_exponential_tree, validate)


def empty_table(L=0):
    return PatternTable(patterns=np.empty((0, L), dtype=np.int8),
                        counts=np.empty(0, dtype=np.int64), taxa_names=())


def prior_model(T=10.0, **kw):
    return mc.Model(table=empty_table(), constraints=ConstraintSet([], T),
                    vary_mu=False, **kw)


def fresh_state(L, rng, theta=1.0, mu=0.5, kappa=None, T=10.0):
    tree = random_exponential_tree(L, theta, rng)
    while tree.age[tree.root] >= T:
        tree = random_exponential_tree(L, theta, rng)
    return mc.ChainState(tree=tree, mu=mu, kappa=kappa, xi=np.ones(L))


def synthetic_model(rng, L=4, n=40, T=40.0, **kw):
    tree = random_exponential_tree(L, 0.2, rng)
    cells = (rng.random((L, n)) < 0.5).astype(np.int8)
    cells[:, 0] = 1
    from dollo.nexus import TraitMatrix
    m = TraitMatrix(taxa_names=[f"taxon_{i}" for i in range(1, L + 1)], cells=cells)
    table = tabulate_patterns(m)
    return mc.Model(table=table, constraints=ConstraintSet([], T), **kw)


# -- individual moves ---------------------------------------------------------

def test_multiplier_exact_acceptance_for_reciprocal_target(rng):
    # under pi(mu) ~ 1/mu the posterior ratio is -log m and the Hastings
    # correction +log m: every proposal accepts
    state = fresh_state(3, rng)
    for _ in range(200):
        cand, loghr = mc.propose(8, state, prior_model(), rng)
        m = cand.mu / state.mu
        assert loghr == pytest.approx(math.log(m), rel=1e-12)
        delta_logpi = -math.log(cand.mu) + math.log(state.mu)
        assert delta_logpi + loghr == pytest.approx(0.0, abs=1e-12)


def test_move1_two_leaf_uniform(rng):
    model = prior_model()
    state = mc.evaluate(fresh_state(2, rng, T=10.0), model)
    draws = []
    for _ in range(3000):
        state = mc.step(state, model, rng, move_id=1)
        draws.append(state.tree.age[state.tree.root])
    assert kstest(draws[200:], "uniform", args=(0, 10)).pvalue > 0.01


def test_move17_always_accepts(rng):
    model = synthetic_model(rng, catastrophes=True)
    state = fresh_state(4, rng, T=40.0, kappa=0.6)
    e = state.tree.edges()[1]
    state.tree.cats[e] = [0.3, 0.7]
    mc.evaluate(state, model)
    for _ in range(50):
        out = mc.propose(17, state, model, rng)
        cand, loghr = out
        mc.evaluate(cand, model)
        assert loghr == 0.0
        assert cand.log_post == pytest.approx(state.log_post, rel=1e-12)


def test_fixed_topology_keeps_shape(rng):
    model = synthetic_model(rng, vary_topology=False)
    assert set(mc.enabled_moves(model, 4)) == {1, 6, 7, 8}
    state = mc.evaluate(fresh_state(4, rng, T=40.0), model)
    shape = frozenset(state.tree.leafsets().values())
    for _ in range(2000):
        state = mc.step(state, model, rng)
    assert frozenset(state.tree.leafsets().values()) == shape


def test_enabled_moves_coupled_drops_rescalings(rng):
    model = synthetic_model(rng, catastrophes=True, model_missing=True,
                            coupled=True)
    moves = mc.enabled_moves(model, 4)
    assert not {6, 7, 12} & set(moves)
    assert {1, 2, 3, 4, 5, 8, 13, 14, 15, 16, 17, 18, 19, 20} <= set(moves)


def test_unknown_move_rejected(rng):
    with pytest.raises(mc.RunError):
        mc.propose(9, fresh_state(3, rng), prior_model(), rng)


def test_invalid_candidate_always_rejected(rng):
    clade = CladeConstraint("c", frozenset({"taxon_1", "taxon_2"}), rootmax=1.0)
    model = mc.Model(table=empty_table(), vary_mu=False,
                     constraints=ConstraintSet([clade], 10.0))
    rng2 = np.random.default_rng(5)
    tree = None
    while tree is None:
        cand = random_exponential_tree(4, 1.0, rng2)
        if not validate(cand, model.constraints):
            tree = cand
    state = mc.evaluate(mc.ChainState(tree=tree, mu=0.5, kappa=None,
                                      xi=np.ones(4)), model)
    # force the clade root to its cap so upward age proposals must reject
    for _ in range(500):
        new = mc.step(state, model, rng, move_id=1)
        assert validate(new.tree, model.constraints) == []
        state = new


def test_moves_preserve_tree_invariants(rng):
    model = synthetic_model(rng, L=5, catastrophes=True, model_missing=True)
    state = fresh_state(5, rng, T=40.0, kappa=0.5)
    state.xi = np.full(5, 0.8)
    mc.evaluate(state, model)
    root = state.tree.root
    for _ in range(4000):
        state = mc.step(state, model, rng)
    t = state.tree
    assert t.root == root
    assert t.n_leaves == 5
    assert len(t.edges()) == 8
    assert all(len(t.children[v]) == 2 for v in t.internal_nodes())
    assert validate(t, ConstraintSet()) == []
    assert all(0.0 < q < 1.0 for e in t.parent for q in t.cats[e])
    # cached posterior stays consistent with a fresh evaluation
    cached = state.log_post
    fresh = mc.evaluate(mc.ChainState(tree=state.tree, mu=state.mu,
                                      kappa=state.kappa, xi=state.xi), model)
    assert cached == pytest.approx(fresh.log_post, rel=1e-9)


def test_catastrophe_total_count_targets_negative_binomial(rng):
    # with the tree fixed, moves 13/14/15/17/18 must leave the marginalized
    # count prior invariant; the total count is then NB(a, |g|/(b+|g|))
    model = prior_model(T=None, tree_prior="exponential", catastrophes=True,
                        vary_kappa=False, vary_topology=False)
    tree = random_exponential_tree(3, 0.001, rng)
    state = mc.evaluate(mc.ChainState(tree=tree, mu=5e-4, kappa=0.7,
                                      xi=np.ones(3)), model)
    g = sum(tree.edge_length(e) for e in tree.edges())
    q = g / (RHO_RATE + g)
    counts = np.zeros(60, dtype=int)
    move_pool = [13, 14, 15, 17, 18]
    for i in range(120_000):
        mid = move_pool[int(rng.integers(5))]
        state = mc.step(state, model, rng, move_id=mid)
        if i % 10 == 0:
            counts[min(state.tree.total_cats(), 59)] += 1
    ks = np.arange(60)
    from dollo.priors import conditional_count_logpmf
    pmf = np.exp([conditional_count_logpmf(int(k), RHO_SHAPE, q) for k in ks])
    pmf[-1] = 1.0 - pmf[:-1].sum()
    keep = pmf * counts.sum() >= 5
    stat = chisquare(counts[keep], pmf[keep] / pmf[keep].sum() * counts[keep].sum())
    assert stat.pvalue > 0.005


def test_topology_moves_preserve_catastrophe_marginals():
    """SPR surgery remaps catastrophe positions (merge/split of edges); its
    Jacobian must keep the count and length marginals of the prior intact, so
    chains with topology moves on and off have to agree."""
    from dollo.trees import tree_length

    def run_chain(vary_topology, seed):
        model = mc.Model(table=empty_table(),
                         constraints=ConstraintSet([], 8000.0),
                         vary_mu=False, catastrophes=True, vary_kappa=False,
                         vary_topology=vary_topology)
        rng = np.random.default_rng(seed)
        tree = random_exponential_tree(4, 1 / 800.0, rng)
        while tree.age[tree.root] >= 8000.0:
            tree = random_exponential_tree(4, 1 / 800.0, rng)
        state = mc.evaluate(mc.ChainState(tree=tree, mu=5e-4, kappa=0.7,
                                          xi=np.ones(4)), model)
        Ks, Gs = [], []
        for i in range(600_000):
            state = mc.step(state, model, rng)
            if i % 300 == 0:
                Ks.append(state.tree.total_cats())
                Gs.append(tree_length(state.tree))
        return np.array(Ks[100:]), np.array(Gs[100:])

    from scipy.stats import ks_2samp
    Ka, Ga = run_chain(False, 1)
    Kb, Gb = run_chain(True, 2)
    assert ks_2samp(Ka, Kb).pvalue > 0.005
    assert ks_2samp(Ga, Gb).pvalue > 0.005


def test_spr_moves_mix_topologies(rng):
    model = prior_model(T=20.0)
    state = mc.evaluate(fresh_state(5, rng, T=20.0), model)
    seen = set()
    for _ in range(3000):
        mid = (4, 5)[int(rng.integers(2))]
        state = mc.step(state, model, rng, move_id=mid)
        seen.add(frozenset(state.tree.leafsets().values()))
    assert len(seen) > 10


def test_beta_move_dormant(rng):
    state = fresh_state(3, rng)
    assert mc.propose(21, state, prior_model(), rng) is None
    state.beta = 2e-4
    cand, loghr = mc.propose(21, state, prior_model(), rng)
    assert cand.beta != state.beta


# -- monitoring ----------------------------------------------------------------

def test_monitor_line_format():
    stats = mc.MoveStats()
    stats.proposed[1] = 3
    stats.accepted[1] = 1
    line = mc.monitor_line(5, -3550.4868039, stats)
    assert line.startswith("(5,-3550.486804) 0.33 ")
    assert "NaN" in line
    assert len(line.split()) == 1 + len(mc.MOVE_IDS)


def test_move_stats_nan_iff_unproposed():
    stats = mc.MoveStats()
    stats.proposed[8] = 4
    stats.accepted[8] = 4
    fr = stats.fractions()
    assert fr[8] == 1.0
    assert all(math.isnan(fr[m]) for m in mc.MOVE_IDS if m != 8)


# -- run orchestration ---------------------------------------------------------

@pytest.fixture
def small_data(tmp_path, rng):
    cells = (rng.random((4, 30)) < 0.45).astype(np.int8)
    cells[:, 0] = 1
    from dollo.nexus import TraitMatrix
    m = TraitMatrix(taxa_names=["w", "x", "y", "z"], cells=cells)
    path = tmp_path / "data.nex"
    path.write_text(write_data_nexus(m))
    return str(path)


def run_config(small_data, tmp_path, **kw):
    base = dict(data_path=small_data, output_stem=str(tmp_path / "out"),
                run_length=500, sample_interval=100, max_root_age=50.0,
                theta=0.05, seed=11)
    base.update(kw)
    return RunConfig(**base)


def test_run_sample_count_and_files(small_data, tmp_path):
    cfg = run_config(small_data, tmp_path, run_length=5000, sample_interval=100)
    res = mc.run(cfg, quiet=True)
    assert len(res.trace) == 5000 // 100 + 1
    trace = read_trace(res.paths["trace"])
    assert len(trace["sample"]) == 51
    assert trace["sample"][1] == 100
    for key in ("trace", "trees", "cats", "par"):
        assert os.path.exists(res.paths[key])
    assert "xi" not in res.paths
    with open(res.paths["trees"]) as f:
        assert sum(1 for line in f if line.startswith("TREE ")) == 51
    # catastrophes are off: kappa and rho columns hold NaN
    assert np.isnan(trace["kappa"]).all()
    assert np.isnan(trace["rho"]).all()


def test_run_xi_file_only_when_missing_modelled(small_data, tmp_path, rng):
    cells = np.array([[1, 2, 1], [1, 1, 2], [0, 1, 1]], dtype=np.int8)
    from dollo.nexus import TraitMatrix
    m = TraitMatrix(taxa_names=["a", "b", "c"], cells=cells)
    path = tmp_path / "mdata.nex"
    path.write_text(write_data_nexus(m))
    cfg = run_config(str(path), tmp_path, model_missing=True,
                     output_stem=str(tmp_path / "mis"))
    res = mc.run(cfg, quiet=True)
    assert os.path.exists(res.paths["xi"])


def test_run_monitoring_lines(small_data, tmp_path, capsys):
    cfg = run_config(small_data, tmp_path, run_length=200, sample_interval=100)
    mc.run(cfg)
    lines = [l for l in capsys.readouterr().out.splitlines()
             if l.startswith("(")]
    assert len(lines) == 3
    assert re.match(r"^\(\d+,-?\d+\.\d{6}\)( (\d\.\d{2}|NaN))+$", lines[-1])


def test_run_seeded_determinism(small_data, tmp_path):
    cfg1 = run_config(small_data, tmp_path, output_stem=str(tmp_path / "a"))
    cfg2 = run_config(small_data, tmp_path, output_stem=str(tmp_path / "b"))
    r1 = mc.run(cfg1, quiet=True)
    r2 = mc.run(cfg2, quiet=True)
    t1 = open(r1.paths["trace"]).read().splitlines()[1:]
    t2 = open(r2.paths["trace"]).read().splitlines()[1:]
    assert t1 == t2
    n1 = open(r1.paths["trees"]).read()
    n2 = open(r2.paths["trees"]).read()
    assert n1 == n2


def test_run_unseeded_records_drawn_seed(small_data, tmp_path):
    cfg = run_config(small_data, tmp_path, seed=None, run_length=100)
    res = mc.run(cfg, quiet=True)
    from dollo.parfile import read_par
    echoed = read_par(res.paths["par"])
    assert echoed.seed is not None


def test_restart_from_output_reproduces_posterior(small_data, tmp_path, rng):
    cfg = run_config(small_data, tmp_path, catastrophes=True,
                     output_stem=str(tmp_path / "first"))
    res = mc.run(cfg, quiet=True)
    idx = 3
    cfg2 = run_config(small_data, tmp_path, catastrophes=True,
                      start_tree="output",
                      initial_tree_file=str(tmp_path / "first"),
                      initial_tree_index=idx + 1,
                      output_stem=str(tmp_path / "second"))
    parsed = parse_nexus(open(small_data).read())
    prepared = mc.prepare_run(cfg2, parsed)
    state = mc.evaluate(mc.initial_state(cfg2, prepared, parsed,
                                         np.random.default_rng(0)),
                        prepared.model)
    want = res.trace[idx].log_prior + res.trace[idx].log_likelihood
    assert state.log_post == pytest.approx(want, rel=1e-9)


def test_run_rejects_invalid_initial_tree(small_data, tmp_path):
    cfg = run_config(small_data, tmp_path, output_stem=str(tmp_path / "f1"))
    mc.run(cfg, quiet=True)
    # impose a clade the saved tree violates, with its ages beyond reach
    parsed = parse_nexus(open(small_data).read())
    clade = CladeConstraint("tight", frozenset({"w", "x"}),
                            rootmin=45.0, rootmax=46.0)
    parsed.clades.append(clade)
    cfg2 = run_config(small_data, tmp_path, start_tree="output",
                      initial_tree_file=str(tmp_path / "f1"),
                      initial_tree_index=1,
                      output_stem=str(tmp_path / "f2"))
    with pytest.raises(mc.RunError, match="constraint"):
        mc.run(cfg2, parsed, quiet=True)


def test_prepare_run_clade_omission_rules(small_data):
    parsed = parse_nexus(open(small_data).read())
    parsed.clades = [CladeConstraint("pair", frozenset({"w", "x"})),
                     CladeConstraint("solo", frozenset({"x"}))]
    cfg = RunConfig(data_path=small_data, omitted_taxa=(2,),  # drops "x"
                    tree_prior="exponential", run_length=100,
                    sample_interval=10)
    prep = mc.prepare_run(cfg, parsed)
    names = [c.name for c in prep.constraints]
    assert names == ["pair"]            # solo lost its only taxon
    (pair,) = [c for c in prep.constraints if c.name == "pair"]
    assert pair.taxa == frozenset({"w"})
    assert any("reduced" in n for n in prep.notes)
    assert any("dropped" in n for n in prep.notes)


def test_prior_chain_root_age_uniform_L4(rng):
    # quick stationarity smoke: the thorough L=6/ESS version lives in the
    # acceptance suite (near-zero root ages are sticky, so it needs long runs)
    model = prior_model(T=10.0)
    state = mc.evaluate(fresh_state(4, rng, theta=1.0, T=10.0), model)
    ages = []
    for i in range(400_000):
        state = mc.step(state, model, rng)
        if i % 250 == 0:
            ages.append(state.tree.age[state.tree.root])
    assert kstest(ages[100:], "uniform", args=(0, 10)).pvalue > 0.01


def test_exchange_kernels_exactly_symmetric():
    """With ages pinned, the exchange moves' topology kernels must be doubly
    stochastic: enumerate every (choice) outcome on all consistent 4-leaf
    id-labelled topologies and compare K with its transpose."""
    import itertools

    ages = {1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0, 5: 1.0, 6: 2.0, 7: 3.0}
    names = {i: f"t{i}" for i in range(1, 5)}
    model = prior_model(T=10.0)

    def all_topologies():
        out = []
        for pa in itertools.product([5, 6, 7], repeat=6):
            links = dict(zip([1, 2, 3, 4, 5, 6], pa))
            if links[5] == 5 or links[6] == 6:
                continue
            counts = {5: 0, 6: 0, 7: 0}
            if any(ages[p] <= ages[n] for n, p in links.items()):
                continue
            for p in links.values():
                counts[p] += 1
            if counts != {5: 2, 6: 2, 7: 2}:
                continue

            def reaches_root(n):
                seen = set()
                while n in links:
                    if n in seen:
                        return False
                    seen.add(n)
                    n = links[n]
                return n == 7

            if reaches_root(5) and reaches_root(6):
                out.append(frozenset(links.items()))
        return out

    topos = all_topologies()
    index = {t: i for i, t in enumerate(topos)}
    assert len(topos) == 18

    for move_id in (2, 3):
        K = np.zeros((len(topos), len(topos)))
        for t, i in index.items():
            state = mc.ChainState(tree=Tree.from_links(dict(t), ages, names),
                                  mu=0.5, kappa=None, xi=np.ones(4))

            def explore(feeds, prob):
                gen = mc.MOVES[move_id](state, model)
                try:
                    req = next(gen)
                    for f in feeds:
                        req = gen.send(f)
                except StopIteration as stop:
                    if stop.value is None:
                        K[i, i] += prob
                    else:
                        cand, loghr = stop.value
                        assert loghr == 0.0
                        j = index[frozenset(cand.tree.parent.items())]
                        K[i, j] += prob
                    return
                assert req[0] == "choice"
                for item in req[1]:
                    explore(feeds + [item], prob / len(req[1]))

            explore([], 1.0)
        assert np.allclose(K.sum(axis=1), 1.0)
        assert np.abs(K - K.T).max() < 1e-14
