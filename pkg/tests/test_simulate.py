import math

import numpy as np
import pytest
from scipy.stats import chi2, ks_2samp

from dollo.likelihood import (ABSENT, MISSING, PRESENT, LikelihoodParams,
                              pattern_log_intensities, registered_normalizer)
from dollo.nexus import parse_nexus
from dollo.simulate import (SimulationError, SynthConfig,
                            apply_observation_model, draw_catastrophes,
                            simulate_traits, synthesize, synthesize_clades,
                            write_synthetic)
from dollo.trees import Tree, random_exponential_tree, validate, ConstraintSet


def fixed_tree(scale=1000.0):
    links = {1: 5, 2: 5, 5: 7, 3: 6, 4: 6, 6: 7}
    ages = {1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0, 5: 0.6 * scale, 6: 0.9 * scale,
            7: 1.5 * scale}
    return Tree.from_links(links, ages, {i: f"t{i}" for i in range(1, 5)})


def test_mean_traits_per_leaf(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=30.0, psi=0.3)
    per_leaf = []
    for _ in range(400):
        sim = simulate_traits(tree, cfg, rng)
        per_leaf.append(sim.presence.sum(axis=1).mean())
    per_leaf = np.asarray(per_leaf)
    se = per_leaf.std(ddof=1) / math.sqrt(len(per_leaf))
    assert abs(per_leaf.mean() - 30.0) < 3 * se


def test_leaf_counts_poisson_dispersion(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=20.0, psi=0.3)
    counts = []
    for _ in range(600):
        sim = simulate_traits(tree, cfg, rng)
        counts.append(sim.presence[0].sum())
    counts = np.asarray(counts, dtype=float)
    # index of dispersion: (n-1) s^2 / mean ~ chi2(n-1) under Poisson
    n = len(counts)
    stat = (n - 1) * counts.var(ddof=1) / counts.mean()
    p = 2 * min(chi2.cdf(stat, n - 1), chi2.sf(stat, n - 1))
    assert p > 0.01


def test_certain_death_catastrophe(rng):
    tree = fixed_tree()
    tree.cats[5] = [0.5]        # on the edge into node 5 = ancestor of t1,t2
    cfg = SynthConfig(tree=tree, K=30.0, psi=0.3, kappa=1.0)
    sim = simulate_traits(tree, cfg, rng)
    below = sim.presence[:2].any(axis=0)    # rows of t1, t2
    outside = sim.presence[2:].any(axis=0)
    # no trait can survive the kappa=1 catastrophe, so nothing is shared
    # between the subtree below it and the rest of the tree
    assert not np.any(below & outside)
    assert below.sum() > 0                  # catastrophe births repopulate


def test_pattern_frequencies_match_intensities(rng):
    tree = fixed_tree(scale=1.0)
    mu = 1.0
    psi = -math.expm1(-1000.0 * mu)  # psi giving mu=1 exactly is 1-e^-1000; use direct config
    cfg = SynthConfig(tree=tree, K=400.0, psi=0.632)  # mu ~ 1e-3
    # work at the simulator scale: mu = -log(1-psi)/1000
    mu = cfg.mu
    counts = {}
    total_sims = 120
    for _ in range(total_sims):
        sim = simulate_traits(tree, cfg, rng)
        cols = np.where(sim.presence, PRESENT, ABSENT).T
        keep = cols.any(axis=1)
        for col in cols[keep]:
            key = tuple(int(c) for c in col)
            counts[key] = counts.get(key, 0) + 1
    n_total = sum(counts.values())
    params = LikelihoodParams(mu=mu, xi=np.ones(4), d=1)
    Z = registered_normalizer(tree, params)
    pats = np.asarray(sorted(counts), dtype=np.int8)
    logz = pattern_log_intensities(tree, params, pats)
    probs = np.exp(logz) / Z
    for pat, prob in zip(sorted(counts), probs):
        obs = counts[pat]
        sd = math.sqrt(n_total * prob * (1 - prob))
        assert abs(obs - n_total * prob) < 4 * sd + 1e-9, (pat, obs, n_total * prob)


def test_observation_model_missing_off(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=10.0, psi=0.3)
    sim = simulate_traits(tree, cfg, rng)
    raw_cols = sim.presence.any(axis=0).sum()
    matrix = apply_observation_model(sim, cfg, rng)
    assert matrix.n_traits == raw_cols
    assert not np.any(matrix.cells == MISSING)


def test_observation_model_xi_beta_moments(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=5.0, psi=0.3, missing=True)
    draws = []
    for _ in range(3000):
        sim = simulate_traits(tree, cfg, rng)
        apply_observation_model(sim, cfg, rng)
        draws.extend(sim.truth["xi"])
    draws = np.asarray(draws)
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - 0.75) < 3 * se


def test_remove_rare_all_singletons(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=2.0, psi=0.3, remove_rare=True)
    sim = simulate_traits(tree, cfg, rng)
    # craft a presence matrix of singletons only
    sim.presence = np.eye(4, dtype=bool)
    sim.classes = np.zeros(4, dtype=int)
    matrix = apply_observation_model(sim, cfg, rng)
    assert matrix.n_traits == 0


def test_no_empty_field_postcondition(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=30.0, psi=0.3, n_classes=3)
    sim = simulate_traits(tree, cfg, rng)
    for c in range(3):
        block = sim.presence[:, sim.classes == c]
        assert block.any(axis=1).all()      # every leaf shows every class


def test_no_empty_field_budget_error(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=1.0, psi=0.95, n_classes=8, nef_budget=5)
    with pytest.raises(SimulationError, match="budget"):
        simulate_traits(tree, cfg, rng)


def test_nef_missing_masks_blocks(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=40.0, psi=0.3, n_classes=2, missing=True)
    any_block_missing = False
    for _ in range(10):
        sim = simulate_traits(tree, cfg, rng)
        matrix = apply_observation_model(sim, cfg, rng)
        classes = sim.truth["kept_classes"]
        for i in range(4):
            for c in (0, 1):
                block = matrix.cells[i, classes == c]
                missing = block == MISSING
                assert missing.all() or not missing.any()
                any_block_missing |= bool(missing.any())
    assert any_block_missing


def test_classes_survive_observation_alignment(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=40.0, psi=0.3, n_classes=2, missing=True)
    sim = simulate_traits(tree, cfg, rng)
    L, N = sim.presence.shape
    cells = np.where(sim.presence, PRESENT, ABSENT).astype(np.int8)
    xi = np.full(L, 0.5)
    block_mask = rng.random((L, 2)) > xi[:, None]
    mask = block_mask[:, sim.classes]
    cells[mask] = MISSING
    for i in range(L):
        for c in (0, 1):
            block = cells[i, sim.classes == c]
            assert (block == MISSING).all() or not (block == MISSING).any()


def test_synthesize_clades_bounds(rng):
    tree = fixed_tree()
    clades = synthesize_clades(tree, count=3, accuracy=10.0, rng=rng)
    assert len(clades) == 3
    for c in clades:
        node_age = c.rootmin / 0.9
        assert c.rootmax == pytest.approx(node_age * 1.1)
    assert validate(tree, ConstraintSet(clades, max_root_age=1e5)) == []
    exact = synthesize_clades(tree, count=1, accuracy=0.0, rng=rng)[0]
    assert exact.rootmin == exact.rootmax
    with pytest.raises(SimulationError):
        synthesize_clades(tree, count=9, accuracy=10.0, rng=rng)


def test_draw_catastrophes_rate(rng):
    tree = fixed_tree(scale=5000.0)
    total_len = sum(tree.edge_length(e) for e in tree.edges())
    counts = [draw_catastrophes(tree, 2e-4, rng).total_cats() for _ in range(2000)]
    mean = np.mean(counts)
    se = np.std(counts, ddof=1) / math.sqrt(len(counts))
    assert abs(mean - 2e-4 * total_len) < 3 * se


def test_write_synthetic_round_trip(tmp_path, rng):
    cfg = SynthConfig(n_leaves=5, theta=0.001, K=15.0, psi=0.4, rho=1e-4,
                      kappa=0.6, n_clades=2, seed=77)
    matrix, tree, clades, truth = synthesize(cfg)
    path = str(tmp_path / "synth.nex")
    write_synthetic(path, matrix, tree, cfg, truth, clades)
    parsed = parse_nexus(open(path).read())
    assert parsed.is_synthetic
    assert np.array_equal(parsed.matrix.cells, matrix.cells)
    assert parsed.matrix.taxa_names == matrix.taxa_names
    assert len(parsed.clades) == 2
    assert float(parsed.synthesize_params["K"]) == 15.0
    assert float(parsed.synthesize_params["Psi"]) == 0.4
    assert (tmp_path / "synth.par").exists()
    # embedded tree preserves the generating topology and catastrophe counts
    emb = parsed.embedded_tree
    assert sorted(emb.leaf_names.values()) == sorted(tree.leaf_names.values())
    assert emb.total_cats() == tree.total_cats()


def test_local_borrowing_zero_distance_matches_none(rng):
    tree = fixed_tree()
    shared_none, shared_zero = [], []
    for _ in range(150):
        cfg0 = SynthConfig(tree=tree, K=8.0, psi=0.4)
        sim0 = simulate_traits(tree, cfg0, rng)
        shared_none.append(sim0.presence.sum())
        cfgz = SynthConfig(tree=tree, K=8.0, psi=0.4, borrow_rate=1.0,
                           borrow_dist=0.0)
        simz = simulate_traits(tree, cfgz, rng)
        shared_zero.append(simz.presence.sum())
    assert ks_2samp(shared_none, shared_zero).pvalue > 0.01


def test_global_borrowing_increases_cross_clade_sharing(rng):
    tree = fixed_tree()

    def cross_sharing(b):
        out = 0
        for _ in range(120):
            cfg = SynthConfig(tree=tree, K=8.0, psi=0.4, borrow_rate=b)
            sim = simulate_traits(tree, cfg, rng)
            left = sim.presence[:2].any(axis=0)   # clade {t1,t2}
            right = sim.presence[2:].any(axis=0)  # clade {t3,t4}
            out += int((left & right).sum())
        return out

    assert cross_sharing(3.0) > 1.3 * cross_sharing(0.0)


def test_branch_and_class_heterogeneity_run(rng):
    tree = fixed_tree()
    cfg = SynthConfig(tree=tree, K=12.0, psi=0.4, sigma=0.5, n_classes=2,
                      varsigma=0.4)
    sim = simulate_traits(tree, cfg, rng)
    assert sim.presence.shape[0] == 4
    assert set(np.unique(sim.classes)) <= {0, 1}


def test_borrowing_with_catastrophes_runs(rng):
    tree = fixed_tree()
    tree.cats[5] = [0.4]
    cfg = SynthConfig(tree=tree, K=6.0, psi=0.4, kappa=0.7, borrow_rate=0.5)
    sim = simulate_traits(tree, cfg, rng)
    assert sim.presence.shape[0] == 4
