import numpy as np
import pytest

from dollo.parfile import ParError, RunConfig, parse_par, write_par


def random_config(rng) -> RunConfig:
    coupled = bool(rng.integers(2))
    j = int(rng.integers(1, 20))
    prior = "uniform_root" if rng.integers(2) else "exponential"
    return RunConfig(
        data_path=f"data_{rng.integers(100)}.nex",
        output_stem=f"out{rng.integers(10)}",
        omitted_taxa=tuple(sorted(set(map(int, rng.integers(1, 30, size=3))))),
        omitted_traits=tuple(sorted(set(map(int, rng.integers(1, 300, size=4))))),
        start_tree="random",
        theta=float(rng.uniform(1e-4, 1e-2)),
        tree_prior=prior,
        max_root_age=float(rng.uniform(1000, 20000)) if prior == "uniform_root" else None,
        topology_uniform=bool(rng.integers(2)),
        vary_topology=bool(rng.integers(2)),
        account_rare_traits=bool(rng.integers(2)),
        model_missing=bool(rng.integers(2)),
        vary_loss_rate=bool(rng.integers(2)),
        initial_loss_rate=float(rng.uniform(0.05, 0.9)),
        catastrophes=bool(rng.integers(2)),
        vary_kappa=bool(rng.integers(2)),
        initial_kappa=float(rng.uniform(0.3, 0.9)),
        rho_marginalized=bool(rng.integers(2)),
        initial_rho=float(rng.uniform(1e-5, 1e-3)),
        ignore_clades=tuple(sorted(set(map(int, rng.integers(1, 8, size=2))))),
        run_length=int(rng.integers(1, 50)) * j * 10,
        sample_interval=j,
        seed=int(rng.integers(1, 2 ** 31)),
        coupled=coupled,
        coupling_lag=int(rng.integers(1, 5)) * j if coupled else 0,
        move_weights={8: float(rng.uniform(0.5, 2.0))},
        move_scales={6: float(rng.uniform(0.05, 0.5))},
    )


def test_round_trip_randomized():
    rng = np.random.default_rng(7)
    for _ in range(100):
        cfg = random_config(rng)
        assert parse_par(write_par(cfg)) == cfg


def test_coupled_keys():
    cfg = parse_par(
        "Data_file_path = d.nex\nTree_prior = exponential\n"
        "Coupled_markov_chains = 1\nCoupling_lag = 5000\nSample_interval = 100\n"
        "Run_length = 20000\n")
    assert cfg.coupled and cfg.coupling_lag == 5000


def test_lag_not_multiple_is_error():
    with pytest.raises(ParError, match="multiple"):
        parse_par("Data_file_path = d.nex\nTree_prior = exponential\n"
                  "Coupled_markov_chains = 1\nCoupling_lag = 150\n"
                  "Sample_interval = 100\nRun_length = 1000\n")


def test_missing_mandatory_key():
    with pytest.raises(ParError, match="Data_file_path"):
        parse_par("Run_length = 100\nSample_interval = 10\n")


def test_uniform_prior_needs_max_root_age():
    with pytest.raises(ParError, match="Max_root_age"):
        parse_par("Data_file_path = d.nex\nTree_prior = uniform_root\n")


def test_unknown_key_warns_not_errors():
    with pytest.warns(UserWarning, match="Future_option"):
        cfg = parse_par("Data_file_path = d.nex\nTree_prior = exponential\n"
                        "Future_option = 1\n")
    assert cfg.data_path == "d.nex"


def test_kappa_initialization_semantics():
    base = ("Data_file_path = d.nex\nTree_prior = exponential\n"
            "Include_catastrophes = 1\n")
    cfg = parse_par(base + "Random_initial_cat_death_prob = 1\n")
    assert cfg.vary_kappa
    cfg = parse_par(base + "Random_initial_cat_death_prob = 0\n"
                    "Initial_cat_death_prob = 0.61\n")
    assert not cfg.vary_kappa and cfg.initial_kappa == 0.61
    cfg = parse_par(base + "Random_initial_cat_rate = 0\nInitial_cat_rate = 3e-4\n")
    assert not cfg.rho_marginalized and cfg.initial_rho == 3e-4


def test_index_list_syntax():
    cfg = parse_par("Data_file_path = d.nex\nTree_prior = exponential\n"
                    "Omit_taxa = 1 10:13, 20\n")
    assert cfg.omitted_taxa == (1, 10, 11, 12, 13, 20)


def test_real_valued_seed_entropy():
    cfg = parse_par("Data_file_path = d.nex\nTree_prior = exponential\n"
                    "Seed_random_numbers = 1.5\n")
    assert cfg.seed == 1.5
    e = cfg.seed_entropy()
    assert isinstance(e, int) and e == cfg.seed_entropy()
    cfg2 = parse_par(write_par(cfg))
    assert cfg2.seed == 1.5
