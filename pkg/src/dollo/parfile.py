"""Run configuration: the .par key=value format and its round-trip."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, asdict


class ParError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; mirrors the .par file keys."""

    data_path: str
    output_stem: str = "tloutput"
    omitted_taxa: tuple = ()
    omitted_traits: tuple = ()
    start_tree: str = "random"            # random | output | true
    initial_tree_file: str | None = None
    initial_tree_index: int = 1
    theta: float = 0.001
    tree_prior: str = "uniform_root"      # uniform_root | exponential
    max_root_age: float | None = None
    topology_uniform: bool = False
    vary_topology: bool = True
    account_rare_traits: bool = True
    model_missing: bool = False
    vary_loss_rate: bool = True
    initial_loss_rate: float = 0.5
    catastrophes: bool = False
    vary_kappa: bool = True
    initial_kappa: float = 0.5
    rho_marginalized: bool = True
    initial_rho: float = 2e-4
    impose_clades: bool = True
    ignore_clades: tuple = ()
    ignore_clade_ages: tuple = ()
    run_length: int = 5000
    sample_interval: int = 100
    seed: float | None = None
    coupled: bool = False
    coupling_lag: int = 0
    move_weights: dict = field(default_factory=dict)
    move_scales: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omitted_taxa = tuple(self.omitted_taxa)
        self.omitted_traits = tuple(self.omitted_traits)
        self.ignore_clades = tuple(self.ignore_clades)
        self.ignore_clade_ages = tuple(self.ignore_clade_ages)
        if self.sample_interval < 1:
            raise ParError("Sample_interval must be at least 1")
        if self.run_length < self.sample_interval:
            raise ParError("Run_length must be at least Sample_interval")
        if self.start_tree not in ("random", "output", "true"):
            raise ParError(f"unknown Start_tree value {self.start_tree!r}")
        if self.tree_prior not in ("uniform_root", "exponential"):
            raise ParError(f"unknown Tree_prior value {self.tree_prior!r}")
        if self.tree_prior == "uniform_root" and self.max_root_age is None:
            raise ParError("the uniform-root tree prior needs Max_root_age")
        if not 0.0 < self.initial_loss_rate < 1.0:
            raise ParError("Initial_loss_rate must lie strictly between 0 and 1")
        if self.coupled:
            if self.coupling_lag <= 0:
                raise ParError("coupled runs need a positive Coupling_lag")
            if self.coupling_lag % self.sample_interval != 0:
                raise ParError("Coupling_lag must be an integer multiple of "
                               "Sample_interval")
        if self.start_tree == "output" and not self.initial_tree_file:
            raise ParError("Start_tree=output needs Initial_tree_file")

    @property
    def d(self) -> int:
        return 2 if self.account_rare_traits else 1

    def seed_entropy(self) -> int | None:
        """Deterministic integer entropy from the (possibly real-valued) seed."""
        if self.seed is None:
            return None
        if float(self.seed).is_integer():
            return int(self.seed)
        return int.from_bytes(struct.pack("<d", float(self.seed)), "little")


def _fmt_indices(idx) -> str:
    return " ".join(str(i) for i in idx)


def _parse_indices(text: str) -> tuple:
    """Parse '1 10:13, 20' into (1, 10, 11, 12, 13, 20)."""
    out = []
    for tok in text.replace(",", " ").split():
        if ":" in tok:
            a, b = tok.split(":")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(tok))
    return tuple(out)


def _fmt_num(x) -> str:
    if x is None:
        return ""
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))


_FLAGS = {
    "Vary_topology": "vary_topology",
    "Uniform_prior_on_topologies": "topology_uniform",
    "Account_rare_traits": "account_rare_traits",
    "Model_missing": "model_missing",
    "Vary_loss_rate": "vary_loss_rate",
    "Include_catastrophes": "catastrophes",
    "Random_initial_cat_death_prob": "vary_kappa",
    "Random_initial_cat_rate": "rho_marginalized",
    "Impose_clades": "impose_clades",
    "Coupled_markov_chains": "coupled",
}


def write_par(cfg: RunConfig) -> str:
    lines = [
        f"Data_file_path = {cfg.data_path}",
        f"Output_file_stem = {cfg.output_stem}",
        f"Omit_taxa = {_fmt_indices(cfg.omitted_taxa)}",
        f"Omit_traits = {_fmt_indices(cfg.omitted_traits)}",
        f"Start_tree = {cfg.start_tree}",
        f"Initial_tree_file = {cfg.initial_tree_file or ''}",
        f"Initial_tree_index = {cfg.initial_tree_index}",
        f"Initial_theta = {_fmt_num(cfg.theta)}",
        f"Tree_prior = {cfg.tree_prior}",
        f"Max_root_age = {_fmt_num(cfg.max_root_age)}",
        f"Uniform_prior_on_topologies = {int(cfg.topology_uniform)}",
        f"Vary_topology = {int(cfg.vary_topology)}",
        f"Account_rare_traits = {int(cfg.account_rare_traits)}",
        f"Model_missing = {int(cfg.model_missing)}",
        f"Vary_loss_rate = {int(cfg.vary_loss_rate)}",
        f"Initial_loss_rate = {_fmt_num(cfg.initial_loss_rate)}",
        f"Include_catastrophes = {int(cfg.catastrophes)}",
        f"Random_initial_cat_death_prob = {int(cfg.vary_kappa)}",
        f"Initial_cat_death_prob = {_fmt_num(cfg.initial_kappa)}",
        f"Random_initial_cat_rate = {int(cfg.rho_marginalized)}",
        f"Initial_cat_rate = {_fmt_num(cfg.initial_rho)}",
        f"Impose_clades = {int(cfg.impose_clades)}",
        f"Ignore_clades = {_fmt_indices(cfg.ignore_clades)}",
        f"Ignore_clade_ages = {_fmt_indices(cfg.ignore_clade_ages)}",
        f"Run_length = {cfg.run_length}",
        f"Sample_interval = {cfg.sample_interval}",
        f"Seed_random_numbers = {_fmt_num(cfg.seed)}",
        f"Coupled_markov_chains = {int(cfg.coupled)}",
        f"Coupling_lag = {cfg.coupling_lag}",
    ]
    for mid in sorted(cfg.move_weights):
        lines.append(f"Move_weight_{mid} = {_fmt_num(cfg.move_weights[mid])}")
    for mid in sorted(cfg.move_scales):
        lines.append(f"Move_scale_{mid} = {_fmt_num(cfg.move_scales[mid])}")
    return "\n".join(lines) + "\n"


def parse_par(text: str) -> RunConfig:
    """Parse key=value lines into a RunConfig; unknown keys warn, not fail."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParError(f"line {lineno} is not a key=value setting: {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        raw[key] = val

    if "Data_file_path" not in raw or not raw["Data_file_path"]:
        raise ParError("missing mandatory key Data_file_path")

    kw = {"data_path": raw.pop("Data_file_path")}
    move_weights, move_scales = {}, {}

    def pop_str(key, target):
        if key in raw and raw[key]:
            kw[target] = raw.pop(key)
        else:
            raw.pop(key, None)

    def pop_num(key, target, cast=float):
        if key in raw and raw[key]:
            kw[target] = cast(raw.pop(key))
        else:
            raw.pop(key, None)

    def pop_idx(key, target):
        if key in raw:
            kw[target] = _parse_indices(raw.pop(key))

    pop_str("Output_file_stem", "output_stem")
    pop_idx("Omit_taxa", "omitted_taxa")
    pop_idx("Omit_traits", "omitted_traits")
    pop_str("Start_tree", "start_tree")
    pop_str("Initial_tree_file", "initial_tree_file")
    pop_num("Initial_tree_index", "initial_tree_index", int)
    pop_num("Initial_theta", "theta")
    pop_str("Tree_prior", "tree_prior")
    pop_num("Max_root_age", "max_root_age")
    pop_num("Initial_loss_rate", "initial_loss_rate")
    pop_num("Initial_cat_death_prob", "initial_kappa")
    pop_num("Initial_cat_rate", "initial_rho")
    pop_idx("Ignore_clades", "ignore_clades")
    pop_idx("Ignore_clade_ages", "ignore_clade_ages")
    pop_num("Run_length", "run_length", int)
    pop_num("Sample_interval", "sample_interval", int)
    pop_num("Coupling_lag", "coupling_lag", int)
    if "Seed_random_numbers" in raw:
        val = raw.pop("Seed_random_numbers")
        if val:
            x = float(val)
            kw["seed"] = int(x) if x.is_integer() else x
    for key, target in _FLAGS.items():
        if key in raw:
            val = raw.pop(key)
            if val:
                kw[target] = bool(int(val))
    for key in list(raw):
        if key.startswith("Move_weight_"):
            move_weights[int(key.removeprefix("Move_weight_"))] = float(raw.pop(key))
        elif key.startswith("Move_scale_"):
            move_scales[int(key.removeprefix("Move_scale_"))] = float(raw.pop(key))
    for key in raw:
        warnings.warn(f"ignoring unknown .par key {key!r}", stacklevel=2)
    return RunConfig(move_weights=move_weights, move_scales=move_scales, **kw)


def read_par(path: str) -> RunConfig:
    with open(path) as f:
        return parse_par(f.read())
