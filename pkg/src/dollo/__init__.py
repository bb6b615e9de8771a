"""Stochastic-Dollo phylogenetics: fitting, coupled MCMC, simulation, analysis."""

from .likelihood import (LikelihoodParams, PatternTable, log_integrated_likelihood,
                         log_poisson_likelihood, pattern_intensity,
                         registered_normalizer, sample_lambda, tabulate_patterns)
from .nexus import ParsedNexus, TraitMatrix, parse_newick, parse_nexus, write_newick
from .parfile import RunConfig, parse_par, read_par, write_par
from .trees import (CladeConstraint, ConstraintSet, Tree, constrained_initial_tree,
                    effective_edge_length, mrca, random_exponential_tree,
                    tree_length, validate)

__version__ = "0.1.0"

__all__ = [
    "CladeConstraint", "ConstraintSet", "LikelihoodParams", "ParsedNexus",
    "PatternTable", "RunConfig", "TraitMatrix", "Tree",
    "constrained_initial_tree", "effective_edge_length",
    "log_integrated_likelihood", "log_poisson_likelihood", "mrca",
    "parse_newick", "parse_nexus", "parse_par", "pattern_intensity",
    "random_exponential_tree", "read_par", "registered_normalizer",
    "sample_lambda", "tabulate_patterns", "tree_length", "validate",
    "write_newick", "write_par",
]
