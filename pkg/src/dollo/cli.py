"""Command-line entry points: fit, couple, simulate, analyse."""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np


class _Tee:
    """Mirror monitoring output to the screen and a log file."""

    def __init__(self, *streams):
        self.streams = streams

    def write(self, text):
        for s in self.streams:
            s.write(text)

    def flush(self):
        for s in self.streams:
            s.flush()


def _cmd_fit(args) -> int:
    from .mcmc import run
    from .parfile import read_par
    cfg = read_par(args.par)
    stem = cfg.output_stem
    if args.out_dir:
        stem = os.path.join(args.out_dir, os.path.basename(stem))
    with open(f"{stem}{args.suffix}.log", "w") as log:
        run(cfg, suffix=args.suffix, out_dir=args.out_dir,
            monitor=_Tee(sys.stdout, log))
    return 0


def _cmd_couple(args) -> int:
    from .coupling import run_coupled
    from .parfile import read_par
    cfg = read_par(args.par)
    stem = cfg.output_stem
    if args.out_dir:
        stem = os.path.join(args.out_dir, os.path.basename(stem))
    with open(f"{stem}{args.suffix}.log", "w") as log:
        run_coupled(cfg, suffix=args.suffix, out_dir=args.out_dir,
                    monitor=_Tee(sys.stdout, log))
    return 0


def _cmd_simulate(args) -> int:
    from .nexus import parse_nexus
    from .simulate import SynthConfig, synthesize, write_synthetic
    tree = None
    if args.tree_file:
        with open(args.tree_file) as f:
            tree = parse_nexus(f.read()).embedded_tree
        if tree is None:
            print("error: tree file has no trees block", file=sys.stderr)
            return 1
    cfg = SynthConfig(
        n_leaves=args.leaves, theta=args.theta, tree=tree, K=args.K,
        psi=args.psi, rho=args.rho, kappa=args.kappa, sigma=args.sigma,
        n_classes=args.classes, varsigma=args.class_sd,
        borrow_rate=args.borrow, borrow_dist=args.borrow_dist,
        missing=args.missing, remove_rare=args.remove_rare,
        n_clades=args.clades, clade_accuracy=args.clade_accuracy,
        seed=args.seed)
    matrix, sim_tree, clades, truth = synthesize(cfg)
    write_synthetic(args.output, matrix, sim_tree, cfg, truth, clades)
    print(f"wrote {args.output}: {matrix.n_taxa} taxa, {matrix.n_traits} traits, "
          f"{len(clades)} clades")
    return 0


def _cmd_analyse(args) -> int:
    from . import analysis
    from .nexus import parse_nexus, read_tree_samples
    stem = args.stem
    trees = read_tree_samples(f"{stem}.nex", f"{stem}cat.nex")
    burn = args.burnin if args.burnin is not None else max(1, len(trees) // 10)
    trees = trees[burn:]
    if not trees:
        print("error: no samples remain after burn-in", file=sys.stderr)
        return 1
    matrix = None
    if args.data:
        with open(args.data) as f:
            matrix = parse_nexus(f.read()).matrix
    wrote = []
    if args.consensus:
        root = analysis.consensus(trees, threshold=args.threshold,
                                  subsample=args.subsample)
        with open(args.consensus, "w") as f:
            f.write(analysis.consensus_newick(root) + "\n")
        wrote.append(args.consensus)
    if args.mrca:
        taxa = [t for t in args.mrca.split(",") if t]
        ages, flags = analysis.mrca_age_series(trees, taxa)
        path = f"{stem}_mrca.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample", "mrca_age", "is_clade"])
            for i, (a, c) in enumerate(zip(ages, flags)):
                w.writerow([i, a, int(c)])
        print(f"clade posterior probability: {flags.mean():.4f}")
        wrote.append(path)
    if args.histograms:
        if matrix is None:
            print("error: --histograms needs --data", file=sys.stderr)
            return 1
        per_trait, per_taxon = analysis.data_histograms(matrix)
        path = f"{stem}_histograms.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["taxa_per_trait"] + per_trait.tolist())
            w.writerow(["traits_per_taxon"] + per_taxon.tolist())
        wrote.append(path)
    if args.distance:
        if matrix is None or args.mu_hat is None:
            print("error: --distance needs --data and --mu-hat", file=sys.stderr)
            return 1
        tree = trees[min(args.tree_index, len(trees) - 1)]
        dist, pairs = analysis.distance_outputs(matrix, tree, args.mu_hat)
        path = f"{stem}_distance.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([""] + matrix.taxa_names)
            for name, row in zip(matrix.taxa_names, dist):
                w.writerow([name] + [f"{x:.6g}" for x in row])
        dd = f"{stem}_depthdist.csv"
        with open(dd, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["taxon_a", "taxon_b", "estimate", "tree_mrca_age"])
            w.writerows(pairs)
        wrote.extend([path, dd])
    for p in wrote:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dollo",
        description="Fit, couple, simulate and analyse binary-trait phylogenies "
                    "under a stochastic Dollo model.")
    sub = p.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="run a single MCMC chain from a .par file")
    fit.add_argument("par")
    fit.add_argument("suffix", nargs="?", default="",
                     help="numeric suffix appended to output file names")
    fit.add_argument("--out-dir", default=None)
    fit.set_defaults(func=_cmd_fit)

    cp = sub.add_parser("couple", help="run a lag-coupled pair of chains")
    cp.add_argument("par")
    cp.add_argument("suffix", nargs="?", default="")
    cp.add_argument("--out-dir", default=None)
    cp.set_defaults(func=_cmd_couple)

    sim = sub.add_parser("simulate", help="synthesize trait data")
    sim.add_argument("--output", default="synthdata.nex")
    sim.add_argument("--leaves", type=int, default=8)
    sim.add_argument("--theta", type=float, default=0.001)
    sim.add_argument("--tree-file", default=None,
                     help="Nexus file whose trees block supplies the tree")
    sim.add_argument("--K", type=float, default=30.0)
    sim.add_argument("--psi", type=float, default=0.3)
    sim.add_argument("--rho", type=float, default=None)
    sim.add_argument("--kappa", type=float, default=None)
    sim.add_argument("--sigma", type=float, default=0.0)
    sim.add_argument("--classes", type=int, default=None)
    sim.add_argument("--class-sd", type=float, default=0.0)
    sim.add_argument("--borrow", type=float, default=0.0)
    sim.add_argument("--borrow-dist", type=float, default=None)
    sim.add_argument("--missing", action="store_true")
    sim.add_argument("--remove-rare", action="store_true")
    sim.add_argument("--clades", type=int, default=0)
    sim.add_argument("--clade-accuracy", type=float, default=10.0)
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=_cmd_simulate)

    an = sub.add_parser("analyse", help="summarize run output files")
    an.add_argument("stem", help="output stem (reads <stem>.nex etc.)")
    an.add_argument("--burnin", type=int, default=None,
                    help="samples to discard (default 10%%)")
    an.add_argument("--subsample", type=int, default=1)
    an.add_argument("--data", default=None)
    an.add_argument("--consensus", default=None,
                    help="write the consensus tree to this path")
    an.add_argument("--threshold", type=float, default=0.5)
    an.add_argument("--mrca", default=None,
                    help="comma-separated taxa for an MRCA age series")
    an.add_argument("--histograms", action="store_true")
    an.add_argument("--distance", action="store_true")
    an.add_argument("--mu-hat", type=float, default=None)
    an.add_argument("--tree-index", type=int, default=0)
    an.set_defaults(func=_cmd_analyse)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # one-line diagnostic, non-zero exit
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
