"""Lag-coupled chain pairs: exact meeting, meeting times, and TV bounds."""
from __future__ import annotations

import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import priors
from .mcmc import (ChainState, Model, MoveStats, MOVES, RunResult, RunError,
                   _record, draw_value, evaluate, initial_state, make_streams,
                   monitor_line, pick_move, prepare_run, step as single_step)
from .nexus import OutputSet, ParsedNexus, parse_nexus
from .parfile import RunConfig, write_par

_MAX_RESIDUAL_TRIES = 1_000_000


def _gamma_couple(rng, sample_p, logp, sample_q, logq):
    """Sample (X, Y) with X ~ p, Y ~ q and {X = Y} as often as possible.

    Standard two-stage construction: accept X for both chains under the
    overlap min(p, q), otherwise draw Y from q's residual by rejection.
    Identical densities always return X = Y bitwise, which the faithfulness
    contract relies on.
    """
    x = sample_p()
    if math.log(rng.random()) + logp(x) <= logq(x):
        return x, x
    for _ in range(_MAX_RESIDUAL_TRIES):
        y = sample_q()
        if math.log(rng.random()) + logq(y) > logp(y):
            return x, y
    raise RuntimeError("residual sampling failed to terminate")


def _uniform_dist(rng, lo, hi):
    width = hi - lo
    if width <= 0:
        return (lambda: lo), (lambda x: 0.0 if x == lo else -math.inf)
    logd = -math.log(width)
    return (lambda: float(rng.uniform(lo, hi))), (
        lambda x: logd if lo <= x <= hi else -math.inf)


def _choice_dist(rng, items):
    pool = frozenset(items)
    logd = -math.log(len(items))
    return (lambda: items[int(rng.integers(len(items)))]), (
        lambda x: logd if x in pool else -math.inf)


def _count_dist(rng, req):
    if req[0] == "negbin":
        r, q = req[1], req[2]
        if q <= 0:
            return (lambda: 0), (lambda k: 0.0 if k == 0 else -math.inf)
        return (lambda: int(rng.negative_binomial(r, 1.0 - q))), (
            lambda k: priors.conditional_count_logpmf(k, r, q))
    lam = req[1]
    return (lambda: int(rng.poisson(lam))), (lambda k: priors.poisson_logpmf(k, lam))


def couple_draws(req_x, req_y, rng):
    """Maximal coupling of two draw requests of the same kind."""
    kind = req_x[0]
    if kind == "uniform":
        sp, lp = _uniform_dist(rng, req_x[1], req_x[2])
        sq, lq = _uniform_dist(rng, req_y[1], req_y[2])
    elif kind == "choice":
        sp, lp = _choice_dist(rng, req_x[1])
        sq, lq = _choice_dist(rng, req_y[1])
    elif kind in ("negbin", "poisson"):
        sp, lp = _count_dist(rng, req_x)
        sq, lq = _count_dist(rng, req_y)
    else:
        raise ValueError(f"unknown draw request {req_x!r}")
    return _gamma_couple(rng, sp, lp, sq, lq)


def _advance(gen, value):
    try:
        if value is _START:
            return ("req", next(gen))
        return ("req", gen.send(value))
    except StopIteration as stop:
        return ("done", stop.value)


_START = object()


def drive_pair(gen_x, gen_y, rng):
    """Run two proposal generators in lockstep with maximally coupled draws."""
    rx = _advance(gen_x, _START)
    ry = _advance(gen_y, _START)
    while rx[0] == "req" or ry[0] == "req":
        if rx[0] == "req" and ry[0] == "req" and rx[1][0] == ry[1][0]:
            vx, vy = couple_draws(rx[1], ry[1], rng)
            rx = _advance(gen_x, vx)
            ry = _advance(gen_y, vy)
            continue
        # Structurally diverged proposals finish with independent draws.
        if rx[0] == "req":
            rx = _advance(gen_x, draw_value(rx[1], rng))
        if ry[0] == "req":
            ry = _advance(gen_y, draw_value(ry[1], rng))
    return rx[1], ry[1]


def coupled_step(x_state: ChainState, y_state: ChainState, model: Model, rng,
                 stats_x: MoveStats | None = None,
                 stats_y: MoveStats | None = None):
    """Advance both chains one step from a coupling of the marginal kernel.

    The move id, all proposal randomness (via maximal couplings) and the
    accept uniform are shared; each chain applies its own acceptance ratio.
    Equal inputs therefore produce equal outputs.
    """
    move_id = pick_move(model, x_state.tree.n_leaves, rng)
    out_x, out_y = drive_pair(MOVES[move_id](x_state, model),
                              MOVES[move_id](y_state, model), rng)
    logu = math.log(rng.random())
    new_x, new_y = x_state, y_state
    for out, state, stats, which in ((out_x, x_state, stats_x, 0),
                                     (out_y, y_state, stats_y, 1)):
        if stats is not None:
            stats.proposed[move_id] += 1
        if out is None:
            continue
        cand, loghr = out
        evaluate(cand, model)
        if cand.log_post == -math.inf:
            continue
        if logu < cand.log_post - state.log_post + loghr:
            if stats is not None:
                stats.accepted[move_id] += 1
            if which == 0:
                new_x = cand
            else:
                new_y = cand
    return new_x, new_y


def tv_bound(taus, lag: int, t: int) -> float:
    """Empirical bound on the total variation distance at iteration t.

    Averages max(0, ceil((tau - lag - t)/lag)) over replicate meeting times
    from i.i.d. coupled runs at a common lag.
    """
    taus = list(taus)
    if not taus:
        raise ValueError("no meeting times supplied")
    total = 0.0
    for tau in taus:
        total += max(0.0, math.ceil((tau - lag - t) / lag))
    return total / len(taus)


def run_coupled(cfg: RunConfig, parsed: ParsedNexus | None = None, suffix: str = "",
                out_dir: str | None = None, monitor=None, quiet: bool = False,
                max_iterations: int | None = None) -> tuple:
    """Run a lag-coupled pair, emitting _x/_y file sets and a .tau file.

    The X chain runs alone for the first ``lag`` iterations; afterwards the
    pair advances jointly until the chains meet (checked at save points, so
    the recorded meeting time is conservative) and X continues alone to the
    configured run length.
    """
    if not cfg.coupled:
        raise RunError("configuration does not request coupled chains")
    if not cfg.vary_topology and cfg.start_tree == "random":
        import warnings
        warnings.warn("coupled chains with a fixed topology and independent "
                      "random initial trees can never meet; share the initial "
                      "tree or let the topology vary", stacklevel=2)
    if parsed is None:
        with open(cfg.data_path) as f:
            parsed = parse_nexus(f.read())
    entropy = cfg.seed_entropy()
    if entropy is None:
        entropy = int(np.random.SeedSequence().entropy) % (2 ** 63)
        cfg = replace(cfg, seed=entropy)
    x_init, y_init, pair_rng = make_streams(entropy, 3)
    prepared = prepare_run(cfg, parsed, coupled=True)
    model = prepared.model
    if not quiet:
        for note in prepared.notes:
            print(note, file=monitor or sys.stdout)

    x = evaluate(initial_state(cfg, prepared, parsed, x_init), model)
    y = evaluate(initial_state(cfg, prepared, parsed, y_init), model)
    for state, tag in ((x, "X"), (y, "Y")):
        if state.log_post == -math.inf:
            raise RunError(f"initial {tag} state violates the run constraints")

    stem = cfg.output_stem
    if out_dir is not None:
        stem = os.path.join(out_dir, os.path.basename(stem))
    par_text = write_par(cfg)
    out_x = OutputSet(stem, prepared.taxa_names, par_text,
                      with_xi=cfg.model_missing, chain="_x", suffix=str(suffix))
    out_y = OutputSet(stem, prepared.taxa_names, par_text,
                      with_xi=cfg.model_missing, chain="_y", suffix=str(suffix))
    res_x = RunResult([], [], [], x, out_x.paths)
    res_y = RunResult([], [], [], y, out_y.paths)
    stats_x, stats_y = MoveStats(), MoveStats()
    stream = monitor or sys.stdout
    lag, j, r = cfg.coupling_lag, cfg.sample_interval, cfg.run_length

    def record(res, out, state, s, stats):
        rec = _record(out, s, state, model, pair_rng)
        res.sample_indices.append(s)
        res.trees.append(state.tree.copy())
        res.trace.append(rec)
        if not quiet:
            print(monitor_line(len(res.sample_indices) - 1, state.log_lik, stats),
                  file=stream)
        stats.reset()

    tau = None
    try:
        record(res_x, out_x, x, 0, stats_x)
        for s in range(1, lag + 1):
            x = single_step(x, model, pair_rng, stats_x)
            if s % j == 0:
                record(res_x, out_x, x, s, stats_x)
        record(res_y, out_y, y, 0, stats_y)
        s = lag
        while True:
            s += 1
            if tau is None:
                x, y = coupled_step(x, y, model, pair_rng, stats_x, stats_y)
            else:
                x = single_step(x, model, pair_rng, stats_x)
            if s % j == 0:
                record(res_x, out_x, x, s, stats_x)
                if tau is None:
                    record(res_y, out_y, y, s - lag, stats_y)
                    if x.equal_components(y):
                        tau = s
                        out_x.write_tau(tau // j)
            if s >= r and tau is not None:
                break
            if max_iterations is not None and s >= max_iterations:
                break
    finally:
        out_x.close()
        out_y.close()
    res_x.final_state, res_y.final_state = x, y
    res_x.tau = res_y.tau = tau
    return res_x, res_y


def replicate_taus(cfg: RunConfig, parsed: ParsedNexus, n_replicates: int,
                   out_dir: str, max_iterations: int | None = None,
                   base_seed: int = 1) -> list:
    """Run independent coupled pairs and collect their meeting times."""
    taus = []
    for rep in range(1, n_replicates + 1):
        rep_cfg = replace(cfg, seed=base_seed + rep)
        rx, _ = run_coupled(rep_cfg, parsed, suffix=str(rep), out_dir=out_dir,
                            quiet=True, max_iterations=max_iterations)
        taus.append(rx.tau)
    return taus
