"""Experiment driver.

    msgmimc solve-bench  [--config FILE] [--seed N] [--out DIR] [--threads K]
    msgmimc rates        [--config FILE] [--qoi Q1,Q2,Q3] ...
    msgmimc estimate     [--config FILE] [--qoi Q1] [--eps 1e-2,5e-3] ...
    msgmimc cost-theorem [--config FILE] ...

Configuration files use INI syntax (``[section]`` headers, ``key = value``
lines, ``#`` or ``;`` comments).  Lists are comma separated.  Every key is
optional; the defaults are listed in ``DEFAULTS`` below and in the README.
Command-line flags override file values.  Before any computation the fully
resolved configuration is written to ``<out>/config.resolved.ini``.

Statistical outputs (CSV and JSON) are byte-identical for identical
configuration and seeds at any thread count.  Wall-clock times go to a
separate ``timing.csv``.

Exit codes: 0 success, 1 invalid configuration, 2 budget exhausted in some
estimator run, 3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mimc
from .field import CovarianceSpec, HyperPrior, realize, stream
from .grid import GridLevel
from .msg import CycleConfig, MgHierarchy, MsgHierarchy, SolverError, convergence_factor, mg_solve, msg_solve
from .pde import QOIS, rhs

COMMANDS = ("solve-bench", "rates", "estimate", "cost-theorem")
EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_SOLVER = 0, 1, 2, 3
QUANTILES = (0.2, 0.4, 0.6, 0.8)

DEFAULTS = {
    "prior": {
        "eta": "0.0625, 0.25",
        "theta_deg": "-30, 30",
        "nu": "0.5",
        "lam": "0.25",
    },
    "grid": {
        # coarsest grid exponents of index (0, 0) per quantity of interest
        "base_Q1": "2, 2",
        "base_Q2": "4, 4",
        "base_Q3": "4, 4",
        "max_level": "14",
    },
    "solver": {
        "mu": "2",
        "nu1": "2",
        "nu2": "2",
        "damping": "1.0",
        "nu0_max": "50",
        "eps_solver": "1e-8",
        "mean": "geometric",
    },
    "run": {
        "seeds": "0",
        "threads": "1",
        "qoi": "Q1",
        "eps": "5e-3",
        "n_min": "32",
        "refit_every": "16",
        "max_samples": "1000000",
        "max_wall": "inf",
    },
    "bench": {
        "top": "6, 6",
        "etas": "0.25, 0.125, 0.0625",
        "thetas_deg": "0, 10, 20, 30",
        "samples": "100",
        "cycles": "50",
        "solvers": "MG, MSG",
        "strategies": "W(2,2)",
        "rtol": "1e-8",
        "factor_floor": "1e-11",
    },
    "rates": {
        "box": "4, 4",
        "samples": "16",
    },
    "theorem": {
        "beta": "4, 4",
        "gamma": "1, 1",
        "estimate_dir": "",
    },
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _strategy(s: str) -> tuple[int, int, int]:
    """``V(1,1)`` or ``W(2,2)`` -> ``(mu, nu1, nu2)``."""
    s = s.strip().upper()
    if len(s) < 6 or s[0] not in "VW" or s[1] != "(" or s[-1] != ")":
        raise ConfigError(f"cycle strategy {s!r} is not of the form W(nu1,nu2)")
    a, b = _ints(s[2:-1])
    return (1 if s[0] == "V" else 2), a, b


def _strategy_name(mu, a, b) -> str:
    return f"{'V' if mu == 1 else 'W'}({a},{b})"


@dataclass
class ExperimentConfig:
    """Validated settings for one command."""

    command: str
    out: Path
    prior: HyperPrior
    bases: dict
    max_level: int
    solver: CycleConfig
    mean: str
    seeds: list
    threads: int
    qois: list
    eps: list
    n_min: int
    refit_every: int
    max_samples: int
    max_wall: float
    bench_top: GridLevel
    bench_etas: list
    bench_thetas: list
    bench_samples: int
    bench_cycles: int
    bench_solvers: list
    bench_strategies: list
    bench_rtol: float
    bench_factor_floor: float
    rates_box: tuple
    rates_samples: int
    theorem_beta: list
    theorem_gamma: list
    theorem_estimate_dir: str
    raw: configparser.ConfigParser

    def problem(self, qoi: str) -> mimc.PDEProblem:
        return mimc.PDEProblem(
            self.prior, QOIS[qoi], self.bases[qoi], self.solver, self.max_level, mean=self.mean
        )


def load_config(command: str, args: argparse.Namespace) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        cp.read(path)
    unknown = [s for s in cp.sections() if s not in DEFAULTS]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    for sec in DEFAULTS:
        extra = [k for k in cp[sec] if k not in DEFAULTS[sec]]
        if extra:
            raise ConfigError(f"unknown keys {extra} in section [{sec}]")
    if args.seed is not None:
        cp["run"]["seeds"] = ",".join(str(s) for s in args.seed)
    if args.threads is not None:
        cp["run"]["threads"] = str(args.threads)
    if args.eps is not None:
        cp["run"]["eps"] = args.eps
    if args.qoi is not None:
        cp["run"]["qoi"] = args.qoi
    try:
        return _build(command, Path(args.out), cp)
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e)) from e


def _build(command: str, out: Path, cp: configparser.ConfigParser) -> ExperimentConfig:
    pr, gr, so, ru, be, ra, th = (cp[s] for s in ("prior", "grid", "solver", "run", "bench", "rates", "theorem"))
    eta = _floats(pr["eta"])
    theta = _floats(pr["theta_deg"])
    if len(eta) == 1:
        eta = eta * 2
    if len(theta) == 1:
        theta = theta * 2
    prior = HyperPrior.from_degrees(tuple(eta), tuple(theta), float(pr["nu"]), float(pr["lam"]))
    bases = {}
    for q in QOIS:
        b = _ints(gr[f"base_{q}"])
        if len(b) != 2:
            raise ConfigError(f"base_{q} needs two exponents")
        bases[q] = tuple(b)
    solver = CycleConfig(
        int(so["mu"]), int(so["nu1"]), int(so["nu2"]), float(so["damping"]), int(so["nu0_max"]), float(so["eps_solver"])
    )
    qois = [q.strip() for q in ru["qoi"].split(",") if q.strip()]
    for q in qois:
        if q not in QOIS:
            raise ConfigError(f"unknown quantity of interest {q!r}; choose from {sorted(QOIS)}")
    eps = _floats(ru["eps"])
    if not eps or any(e <= 0 for e in eps):
        raise ConfigError("eps must be a list of positive tolerances")
    seeds = _ints(ru["seeds"])
    if not seeds:
        raise ConfigError("at least one seed is required")
    threads = int(ru["threads"])
    if threads < 1:
        raise ConfigError("threads must be positive")
    top = _ints(be["top"])
    solvers = [s.strip().upper() for s in be["solvers"].split(",") if s.strip()]
    if any(s not in ("MG", "MSG") for s in solvers):
        raise ConfigError(f"bench solvers must be MG or MSG, got {solvers}")
    if "MG" in solvers and top[0] != top[1]:
        raise ConfigError("the MG baseline needs a square top grid")
    strategies = [_strategy(s) for s in be["strategies"].split(";") if s.strip()]
    box = tuple(_ints(ra["box"]))
    if len(box) != 2 or min(box) < 1:
        raise ConfigError("rates box needs two positive extents")
    beta, gamma = _floats(th["beta"]), _floats(th["gamma"])
    if len(beta) != len(gamma):
        raise ConfigError("theorem beta and gamma need the same length")
    cfg = ExperimentConfig(
        command=command,
        out=out,
        prior=prior,
        bases=bases,
        max_level=int(gr["max_level"]),
        solver=solver,
        mean=so["mean"].strip(),
        seeds=seeds,
        threads=threads,
        qois=qois,
        eps=eps,
        n_min=int(ru["n_min"]),
        refit_every=int(ru["refit_every"]),
        max_samples=int(ru["max_samples"]),
        max_wall=float(ru["max_wall"]),
        bench_top=GridLevel(*top),
        bench_etas=_floats(be["etas"]),
        bench_thetas=_floats(be["thetas_deg"]),
        bench_samples=int(be["samples"]),
        bench_cycles=int(be["cycles"]),
        bench_solvers=solvers,
        bench_strategies=strategies,
        bench_rtol=float(be["rtol"]),
        bench_factor_floor=float(be["factor_floor"]),
        rates_box=box,
        rates_samples=int(ra["samples"]),
        theorem_beta=beta,
        theorem_gamma=gamma,
        theorem_estimate_dir=th["estimate_dir"].strip(),
        raw=cp,
    )
    if cfg.mean not in ("geometric", "arithmetic", "harmonic"):
        raise ConfigError(f"unknown edge mean {cfg.mean!r}")
    if command in ("rates", "estimate"):
        for q in qois:
            cfg.problem(q)  # validates the base grid against the quantity and the cap
    return cfg


def write_resolved(cfg: ExperimentConfig):
    cfg.out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# resolved configuration for: msgmimc {cfg.command}\n")
    cfg.raw.write(buf)
    (cfg.out / "config.resolved.ini").write_text(buf.getvalue())


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header: list, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _pool_map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _bench_one(cfg: ExperimentConfig, solver: str, strat, eta: float, theta_deg: float, n: int):
    spec = CovarianceSpec(nu=cfg.prior.nu, lam=cfg.prior.lam, eta=eta, theta=math.radians(theta_deg))
    f = realize(HyperPrior.fixed(spec), cfg.bench_top, stream(cfg.seeds[0], n))
    mu, a, b = strat
    cc = CycleConfig(mu, a, b, cfg.solver.damping)
    bvec = rhs(cfg.bench_top)
    # run every cycle so the residual curves have equal length; stop only at round-off
    if solver == "MSG":
        _, hist = msg_solve(MsgHierarchy(f, cfg.mean), bvec, cc, cfg.bench_cycles, rtol=0.0)
    else:
        _, hist = mg_solve(MgHierarchy(f, cfg.mean), bvec, cc, cfg.bench_cycles, rtol=0.0)
    return hist


def cmd_solve_bench(cfg: ExperimentConfig) -> int:
    """Residual histories of MG and MSG over a grid of (eta, theta) values.

    Writes ``residuals.csv`` (long format), ``summary.csv`` (quantiles per
    cycle) and ``factors.csv`` (convergence factor per sample).
    """
    long_rows, summary_rows, factor_rows = [], [], []
    for strat in cfg.bench_strategies:
        sname = _strategy_name(*strat)
        for eta in cfg.bench_etas:
            for theta in cfg.bench_thetas:
                for solver in cfg.bench_solvers:
                    hists = _pool_map(
                        lambda n: _bench_one(cfg, solver, strat, eta, theta, n), range(cfg.bench_samples), cfg.threads
                    )
                    for n, h in enumerate(hists):
                        for k, r in enumerate(h):
                            long_rows.append((solver, eta, theta, sname, n, k, float(r)))
                        cf = convergence_factor(h, floor=cfg.bench_factor_floor) if len(h) > 1 else None
                        reached = [k for k, r in enumerate(h) if r <= cfg.bench_rtol]
                        factor_rows.append(
                            (
                                solver,
                                eta,
                                theta,
                                sname,
                                n,
                                cf.factor if cf else math.nan,
                                cf.diverged if cf else False,
                                reached[0] if reached else -1,
                            )
                        )
                    width = max(len(h) for h in hists)
                    for k in range(width):
                        vals = np.array([h[min(k, len(h) - 1)] for h in hists])
                        qs = np.quantile(vals, QUANTILES)
                        summary_rows.append((solver, eta, theta, sname, k, *[float(q) for q in qs]))
    write_csv(cfg.out / "residuals.csv", ["solver", "eta", "theta", "cycle", "sample", "cycle_index", "resnorm"], long_rows)
    write_csv(
        cfg.out / "summary.csv",
        ["solver", "eta", "theta", "cycle", "cycle_index"] + [f"q{int(round(100 * q))}" for q in QUANTILES],
        summary_rows,
    )
    write_csv(
        cfg.out / "factors.csv",
        ["solver", "eta", "theta", "cycle", "sample", "factor", "diverged", "cycles_to_rtol"],
        factor_rows,
    )
    return EXIT_OK


def pilot_multi(cfg: ExperimentConfig, qois: list, box: tuple, samples: int, seed: int) -> dict:
    """Pilot statistics for several quantities sharing one solve per sample."""
    probs = {q: cfg.problem(q) for q in qois}
    lead = probs[qois[0]]
    L = tuple(box)

    def one(k):
        rng = stream(seed, k)
        f = lead.draw_field(L, rng)
        res = lead.solve(f)
        return {q: mimc.delta_tensor(probs[q].evaluate(res.solutions, f, L)) for q in qois}

    stats = {q: mimc.IndexStats(probs[q].cost) for q in qois}
    for dqs in _pool_map(one, range(samples), cfg.threads):
        for q in qois:
            for l, v in dqs[q].items():
                stats[q].add(l, v)
    return stats


def cmd_rates(cfg: ExperimentConfig) -> int:
    """Fixed-sample pilot on the index box and weighted least-squares rate fits."""
    groups: dict = {}
    for q in cfg.qois:
        groups.setdefault(cfg.bases[q], []).append(q)
    out = {"schema_version": mimc.SCHEMA_VERSION, "box": list(cfg.rates_box), "samples": cfg.rates_samples, "qois": {}}
    rows = []
    for base, qs in groups.items():
        stats = pilot_multi(cfg, qs, cfg.rates_box, cfg.rates_samples, cfg.seeds[0])
        for q in qs:
            fit = mimc.fit_rates(stats[q])
            out["qois"][q] = {"base": list(base), "rates": fit.to_json(), "indices": stats[q].to_json()}
            for name in ("alpha", "beta", "gamma"):
                val = getattr(fit, name)
                se = fit.stderr.get(name)
                for j in range(2):
                    rows.append((q, name, j + 1, val[j] if val else math.nan, se[j] if se else math.nan))
    write_json(cfg.out / "rates.json", out)
    write_csv(cfg.out / "rates.csv", ["qoi", "rate", "direction", "value", "stderr"], rows)
    for q, r, j, v, s in rows:
        print(f"{q} {r}_{j} = {v:.3f} +/- {s:.3f}")
    return EXIT_OK


def _eps_tag(e: float) -> str:
    return f"{e:.3g}".replace("+", "")


def cmd_estimate(cfg: ExperimentConfig) -> int:
    """Estimator runs over every (qoi, eps, seed) with both cost accountings."""
    run_rows, occ_rows, time_rows = [], [], []
    status = EXIT_OK
    for q in cfg.qois:
        prob = cfg.problem(q)
        for e in cfg.eps:
            for s in cfg.seeds:
                ec = mimc.EstimatorConfig(
                    seed=s,
                    n_min=cfg.n_min,
                    refit_every=cfg.refit_every,
                    max_samples=cfg.max_samples,
                    max_wall=cfg.max_wall,
                    threads=cfg.threads,
                )
                t0 = time.perf_counter()
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", mimc.DegeneracyWarning)
                    res = mimc.run_estimator(prob, e, ec)
                wall = time.perf_counter() - t0
                n_degenerate = sum(issubclass(w.category, mimc.DegeneracyWarning) for w in caught)
                st = res.state
                rec = mimc.cost_accounting(st, "recycled")
                non = mimc.cost_accounting(st, "non_recycled")
                con = mimc.cost_accounting(st, "non_recycled_constituent")
                run_rows.append((q, e, s, res.E, res.sqrtV, res.N, res.status, st.bias, rec, non, con, non / rec))
                for l in st.index_set():
                    occ_rows.append((q, e, s, l[0], l[1], st.stats.count(l)))
                time_rows.append((q, e, s, wall))
                dump = st.to_json()
                dump.update(
                    {
                        "qoi": q,
                        "eps": e,
                        "seed": s,
                        "status": res.status,
                        "base": list(prob.base),
                        "degeneracy_warnings": n_degenerate,
                    }
                )
                write_json(cfg.out / f"estimate_{q}_eps{_eps_tag(e)}_seed{s}.json", dump)
                if not res.converged:
                    status = EXIT_BUDGET
                print(f"{q} eps={e:g} seed={s}: E={res.E:.6g} sqrtV={res.sqrtV:.3g} N={res.N} {res.status}")
                if n_degenerate:
                    print(f"  {n_degenerate} refits kept the index law: fitted beta did not exceed gamma")
    write_csv(
        cfg.out / "runs.csv",
        [
            "qoi",
            "eps",
            "seed",
            "E",
            "sqrtV",
            "N",
            "status",
            "bias",
            "cost_recycled",
            "cost_non_recycled",
            "cost_non_recycled_constituent",
            "ratio",
        ],
        run_rows,
    )
    write_csv(cfg.out / "occupancy.csv", ["qoi", "eps", "seed", "l1", "l2", "count"], occ_rows)
    write_csv(cfg.out / "timing.csv", ["qoi", "eps", "seed", "wall_seconds"], time_rows)
    return status


def cmd_cost_theorem(cfg: ExperimentConfig) -> int:
    """Predicted recycling cost factor, next to measured ratios when estimator output is given."""
    rows = []
    pred = mimc.cost_reduction_factor(cfg.theorem_beta, cfg.theorem_gamma)
    rows.append(("config", "", "", "", list_str(cfg.theorem_beta), list_str(cfg.theorem_gamma), pred, math.nan, math.nan))
    if cfg.theorem_estimate_dir:
        d = Path(cfg.theorem_estimate_dir)
        files = sorted(d.glob("estimate_*.json"))
        if not files:
            raise ConfigError(f"no estimate_*.json files in {d}")
        for p in files:
            st = json.loads(p.read_text())
            fit = st.get("fitted_rates") or {}
            beta, gamma = fit.get("beta"), fit.get("gamma")
            measured = st["cost"]["recycled"] / st["cost"]["non_recycled"]
            if beta and gamma and all(b > 0 for b in beta) and all(g > 0 for g in gamma):
                pr = mimc.cost_reduction_factor(beta, gamma)
            else:
                pr = math.nan
            rel = abs(measured - pr) / pr if pr == pr else math.nan
            rows.append((st["qoi"], st["eps"], st["seed"], p.name, list_str(beta), list_str(gamma), pr, measured, rel))
    header = ["qoi", "eps", "seed", "source", "beta", "gamma", "predicted", "measured", "rel_diff"]
    write_csv(cfg.out / "theorem.csv", header, rows)
    for r in rows:
        print(
            f"{r[0]:>6} {str(r[1]):>8} {str(r[2]):>4}  beta={r[4]:<24} gamma={r[5]:<24} "
            f"predicted={r[6]:.4f} measured={r[7]:.4f}"
        )
    return EXIT_OK


def list_str(v) -> str:
    return "" if v is None else " ".join(f"{x:.4g}" for x in v)


HANDLERS = {
    "solve-bench": cmd_solve_bench,
    "rates": cmd_rates,
    "estimate": cmd_estimate,
    "cost-theorem": cmd_cost_theorem,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msgmimc", description="MSG solver and unbiased MIMC experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, nargs="+", help="seed list (overrides [run] seeds)")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--eps", help="comma-separated RMSE tolerances")
    p.add_argument("--qoi", help="comma-separated quantities of interest (Q1, Q2, Q3)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args)
    except ConfigError as e:
        print(f"msgmimc: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    write_resolved(cfg)
    try:
        return HANDLERS[args.command](cfg)
    except SolverError as e:
        print(f"msgmimc: solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except ConfigError as e:
        print(f"msgmimc: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
