"""Command line entry point.

    retrocede run CONFIG [--out DIR] [--compare-independence] [--scan R=0.5,1,2]
    retrocede suite SUITE [--out DIR]
    retrocede verify CONFIG TREATY_DIR [--tol 1e-4]

Exit status: 0 success, 1 verification failure, 2 solver or numerical
failure, 3 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .config import load_config, load_suite, merge, parse_config
from .copula import Independence
from .errors import ConfigError, RetrocedeError, SolverStall
from .market import ExponentialUtility
from .quad import Discretization
from .solver import optimize
from .treaty import Strategy, TreatyCurve
from .verify import optimality_residual

EXIT_OK, EXIT_VERIFY, EXIT_STALL, EXIT_CONFIG = 0, 1, 2, 3

logger = logging.getLogger("retrocede")


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def solve_and_write(cfg, out_dir, figures=True, tag=None):
    """Optimize one configuration and write its artefacts into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    mm = cfg.market
    t0 = time.perf_counter()
    disc = Discretization(mm, cfg.quadrature)
    res = optimize(mm, cfg.solver, disc=disc)
    t1 = time.perf_counter()
    resid = optimality_residual(mm, res.strategy, disc=disc, grids=res.grids)
    t2 = time.perf_counter()
    for i, t in enumerate(res.strategy.treaties):
        t.to_csv(os.path.join(out_dir, f"treaty_{i + 1}.csv"))
        resid.to_csv(i, os.path.join(out_dir, f"residuals_{i + 1}.csv"))
    spectral = [s["spectral_radius"] for c in res.report["cycles"] for s in c["newton"] if c["eps"]]
    report = {
        "name": cfg.name if tag is None else f"{cfg.name}:{tag}",
        "config": cfg.raw,
        "converged": res.report["converged"],
        "final_utility": res.report["final_utility"],
        "m0": res.report["m0"],
        "premiums": res.report["premiums"],
        "moments": res.report["moments"],
        "rng_seed": res.report["rng_seed"],
        "quadrature_noise": res.report["quadrature_noise"],
        "max_spectral_radius": max(spectral, default=None),
        "residuals": resid.to_dict(),
        "cycles": res.report["cycles"],
    }
    _dump(report, os.path.join(out_dir, "report.json"))
    _dump({"optimize_seconds": t1 - t0, "residual_seconds": t2 - t1}, os.path.join(out_dir, "timing.json"))
    if figures:
        from .plotting import plot_treaties, plot_utility

        curves = [(f"risk {i + 1}", g, t(g)) for i, (g, t) in enumerate(zip(res.grids, res.strategy.treaties))]
        plot_treaties(curves, os.path.join(out_dir, "treaties.svg"))
        plot_utility(res.report["cycles"], os.path.join(out_dir, "utility.svg"))
    return res, report


def _write_delta(res, base, out_dir, figures):
    for i, (g, t, t0) in enumerate(zip(res.grids, res.strategy.treaties, base.strategy.treaties)):
        with open(os.path.join(out_dir, f"delta_{i + 1}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "ceded", "ceded_independence", "delta"])
            for x, z, z0 in zip(g, t(g), t0(g)):
                w.writerow([repr(float(x)), repr(float(z)), repr(float(z0)), repr(float(z - z0))])
    if figures:
        from .plotting import plot_treaties

        curves = [(f"risk {i + 1}", g, t(g)) for i, (g, t) in enumerate(zip(res.grids, res.strategy.treaties))]
        ref = [(f"risk {i + 1}, independence", g, t(g)) for i, (g, t) in enumerate(zip(base.grids, base.strategy.treaties))]
        plot_treaties(curves, os.path.join(out_dir, "comparison.svg"), ref, "Dependent vs independent")


def _parse_scan(spec):
    key, _, vals = spec.partition("=")
    if key.strip() != "R" or not vals:
        raise ConfigError(f"--scan: expected R=v1,v2,..., got {spec!r}")
    try:
        out = [float(v) for v in vals.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--scan: {exc}") from exc
    if any(v <= 0 for v in out):
        raise ConfigError("--scan: risk aversion must be positive")
    return out


def _out_dir(cfg, given):
    return given or cfg.out_dir or os.path.join("out", cfg.name)


def cmd_run(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    figures = cfg.figures and not args.no_figures
    if args.scan:
        rows = []
        for R in _parse_scan(args.scan):
            sub = replace(cfg, market=replace(cfg.market, utility=ExponentialUtility(R)))
            _, rep = solve_and_write(sub, os.path.join(out, f"R_{R:g}"), figures, tag=f"R={R:g}")
            rows.append([repr(R), repr(rep["final_utility"])] + [repr(p) for p in rep["premiums"]])
        with open(os.path.join(out, "scan.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["R", "utility"] + [f"premium_{i + 1}" for i in range(cfg.market.n)])
            w.writerows(rows)
        return EXIT_OK
    res, rep = solve_and_write(cfg, out, figures)
    if args.compare_independence:
        ind = replace(cfg, market=cfg.market.with_copula(Independence()))
        base, _ = solve_and_write(ind, os.path.join(out, "independence"), figures, tag="independence")
        _write_delta(res, base, out, figures)
    print(f"{cfg.name}: utility {rep['final_utility']:.10g}, premiums "
          + ", ".join(f"{p:.6g}" for p in rep["premiums"])
          + f", max residual/m0 {rep['residuals']['relative_violation']:.2e}")
    return EXIT_OK


def _status(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_STALL


def cmd_suite(args):
    name, runs, here = load_suite(args.suite)
    out = args.out or os.path.join("out", name)
    os.makedirs(out, exist_ok=True)
    rows, worst = [], EXIT_OK
    for raw in runs:
        try:
            cfg = parse_config(raw, here)
            _, rep = solve_and_write(cfg, os.path.join(out, cfg.name), cfg.figures and not args.no_figures)
            status, note = EXIT_OK, ""
            rows.append([cfg.name, "ok", repr(rep["final_utility"]), repr(rep["residuals"]["relative_violation"]),
                         ";".join(repr(p) for p in rep["premiums"]), str(len(rep["cycles"]) - 1), note])
        except RetrocedeError as exc:
            status = _status(exc)
            rows.append([raw.get("name", "?"), "config_error" if status == EXIT_CONFIG else "stall", "", "", "", "", str(exc)])
            logger.error("%s: %s", raw.get("name", "?"), exc)
        worst = max(worst, status)
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "status", "utility", "max_residual_over_m0", "premiums", "cycles", "message"])
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]:<24} {r[1]:<12} {r[2]}")
    return worst


def cmd_verify(args):
    cfg = load_config(args.config)
    mm = cfg.market
    treaties = []
    for i in range(mm.n):
        path = os.path.join(args.treaty_dir, f"treaty_{i + 1}.csv")
        if not os.path.exists(path):
            raise ConfigError(f"{path}: missing treaty file")
        treaties.append(TreatyCurve.from_csv(path))
    disc = Discretization(mm, cfg.quadrature)
    s = Strategy.priced(mm, treaties, disc=disc)
    resid = optimality_residual(mm, s, disc=disc)
    summary = resid.to_dict()
    summary["tolerance"] = args.tol
    summary["passed"] = resid.relative <= args.tol
    _dump(summary, os.path.join(args.treaty_dir, "verify.json"))
    print(f"max violation/m0 {resid.relative:.3e} ({'pass' if summary['passed'] else 'FAIL'} at {args.tol:g})")
    return EXIT_OK if summary["passed"] else EXIT_VERIFY


def build_parser():
    p = argparse.ArgumentParser(prog="retrocede", description="Optimal reinsurance treaties for dependent risks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="optimize one configuration")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--compare-independence", action="store_true")
    r.add_argument("--scan", metavar="R=v1,v2,...")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("suite", help="run every configuration of a suite")
    s.add_argument("suite")
    s.add_argument("--out")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_suite)
    v = sub.add_parser("verify", help="check stored treaties against the optimality conditions")
    v.add_argument("config")
    v.add_argument("treaty_dir")
    v.add_argument("--tol", type=float, default=1e-4)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverStall as exc:
        print(f"solver stall: {exc}", file=sys.stderr)
        return EXIT_STALL
    except RetrocedeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_STALL


if __name__ == "__main__":
    sys.exit(main())
