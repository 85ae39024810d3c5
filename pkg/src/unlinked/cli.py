"""Command-line harness: simulate, fit, study, real, report."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines, bench, bruteforce, covkernel, permops, repair, serialize
from .covkernel import CovarianceParams
from .simulate import SimConfig, simulate


def _add_common(parser):
    parser.add_argument("--config", type=Path, help="flat key-value config file")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers")


def _load_kv(args) -> dict:
    return serialize.read_kv(args.config) if args.config else {}


def cmd_simulate(args) -> int:
    kv = _load_kv(args)
    seed = args.seed if args.seed is not None else int(kv.get("sim.seed", 0))
    config = SimConfig(
        K=int(kv.get("sim.K", 4)),
        B=int(kv.get("sim.B", 25)),
        beta=float(kv.get("sim.beta", 8.0)),
        cov=CovarianceParams(
            sigma2=float(kv.get("sim.sigma2", 5.0)),
            phi=float(kv.get("sim.phi", 0.5)),
            tau2=float(kv.get("sim.tau2", 0.5)),
        ),
        hX=int(kv.get("sim.hX", 2)),
        hS=int(kv.get("sim.hS", 2)),
        seed=seed,
    )
    data = simulate(config)
    args.out.mkdir(parents=True, exist_ok=True)
    serialize.dataset_to_csv(data, args.out / "dataset.csv")
    serialize.write_kv(
        {
            "sim.K": config.K, "sim.B": config.B, "sim.beta": config.beta,
            "sim.sigma2": config.cov.sigma2, "sim.phi": config.cov.phi,
            "sim.tau2": config.cov.tau2, "sim.hX": config.hX, "sim.hS": config.hS,
            "sim.seed": config.seed,
            "truth.piX": list(data.truth.piX), "truth.piS": list(data.truth.piS),
        },
        args.out / "truth.kv",
    )
    print(f"wrote {args.out / 'dataset.csv'}")
    return 0


def cmd_fit(args) -> int:
    kv = _load_kv(args)
    data = serialize.dataset_from_csv(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    methods = args.methods.split(",")
    seed = args.seed if args.seed is not None else int(kv.get("fit.seed", 0))
    config = bench.config_from_kv(kv)
    fit_config = replace(config.fit, seed=seed)
    for method in methods:
        if method == "repair":
            report = repair.fit(data, config.priors, fit_config)
            serialize.write_kv(serialize.fitreport_to_kv(report), args.out / "repair.kv")
            serialize.elbo_trace_to_csv(report.elbo_trace, args.out / "repair_elbo.csv")
        elif method in ("fullgp", "arealgp"):
            if method == "fullgp" and data.truth is None:
                print("fullgp requires ground-truth permutations", file=sys.stderr)
                return 2
            fitter = baselines.full_gp_fit if method == "fullgp" else baselines.areal_gp_fit
            res = fitter(data, bench._heuristic_init(data))
            serialize.write_kv(serialize.glsfit_to_kv(res, method), args.out / f"{method}.kv")
        elif method == "oracle":
            R = covkernel.exp_correlation(data.points, config.cov.phi)
            sigma = covkernel.build_sigma(R, config.cov)
            sol = bruteforce.brute_force_mle(data, sigma)
            serialize.write_kv(
                {
                    "method": "oracle",
                    "beta_mean": sol.beta_hat,
                    "pi1_hat": list(sol.pi1_hat),
                    "pi2_hat": list(sol.pi2_hat),
                    "loss": sol.loss,
                    "n_ties": len(sol.ties),
                },
                args.out / "oracle.kv",
            )
        else:
            print(f"unknown method {method}", file=sys.stderr)
            return 2
        print(f"fitted {method} -> {args.out}")
    return 0


def cmd_study(args) -> int:
    kv = _load_kv(args)
    config = bench.config_from_kv(kv)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.methods:
        config = replace(config, methods=tuple(args.methods.split(",")))
    raw, metrics = bench.run_simulation_study(config, args.out, jobs=args.jobs)
    print(f"raw replicates: {raw}\nmetrics: {metrics}")
    return 0


def cmd_real(args) -> int:
    kv = _load_kv(args)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.data
    if path is None:
        path = args.out / "standin.csv"
        bench.make_standin_csv(path)
        print(f"no --data given; generated synthetic stand-in at {path}")
    blockings = []
    for item in args.blockings.split(";"):
        count, size = item.split("x")
        blockings.append((int(count), int(size)))
    methods = tuple(args.methods.split(",")) if args.methods else ("repair", "fullgp", "arealgp")
    config = bench.config_from_kv(kv)
    seed = args.seed if args.seed is not None else 0
    rows = bench.run_real_data(
        path, blockings, perm_seed=seed, methods=methods,
        priors=config.priors, fit_config=config.fit,
    )
    out_csv = args.out / "real_comparison.csv"
    serialize.write_csv(out_csv, bench.REAL_HEADER, rows)
    print(f"comparison table: {out_csv}")
    return 0


def cmd_report(args) -> int:
    with open(args.raw, newline="", encoding="utf-8") as fh:
        import csv as _csv

        reader = _csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    kv = _load_kv(args)
    cov = None
    if kv:
        cov = bench.config_from_kv(kv).cov
    metrics = bench.aggregate_metrics(rows, cov)
    args.out.mkdir(parents=True, exist_ok=True)
    out_csv = args.out / "metrics.csv"
    serialize.write_csv(out_csv, bench.METRICS_HEADER, metrics)
    print(f"metrics: {out_csv}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="unlinked", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one dataset from the block-permuted DGP")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit methods to a dataset CSV")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--methods", default="repair")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("study", help="run the simulation-study grid")
    _add_common(p)
    p.add_argument("--methods", default=None)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("real", help="real-data workflow (or synthetic stand-in)")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None, help="linked CSV with x1,x2,X,Y")
    p.add_argument("--blockings", default="15x10;30x5", help="semicolon list, e.g. 30x5")
    p.add_argument("--methods", default=None)
    p.set_defaults(func=cmd_real)

    p = sub.add_parser("report", help="re-aggregate a raw replicate CSV")
    _add_common(p)
    p.add_argument("--raw", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
