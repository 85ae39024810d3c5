"""Simulation-study harness and the real-data workflow.

Replicates are embarrassingly parallel; every replicate derives its
generator from SeedSequence([seed, cell_index, replicate]) so results are
identical whatever the worker count, and raw per-replicate rows are always
persisted so aggregation can be re-run without re-fitting.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines, bruteforce, covkernel, permops, repair, serialize
from .covkernel import CovarianceParams
from .repair import FitConfig, Priors
from .simulate import Dataset, SimConfig, Truth, shuffle_within_blocks, simulate

METHODS = ("repair", "fullgp", "arealgp", "oracle")

RAW_HEADER = [
    "K", "B", "beta", "method", "replicate", "status", "beta_hat",
    "sigma2_hat", "tau2_hat", "phi_hat", "recovered_X", "recovered_S", "seconds",
]

# wall time stays in the raw CSV only so metrics re-runs are byte-identical
METRICS_HEADER = [
    "K", "B", "beta", "method", "replicates_ok", "replicates_failed", "flagged",
    "scaled_rmse_beta", "recovery_X", "recovery_S",
    "rmse_sigma2", "rmse_tau2", "rmse_phi",
]


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple = ("repair", "fullgp", "arealgp")
    Ks: tuple = (4,)
    Bs: tuple = (25,)
    betas: tuple = (8.0,)
    cov: CovarianceParams = CovarianceParams(sigma2=5.0, phi=0.5, tau2=0.5)
    hX: int | None = None  # None: drawn per replicate from {2,...,K}
    hS: int | None = None
    freeze_perms: bool = False
    replicates: int = 20
    fit: FitConfig = FitConfig()
    priors: Priors = Priors()
    seed: int = 0

    def __post_init__(self):
        if not (self.Ks and self.Bs and self.betas):
            raise ValueError("grid must be nonempty")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")

    def cells(self):
        idx = 0
        for K in self.Ks:
            for B in self.Bs:
                for beta in self.betas:
                    yield idx, (K, B, beta)
                    idx += 1


def config_from_kv(kv: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a flat dotted-key record."""

    def ints(key, default):
        return tuple(int(x) for x in kv[key].split(",")) if key in kv else default

    def floats(key, default):
        return tuple(float(x) for x in kv[key].split(",")) if key in kv else default

    cov = CovarianceParams(
        sigma2=float(kv.get("sim.sigma2", 5.0)),
        phi=float(kv.get("sim.phi", 0.5)),
        tau2=float(kv.get("sim.tau2", 0.5)),
    )
    fit_kwargs = {}
    for name, cast in (
        ("elbo_tol", float), ("elbo_patience", int), ("max_outer_iters", int),
        ("warmup_iters", int), ("lr_X", float), ("lr_S", float),
        ("perm_inner_steps", int), ("mc_samples", int), ("moment_samples", int),
        ("phi_is_samples", int), ("tau0_X", float), ("tau0_S", float),
        ("tau_min", float), ("anneal_rate", float), ("seed", int), ("v_floor", float),
    ):
        if f"fit.{name}" in kv:
            fit_kwargs[name] = cast(kv[f"fit.{name}"])
    prior_kwargs = {}
    for name in ("sigma2_beta", "a1", "b1", "a2", "b2", "eta_x2", "eta_s2"):
        if f"prior.{name}" in kv:
            prior_kwargs[name] = float(kv[f"prior.{name}"])
    methods = tuple(kv["study.methods"].split(",")) if "study.methods" in kv else ("repair", "fullgp", "arealgp")
    hX = int(kv["sim.hX"]) if "sim.hX" in kv else None
    hS = int(kv["sim.hS"]) if "sim.hS" in kv else None
    return ExperimentConfig(
        methods=methods,
        Ks=ints("grid.K", (4,)),
        Bs=ints("grid.B", (25,)),
        betas=floats("grid.beta", (8.0,)),
        cov=cov,
        hX=hX,
        hS=hS,
        freeze_perms=kv.get("study.freeze_perms", "false").lower() == "true",
        replicates=int(kv.get("study.replicates", 20)),
        fit=FitConfig(**fit_kwargs),
        priors=Priors(**prior_kwargs),
        seed=int(kv.get("study.seed", 0)),
    )


def _replicate_seeds(seed: int, cell_index: int, rep: int, count: int = 4):
    ss = np.random.SeedSequence([seed, cell_index, rep])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(count)]


def _draw_hamming(K: int, h: int | None, rng: np.random.Generator) -> int:
    if h is not None:
        return h
    return int(rng.choice(np.arange(2, K + 1))) if K >= 2 else 0


def run_replicate(config: ExperimentConfig, cell_index: int, cell, rep: int) -> list:
    """Simulate one dataset and fit every requested method; returns raw rows."""
    K, B, beta = cell
    data_seed, ham_seed, fit_seed, perm_seed = _replicate_seeds(config.seed, cell_index, rep)
    ham_rng = np.random.default_rng(ham_seed if not config.freeze_perms else [config.seed, cell_index])
    hX = _draw_hamming(K, config.hX, ham_rng)
    hS = _draw_hamming(K, config.hS, ham_rng)
    perm_rng = np.random.default_rng(perm_seed if not config.freeze_perms else [config.seed, cell_index, 1])
    piX = permops.random_perm_with_hamming(K, hX, perm_rng)
    piS = permops.random_perm_with_hamming(K, hS, perm_rng)
    sim = SimConfig(K=K, B=B, beta=beta, cov=config.cov, hX=hX, hS=hS, seed=data_seed)
    data = simulate(sim, piX=piX, piS=piS)

    rows = []
    for method in config.methods:
        start = time.perf_counter()
        try:
            row = _fit_one(method, data, config, fit_seed)
            status = "ok"
        except Exception:
            row = {k: float("nan") for k in ("beta_hat", "sigma2_hat", "tau2_hat", "phi_hat")}
            row["recovered_X"] = row["recovered_S"] = float("nan")
            status = "failed"
        seconds = time.perf_counter() - start
        rows.append(
            [K, B, beta, method, rep, status,
             row["beta_hat"], row["sigma2_hat"], row["tau2_hat"], row["phi_hat"],
             row["recovered_X"], row["recovered_S"], round(seconds, 4)]
        )
    return rows


def _fit_one(method: str, data: Dataset, config: ExperimentConfig, fit_seed: int) -> dict:
    truth = data.truth
    if method == "repair":
        report = repair.fit(data, config.priors, replace(config.fit, seed=fit_seed))
        return {
            "beta_hat": report.beta_mean,
            "sigma2_hat": report.sigma2_hat,
            "tau2_hat": report.tau2_hat,
            "phi_hat": report.phi_hat,
            "recovered_X": float(np.array_equal(report.piX_hat, truth.piX)),
            "recovered_S": float(np.array_equal(report.piS_hat, truth.piS)),
        }
    if method in ("fullgp", "arealgp"):
        init = _heuristic_init(data)
        fitter = baselines.full_gp_fit if method == "fullgp" else baselines.areal_gp_fit
        res = fitter(data, init)
        return {
            "beta_hat": res.beta_hat,
            "sigma2_hat": res.cov_hat.sigma2,
            "tau2_hat": res.cov_hat.tau2,
            "phi_hat": res.cov_hat.phi,
            "recovered_X": float("nan"),
            "recovered_S": float("nan"),
        }
    if method == "oracle":
        cov = config.cov
        R = covkernel.exp_correlation(data.points, cov.phi)
        sigma = covkernel.build_sigma(R, cov)
        sol = bruteforce.brute_force_mle(data, sigma)
        pi1_true = permops.compose(permops.invert_perm(truth.piS), truth.piX)
        pi2_true = permops.invert_perm(truth.piS)
        hit = any(
            np.array_equal(p1, pi1_true) and np.array_equal(p2, pi2_true)
            for p1, p2 in sol.ties
        )
        return {
            "beta_hat": sol.beta_hat,
            "sigma2_hat": cov.sigma2,
            "tau2_hat": cov.tau2,
            "phi_hat": cov.phi,
            "recovered_X": float(hit),
            "recovered_S": float(hit),
        }
    raise ValueError(f"unknown method {method}")


def _heuristic_init(data: Dataset) -> CovarianceParams:
    xtx = float(data.X @ data.X)
    beta0 = float(data.X @ data.Y) / xtx if xtx > 0 else 0.0
    resid_var = float(np.var(data.Y - beta0 * data.X))
    resid_var = max(resid_var, 1e-6)
    return CovarianceParams(sigma2=0.8 * resid_var, phi=0.4, tau2=0.2 * resid_var)


def _run_task(args):
    config, cell_index, cell, rep = args
    return (cell_index, rep), run_replicate(config, cell_index, cell, rep)


def run_simulation_study(config: ExperimentConfig, out_dir, jobs: int = 1):
    """Run the full grid, persist raw rows, and write the metrics CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (config, idx, cell, rep)
        for idx, cell in config.cells()
        for rep in range(config.replicates)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_run_task, tasks))
    else:
        results = dict(map(_run_task, tasks))

    raw_rows = []
    for idx, cell in config.cells():
        for rep in range(config.replicates):
            raw_rows.extend(results[(idx, rep)])
    raw_path = out_dir / "raw_replicates.csv"
    serialize.append_csv(raw_path, RAW_HEADER, raw_rows)

    metrics = aggregate_metrics(raw_rows, config.cov)
    metrics_path = out_dir / "metrics.csv"
    serialize.write_csv(metrics_path, METRICS_HEADER, metrics)
    return raw_path, metrics_path


def aggregate_metrics(raw_rows, cov: CovarianceParams | None = None) -> list:
    """Collapse raw replicate rows into one metrics row per (cell, method)."""
    cells = {}
    for row in raw_rows:
        key = (row[0], row[1], row[2], row[3])  # K, B, beta, method
        cells.setdefault(key, []).append(row)
    out = []
    for (K, B, beta, method), rows in sorted(cells.items(), key=lambda kv: tuple(map(str, kv[0]))):
        ok = [r for r in rows if r[5] == "ok"]
        failed = len(rows) - len(ok)
        flagged = failed > 0.1 * len(rows)

        def rmse(idx, truth):
            if not ok or not np.isfinite(truth):
                return float("nan")
            vals = np.array([float(r[idx]) for r in ok])
            return float(np.sqrt(np.mean((vals - truth) ** 2)))

        def rate(idx):
            vals = np.array([float(r[idx]) for r in ok])
            vals = vals[~np.isnan(vals)]
            return float(np.mean(vals)) if len(vals) else float("nan")

        beta = float(beta)
        scaled_rmse = rmse(6, beta) / abs(beta) if beta != 0 else rmse(6, beta)
        s2, t2, ph = (
            (cov.sigma2, cov.tau2, cov.phi) if cov else (float("nan"),) * 3
        )
        out.append(
            [K, B, beta, method, len(ok), failed, flagged,
             scaled_rmse, rate(10), rate(11),
             rmse(7, s2), rmse(8, t2), rmse(9, ph)]
        )
    return out


# ---------------------------------------------------------------------------
# real-data workflow


def ingest_csv(path, block_count: int, block_size: int, drop: int, seed: int) -> Dataset:
    """Center, rescale, subsample, sort by x1, and block a linked CSV."""
    cols = serialize.read_csv_columns(path, required=("x1", "x2", "X", "Y"))
    n = len(cols["x1"])
    need = block_count * block_size + drop
    if n < need:
        raise ValueError(f"{path}: {n} rows < required {need}")
    coords = np.column_stack([cols["x1"], cols["x2"]])
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    coords = (coords - lo) / np.where(hi > lo, hi - lo, 1.0)
    X = cols["X"] - cols["X"].mean()
    Y = cols["Y"] - cols["Y"].mean()

    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=n - drop, replace=False))[: block_count * block_size]
    coords, X, Y = coords[keep], X[keep], Y[keep]
    order = np.argsort(coords[:, 0], kind="stable")
    coords, X, Y = coords[order], X[order], Y[order]

    K = block_size
    ident = np.arange(K)
    return Dataset(
        points=coords,
        X=X,
        Y=Y,
        K=K,
        B=block_count,
        truth=Truth(beta=float("nan"), piX=ident.copy(), piS=ident.copy()),
    )


REAL_HEADER = [
    "block_count", "block_size", "method", "beta_hat",
    "recovered_X", "recovered_S", "surface_corr",
]


def run_real_data(
    path,
    blockings,
    perm_seed: int,
    methods=("repair", "fullgp", "arealgp"),
    drop: int = 5,
    drop_seed: int = 0,
    priors: Priors = Priors(),
    fit_config: FitConfig = FitConfig(),
) -> list:
    """Shuffle-within-blocks comparison table over the given blockings."""
    rows = []
    for block_count, block_size in blockings:
        linked = ingest_csv(path, block_count, block_size, drop, drop_seed)
        rng = np.random.default_rng([perm_seed, block_count, block_size])
        piX = rng.permutation(block_size)
        piS = rng.permutation(block_size)
        data = shuffle_within_blocks(linked, piX, piS)

        full = None
        if "fullgp" in methods or "repair" in methods:
            full = baselines.full_gp_fit(data, _heuristic_init(data))
        for method in methods:
            if method == "fullgp":
                rows.append([block_count, block_size, method, full.beta_hat,
                             float("nan"), float("nan"), 1.0])
            elif method == "arealgp":
                res = baselines.areal_gp_fit(data, _heuristic_init(data))
                rows.append([block_count, block_size, method, res.beta_hat,
                             float("nan"), float("nan"), float("nan")])
            elif method == "repair":
                report = repair.fit(data, priors, fit_config)
                recX = float(np.array_equal(report.piX_hat, data.truth.piX))
                recS = float(np.array_equal(report.piS_hat, data.truth.piS))
                aligned = permops.apply_perm(
                    permops.block_expand(report.piS_hat, data.B), report.mu_W
                )
                corr = float(np.corrcoef(aligned, full.mu_W)[0, 1])
                rows.append([block_count, block_size, method, report.beta_mean,
                             recX, recS, corr])
            else:
                raise ValueError(f"unsupported real-data method {method}")
    return rows


def make_standin_csv(path, n_rows: int = 155, seed: int = 7) -> None:
    """Synthetic linked dataset shaped like a small floodplain survey."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n_rows, 2)) * np.array([1.0, 2.0])
    R = covkernel.exp_correlation(coords, 0.4)
    L = covkernel.chol_factor(2.0 * R + 1e-10 * np.eye(n_rows))
    W = L @ rng.standard_normal(n_rows)
    X = rng.standard_normal(n_rows) + coords[:, 1]
    Y = -0.3 * X + W + 0.3 * rng.standard_normal(n_rows)
    serialize.write_csv(
        path,
        ["x1", "x2", "X", "Y"],
        [[coords[i, 0], coords[i, 1], X[i], Y[i]] for i in range(n_rows)],
    )
