"""Flat key-value records and CSV input/output.

The key-value format is one `key = value` per line with dotted section
prefixes (e.g. `sim.phi = 0.5`); `#` starts a comment.  Dataset CSVs carry
a header row with columns x1,x2,X,Y[,block_id], UTF-8, '.' decimal.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .baselines import GLSFit
from .repair import FitReport
from .simulate import Dataset


def write_kv(record: dict, path) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in record.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def read_kv(path) -> dict:
    record = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        record[key.strip()] = value.strip()
    return record


def dataset_to_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x1", "x2", "X", "Y", "block_id"])
        for i in range(data.n):
            writer.writerow(
                [
                    repr(float(data.points[i, 0])),
                    repr(float(data.points[i, 1])),
                    repr(float(data.X[i])),
                    repr(float(data.Y[i])),
                    i // data.K,
                ]
            )


def dataset_from_csv(path, K: int | None = None, B: int | None = None) -> Dataset:
    rows = read_csv_columns(path, required=("x1", "x2", "X", "Y"))
    n = len(rows["x1"])
    if "block_id" in rows:
        block_ids = np.asarray(rows["block_id"], dtype=int)
        B_file = int(block_ids.max()) + 1
        K_file = n // B_file
        K, B = K or K_file, B or B_file
    elif K is None or B is None:
        raise ValueError("CSV lacks block_id; K and B must be supplied")
    if K * B != n:
        raise ValueError(f"{n} rows do not fill {B} blocks of {K}")
    points = np.column_stack([rows["x1"], rows["x2"]])
    return Dataset(points=points, X=np.asarray(rows["X"]), Y=np.asarray(rows["Y"]), K=K, B=B)


def read_csv_columns(path, required=()) -> dict:
    """Parse a headed CSV into float columns, with line numbers on errors."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}:1: empty CSV") from None
        header = [h.strip() for h in header]
        for col in required:
            if col not in header:
                raise ValueError(f"{path}:1: missing required column {col!r}")
        columns = {h: [] for h in header}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for h, cell in zip(header, row):
                try:
                    columns[h].append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric value {cell!r} in column {h}") from None
    return {h: np.asarray(v) for h, v in columns.items()}


def fitreport_to_kv(report: FitReport) -> dict:
    return {
        "method": "repair",
        "beta_mean": report.beta_mean,
        "beta_var": report.beta_var,
        "sigma2_hat": report.sigma2_hat,
        "tau2_hat": report.tau2_hat,
        "phi_hat": report.phi_hat,
        "piX_hat": list(report.piX_hat),
        "piS_hat": list(report.piS_hat),
        "iterations": report.iterations,
        "converged": report.converged,
    }


def glsfit_to_kv(fit: GLSFit, method: str) -> dict:
    return {
        "method": method,
        "beta_mean": fit.beta_hat,
        "sigma2_hat": fit.cov_hat.sigma2,
        "tau2_hat": fit.cov_hat.tau2,
        "phi_hat": fit.cov_hat.phi,
        "neg_loglik": fit.neg_loglik,
        "n_evals": fit.n_evals,
        "converged": fit.converged,
    }


def elbo_trace_to_csv(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "elbo"])
        for i, v in enumerate(trace):
            writer.writerow([i, repr(float(v))])


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def append_csv(path, header, rows) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
