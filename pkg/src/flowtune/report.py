"""CSV reports over a finished run: incumbent trajectory, metric correlations, WL/ECP front."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import kernels
from .tools.inspect import pearson

TRAJECTORY_HEADER = ("iteration", "incumbent", "rows", "surrogate_rows")
CORRELATION_METRICS = ("wl", "ecp", "area", "instance_count", "power")
CORRELATION_HEADER = ("kind", "metric") + CORRELATION_METRICS
PARETO_HEADER = ("iteration", "index", "wl", "ecp")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def trajectory_csv(report: dict) -> str:
    rows = [(t["iteration"], t["incumbent"], t["rows"], t["surrogate_rows"]) for t in report["trajectory"]]
    return _csv(TRAJECTORY_HEADER, rows)


def metric_matrix(records) -> np.ndarray:
    """Rows of records that carry every correlation metric."""
    out = []
    for m in records:
        vals = [m.get(k) for k in CORRELATION_METRICS]
        if all(v is not None for v in vals):
            out.append(vals)
    return np.array(out, dtype=float).reshape(-1, len(CORRELATION_METRICS))


def correlation_matrices(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = M.shape[1]
    P, K = np.eye(d), np.eye(d)
    for i in range(d):
        for j in range(i + 1, d):
            P[i, j] = P[j, i] = pearson(M[:, i], M[:, j])
            K[i, j] = K[j, i] = kernels.kendall_tau_b(M[:, i], M[:, j])
    return P, K


def correlation_csv(records) -> str:
    M = metric_matrix(records)
    if M.shape[0] < 3:
        raise ValueError(f"need >= 3 complete runs for correlations, found {M.shape[0]}")
    P, K = correlation_matrices(M)
    rows = []
    for kind, mat in (("pearson", P), ("kendall", K)):
        for i, name in enumerate(CORRELATION_METRICS):
            rows.append((kind, name, *[round(float(v), 6) for v in mat[i]]))
    return _csv(CORRELATION_HEADER, rows)


def pareto_front(points) -> np.ndarray:
    """Mask of (wl, ecp) rows not dominated under minimization of both."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    if P.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    return kernels.nondominated_mask(-P)


def pareto_csv(rows) -> str:
    """``rows`` are (iteration, index, wl, ecp) tuples."""
    rows = [r for r in rows if r[2] is not None and r[3] is not None]
    mask = pareto_front([(r[2], r[3]) for r in rows]) if rows else []
    keep = sorted((r for r, m in zip(rows, mask) if m), key=lambda r: (r[2], r[3], r[0], r[1]))
    return _csv(PARETO_HEADER, keep)


def load_run(run_dir: Path) -> tuple[dict, list[dict]]:
    run_dir = Path(run_dir)
    rep = run_dir / "final_report.json"
    if not rep.exists():
        raise FileNotFoundError(f"{rep} is missing")
    trials = run_dir / "trials.jsonl"
    if not trials.exists():
        raise FileNotFoundError(f"{trials} is missing")
    rows = [json.loads(line) for line in trials.read_text(encoding="utf-8").splitlines() if line.strip()]
    return json.loads(rep.read_text(encoding="utf-8")), rows


def write_report(run_dir: Path, kind: str, out: Path | None = None) -> Path:
    report, rows = load_run(run_dir)
    if kind == "trajectory":
        text = trajectory_csv(report)
    elif kind == "correlation":
        text = correlation_csv([r["metrics"] for r in rows])
    elif kind == "pareto":
        text = pareto_csv([(r["iteration"], r.get("index", 0), r["metrics"].get("wl"), r["metrics"].get("ecp"))
                           for r in rows])
    else:
        raise ValueError(f"unknown report kind {kind!r}")
    out = Path(out) if out else Path(run_dir) / f"{kind}.csv"
    out.write_text(text, encoding="utf-8")
    return out
