"""Session accuracy, multi-seed aggregation, report files and the runtime scaling fit."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyPredictions, LengthMismatch

SCHEMA_VERSION = 1


def session_accuracy(predictions: Sequence[int], truths: Sequence[int]) -> float:
    """Fraction of exact matches."""
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.shape != truths.shape:
        raise LengthMismatch(f"{predictions.shape} predictions vs {truths.shape} truths")
    if predictions.size == 0:
        raise EmptyPredictions("no predictions")
    return float(np.mean(predictions == truths))


@dataclass
class Summary:
    name: str
    mean: np.ndarray      # per-session mean accuracy in percent
    std: np.ndarray
    avg_mean: float
    avg_std: float
    n_runs: int


def summarize(name: str, runs: Sequence) -> Summary:
    """Mean and population std across seeds, in percent."""
    if not runs:
        raise ValueError("at least one run is required")
    acc = 100.0 * np.array([r.accuracies for r in runs])
    avg = acc.mean(axis=1)
    return Summary(name, acc.mean(axis=0), acc.std(axis=0), float(avg.mean()), float(avg.std()), len(runs))


def metrics_payload(results: Mapping[str, Sequence], config_echo: dict) -> dict:
    """Deterministic content of ``metrics.json``. Wall-clock timings are kept out on purpose."""
    out = {"schema_version": SCHEMA_VERSION, "config": config_echo, "methods": {}}
    for name, runs in results.items():
        s = summarize(name, runs)
        out["methods"][name] = {
            "seeds": [int(r.seed) for r in runs],
            "runs": [
                {
                    "seed": int(r.seed),
                    "accuracies": [float(a) for a in r.accuracies],
                    "average": float(np.mean(r.accuracies)),
                    "base_cluster_accuracy": float(r.base_cluster_accuracy),
                    "clamp_violations": int(r.clamp_violations),
                    "test_sizes": [int(n) for n in r.test_sizes],
                }
                for r in runs
            ],
            "session_mean_pct": s.mean.tolist(),
            "session_std_pct": s.std.tolist(),
            "average_mean_pct": s.avg_mean,
            "average_std_pct": s.avg_std,
        }
    return out


def _fmt(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def report(results: Mapping[str, Sequence], out_dir: str | Path, config_echo: dict | None = None,
           reference: str | None = None) -> dict[str, Path]:
    """Write ``metrics.json``, ``sessions.csv`` and ``timings.json`` into ``out_dir``.

    ``reference`` names a method whose average the CSV gap column is measured against.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = metrics_payload(results, config_echo or {})
    paths = {"metrics": out_dir / "metrics.json", "sessions": out_dir / "sessions.csv", "timings": out_dir / "timings.json"}
    paths["metrics"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    n_sessions = max(len(r.accuracies) for runs in results.values() for r in runs)
    ref_avg = None
    if reference is not None:
        ref_avg = payload["methods"][reference]["average_mean_pct"]
    with open(paths["sessions"], "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["method", *[f"session_{k}" for k in range(1, n_sessions + 1)], "avg"]
        if ref_avg is not None:
            header.append(f"gap_vs_{reference}")
        w.writerow(header)
        for name, m in payload["methods"].items():
            row = [name, *(_fmt(a, b) for a, b in zip(m["session_mean_pct"], m["session_std_pct"])),
                   _fmt(m["average_mean_pct"], m["average_std_pct"])]
            if ref_avg is not None:
                row.append(f"{m['average_mean_pct'] - ref_avg:+.2f}")
            w.writerow(row)

    timings = {name: {str(r.seed): [float(t) for t in r.seconds] for r in runs} for name, runs in results.items()}
    paths["timings"].write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return paths


def read_sessions_csv(path: str | Path) -> dict[str, dict[str, tuple[float, float]]]:
    """Parse ``sessions.csv`` back into ``{method: {column: (mean, std)}}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            name = row.pop("method")
            cells = {}
            for col, cell in row.items():
                if col.startswith("gap_vs_"):
                    continue
                mean, std = cell.split("±")
                cells[col] = (float(mean), float(std))
            out[name] = cells
    return out


def gap(results: Mapping[str, Sequence], a: str, b: str) -> float:
    """Average-accuracy gap (percentage points) of run ``a`` over run ``b``."""
    return summarize(a, results[a]).avg_mean - summarize(b, results[b]).avg_mean


def fit_linear(sizes: Sequence[float], times: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``time = slope * N + intercept``; returns (slope, intercept, r_squared)."""
    n = np.asarray(sizes, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    slope, intercept = np.polyfit(n, t, 1)
    resid = t - (slope * n + intercept)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
