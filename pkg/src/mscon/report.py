"""Aggregate result CSVs into plot-ready summaries (mean and std over seeds)."""

from __future__ import annotations

import csv
import logging
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .experiments import RESULT_FILES, read_rows

log = logging.getLogger(__name__)

GROUP_KEYS = ("kind", "method", "setting", "rho", "task", "metric")
SUMMARY_FIELDS = GROUP_KEYS + ("n", "mean", "std")
FIGURE_FILES = {
    "corruption": "fig3_corruption.csv",
    "indomain": "table_indomain.csv",
    "ood": "table_ood.csv",
    "hparam": "fig4_hparam.csv",
}


def aggregate(rows: list[dict]) -> list[dict]:
    """Group rows by everything except seed; population std (ddof=0) over seeds."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in GROUP_KEYS)].append(r["value"])
    out = []
    for key, values in groups.items():
        v = np.asarray(values)
        out.append({**dict(zip(GROUP_KEYS, key)), "n": len(v), "mean": float(v.mean()), "std": float(v.std())})
    return out


def find_gaps(rows: list[dict]) -> list[str]:
    """Cells whose seed set is smaller than the union of seeds in the same file."""
    seeds = {r["seed"] for r in rows}
    by_cell: dict[tuple, set] = defaultdict(set)
    for r in rows:
        by_cell[tuple(r[k] for k in GROUP_KEYS)].add(r["seed"])
    gaps = []
    for key, have in by_cell.items():
        missing = seeds - have
        if missing:
            gaps.append(f"{dict(zip(GROUP_KEYS, key))} missing seeds {sorted(missing)}")
    # Every configuration should report the same (task, metric) pairs.
    configs = {k[:4] for k in by_cell}
    measures = {k[4:] for k in by_cell}
    for cfg in sorted(configs, key=str):
        for meas in sorted(measures, key=str):
            if cfg + meas not in by_cell:
                gaps.append(f"{dict(zip(GROUP_KEYS, cfg + meas))} missing entirely")
    return gaps


def _write(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def report(results_dir: str | Path) -> tuple[Path, list[str]]:
    """Write ``summary.csv`` plus one file per figure/table analog; return (summary path, gaps)."""
    results_dir = Path(results_dir)
    found = {k: results_dir / f for k, f in RESULT_FILES.items() if (results_dir / f).exists()}
    if not found:
        raise ContractViolation(f"no result files in {results_dir}")
    summary: list[dict] = []
    gaps: list[str] = []
    for kind, path in found.items():
        rows = read_rows(path)
        agg = aggregate(rows)
        gaps += [f"{kind}: {g}" for g in find_gaps(rows)]
        _write(results_dir / FIGURE_FILES[kind], SUMMARY_FIELDS, agg)
        summary += agg
    out = results_dir / "summary.csv"
    _write(out, SUMMARY_FIELDS, summary)
    if gaps:
        warnings.warn(f"partial report, {len(gaps)} gap(s): " + "; ".join(gaps[:10]), stacklevel=2)
    return out, gaps
