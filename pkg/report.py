"""
Cross-run comparison: Pareto frontier of (compute, value) points, best value
per compute budget, and the compute needed to reach a fraction of a run's best.

A run directory holds manifest.cfg and curve.csv; the manifest names the
curve's value column (`metric`) and whether larger is better (`direction`).
"""

from __future__ import annotations

import csv
import logging
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

import inputs
from config import TARGET_FRACTION
from errors import ConfigError, ReportError

logger = logging.getLogger(__name__)

MAXIMIZE = "max"
MINIMIZE = "min"


@dataclass
class RunCurve:
    name: str
    metric: str
    direction: str
    compute: list[float]
    value: list[float]  # median over seeds at each compute point

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.compute, self.value))


def _better(a: float, b: float, direction: str) -> bool:
    return a > b if direction == MAXIMIZE else a < b


def _not_worse(a: float, b: float, direction: str) -> bool:
    return a >= b if direction == MAXIMIZE else a <= b


def pareto_flags(points: Sequence[tuple[float, float]], direction: str = MAXIMIZE) -> list[bool]:
    """
    True for points no other point dominates: less-or-equal compute and a
    not-worse value, strictly better in at least one.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i][0], -points[i][1] if direction == MAXIMIZE else points[i][1]))
    flags = [False] * len(points)
    best = None
    best_c = None
    for i in order:
        c, v = points[i]
        if best is None or _better(v, best, direction):
            flags[i] = True
            best, best_c = v, c
        elif v == best and c == best_c:
            # exact duplicate of a frontier point
            flags[i] = True
    return flags


def best_per_budget(curves: Sequence[RunCurve], budgets: Sequence[float]) -> list[dict]:
    """Best value any run reaches with compute <= budget; NaN-free rows only."""
    rows = []
    for b in budgets:
        best = None
        for cv in curves:
            for c, v in cv.points():
                if c <= b and (best is None or _better(v, best["value"], cv.direction)):
                    best = {"budget": b, "run": cv.name, "compute": c, "value": v}
        if best is not None:
            rows.append(best)
    return rows


def compute_to_target(curve: RunCurve, fraction: float = TARGET_FRACTION) -> float | None:
    """First compute at which the curve reaches `fraction` of its best value (maximised metrics)."""
    if not curve.value:
        return None
    if curve.direction == MAXIMIZE:
        target = fraction * max(curve.value)
        hit = [c for c, v in curve.points() if v >= target]
    else:
        target = min(curve.value) / fraction
        hit = [c for c, v in curve.points() if v <= target]
    return min(hit) if hit else None


def load_run(run_dir: str) -> RunCurve:
    manifest_path = os.path.join(run_dir, "manifest.cfg")
    curve_path = os.path.join(run_dir, "curve.csv")
    if not os.path.isfile(manifest_path):
        raise ReportError(f"{run_dir}: no manifest.cfg")
    if not os.path.isfile(curve_path):
        raise ReportError(f"{run_dir}: run has no curve.csv to compare")
    try:
        manifest = inputs.parse_kv_file(manifest_path)
    except ConfigError as exc:
        raise ReportError(f"{run_dir}: unreadable manifest ({exc})") from exc
    metric = manifest.get("metric")
    direction = manifest.get("direction", MAXIMIZE)
    if not metric:
        raise ReportError(f"{run_dir}: manifest names no metric")
    by_compute: dict[float, list[float]] = defaultdict(list)
    with open(curve_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or metric not in reader.fieldnames or "compute" not in reader.fieldnames:
            raise ReportError(f"{run_dir}: curve.csv lacks 'compute' or '{metric}'")
        for row in reader:
            by_compute[float(row["compute"])].append(float(row[metric]))
    compute = sorted(by_compute)
    value = [float(np.median(by_compute[c])) for c in compute]
    name = manifest.get("name") or os.path.basename(os.path.normpath(run_dir))
    return RunCurve(name, metric, direction, compute, value)


def build_report(run_dirs: Sequence[str], budgets: Sequence[float] | None = None,
                 fraction: float = TARGET_FRACTION) -> dict:
    """
    {frontier: [{run, compute, value, on_frontier}], best_per_budget: [...],
     compute_to_target: [{run, fraction, compute}], metric, direction}
    """
    if not run_dirs:
        raise ReportError("need at least one run directory")
    curves = [load_run(d) for d in run_dirs]
    kinds = {(c.metric, c.direction) for c in curves}
    if len(kinds) > 1:
        raise ReportError(f"runs report different metrics: {sorted(kinds)}")
    metric, direction = kinds.pop()

    points = []
    owners = []
    for cv in curves:
        for p in cv.points():
            points.append(p)
            owners.append(cv.name)
    flags = pareto_flags(points, direction)
    frontier = [{"run": o, "compute": c, "value": v, "on_frontier": f}
                for o, (c, v), f in zip(owners, points, flags)]
    frontier.sort(key=lambda r: (r["compute"], r["run"]))

    if budgets is None:
        budgets = sorted({c for c, _ in points})
    per_budget = best_per_budget(curves, budgets)
    targets = [{"run": cv.name, "fraction": fraction, "compute": compute_to_target(cv, fraction)} for cv in curves]
    logger.info("[report] %d runs, %d points, %d on the frontier", len(curves), len(points), sum(flags))
    return {"metric": metric, "direction": direction, "frontier": frontier,
            "best_per_budget": per_budget, "compute_to_target": targets}


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Plain fixed-width table for the terminal."""
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
