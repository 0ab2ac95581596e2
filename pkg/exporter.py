"""
Exporter utilities for run directories
- write_manifest(out_dir, subcommand, ...)
- write_csv / write_jsonl / export_json
- export_excel(sheets, out_path)       (optional, needs openpyxl)
- plot_* figures                         (optional, needs matplotlib)
- export_<subcommand>(results, out_dir)

Data files carry no wall-clock timestamps: the same manifest reproduces
them byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from typing import Any, Dict, List, Sequence

import metrics
from config import TOOL_VERSION
from errors import ConfigError

logger = logging.getLogger(__name__)

try:
    from openpyxl import Workbook
except ImportError:  # Graceful error if dependency not installed yet
    Workbook = None  # type: ignore

MANIFEST = "manifest.cfg"


# ----------------------------- Helpers -----------------------------

def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def _to_cell(value: Any) -> Any:
    """Lists and dicts become compact JSON so they fit one cell."""
    if isinstance(value, (dict, list, tuple)):
        return json.dumps(value, ensure_ascii=False, separators=(",", ":"))
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def _flatten(prefix: str, data: Dict[str, Any], out: Dict[str, Any]) -> None:
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            _flatten(key, v, out)
        else:
            out[key] = v


def _autosize(ws) -> None:
    for column_cells in ws.columns:
        max_length = 0
        col = column_cells[0].column_letter
        for cell in column_cells:
            length = len(str(cell.value)) if cell.value is not None else 0
            max_length = max(max_length, length)
        ws.column_dimensions[col].width = min(max(10, max_length + 2), 60)


def _kv_value(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(":".join(str(x) for x in item) if isinstance(item, (list, tuple)) else str(item) for item in v)
    return str(v)


# ----------------------------- Files -----------------------------

def write_manifest(out_dir: str, subcommand: str, values: Dict[str, Any], seeds: Sequence[int],
                   config_path: str | None = None, extra: Dict[str, Any] | None = None) -> str:
    """
    key = value manifest; one per directory. A directory holding another
    subcommand's manifest is refused.
    """
    _ensure_dir(out_dir)
    path = os.path.join(out_dir, MANIFEST)
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            head = dict(line.split(" = ", 1) for line in f.read().splitlines() if " = " in line)
        if head.get("subcommand") != subcommand:
            raise ConfigError(f"{out_dir} already holds a '{head.get('subcommand')}' run", "out")
    flat: Dict[str, Any] = {}
    _flatten("", values, flat)
    lines = [
        f"subcommand = {subcommand}",
        f"tool_version = {TOOL_VERSION}",
        f"config_path = {config_path or ''}",
        f"seeds = {_kv_value(list(seeds))}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {_kv_value(v)}")
    for k in sorted(flat):
        lines.append(f"config.{k} = {_kv_value(flat[k])}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


def write_csv(path: str, rows: List[Dict[str, Any]], fieldnames: Sequence[str] | None = None) -> str:
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            for k in r:
                if k not in fieldnames:
                    fieldnames.append(k)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _to_cell(v) for k, v in r.items()})
    return path


def write_jsonl(path: str, rows: List[Dict[str, Any]]) -> str:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def export_json(state: Dict[str, Any], out_path: str) -> str:
    """Pretty-printed JSON, keys sorted."""
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(state, f, ensure_ascii=False, indent=2, sort_keys=True, default=_json_default)
    return out_path


def _json_default(o: Any) -> Any:
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def export_excel(sheets: Dict[str, List[Dict[str, Any]]], out_path: str) -> str | None:
    """One sheet per table. Returns None (and logs) when openpyxl is missing."""
    if Workbook is None:
        logger.warning("[export] openpyxl is not installed; skipping %s", out_path)
        return None
    wb = Workbook()
    first = True
    for name, rows in sheets.items():
        ws = wb.active if first else wb.create_sheet()
        ws.title = name[:31]
        first = False
        cols: List[str] = []
        for r in rows:
            for k in r:
                if k not in cols:
                    cols.append(k)
        ws.append(cols or ["(empty)"])
        for r in rows:
            ws.append([_to_cell(r.get(c)) for c in cols])
        _autosize(ws)
    wb.save(out_path)
    return out_path


# ----------------------------- Figures -----------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_k_curve(rows: List[Dict[str, Any]], x_star: float, out_path: str) -> str:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["x"] for r in rows], [r["K"] for r in rows], lw=1.5)
    ax.axvline(x_star, ls="--", color="grey", lw=1)
    ax.set_xscale("log")
    ax.set_xlabel("x = N/R")
    ax.set_ylabel("K(x)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_histograms(hists: Dict[str, Dict[int, int]], out_path: str) -> str:
    plt = _pyplot()
    names = list(hists)
    fig, axes = plt.subplots(1, max(1, len(names)), figsize=(4 * max(1, len(names)), 3.2))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        h = hists[name]
        ax.bar(list(h.keys()), list(h.values()), width=0.9)
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_curves(series: Dict[str, Dict[str, Sequence[float]]], ylabel: str, out_path: str) -> str:
    """series: name -> {"x", "median", "q25", "q75"}"""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, s in series.items():
        ax.plot(s["x"], s["median"], label=name)
        ax.fill_between(s["x"], s["q25"], s["q75"], alpha=0.2)
    ax.set_xlabel("compute")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


# ----------------------------- Per subcommand -----------------------------

def export_design(res: Dict[str, Any], out_dir: str, xlsx: bool = False, plots: bool = False) -> Dict[str, str]:
    paths = {
        "gamma": write_csv(os.path.join(out_dir, "gamma_table.csv"), res["gamma_table"]),
        "k_curve": write_csv(os.path.join(out_dir, "k_curve.csv"), res["k_curve"]),
        "design": export_json({k: res[k] for k in ("design", "step_size", "bound", "warnings")},
                              os.path.join(out_dir, "design.json")),
    }
    if xlsx:
        flat: Dict[str, Any] = {}
        _flatten("", {"design": res["design"], "step_size": res["step_size"], "bound": res["bound"] or {}}, flat)
        p = export_excel({"Gamma": res["gamma_table"],
                          "Design": [{"key": k, "value": v} for k, v in sorted(flat.items())],
                          "Warnings": [{"warning": w} for w in res["warnings"]]},
                         os.path.join(out_dir, "design.xlsx"))
        if p:
            paths["xlsx"] = p
    if plots:
        paths["k_plot"] = plot_k_curve(res["k_curve"], res["design"]["x_star"], os.path.join(out_dir, "k_curve.png"))
    return paths


def export_sync(res: Dict[str, Any], out_dir: str, xlsx: bool = False, plots: bool = False) -> Dict[str, str]:
    paths: Dict[str, str] = {}
    if "sweep_rows" in res:
        paths["sweep"] = write_csv(os.path.join(out_dir, "sweep.csv"), res["sweep_rows"])
        paths["table"] = write_csv(os.path.join(out_dir, "sweep_table.csv"), res["sweep_table"])
        paths["best"] = export_json({k: res[k] for k in res if k not in ("sweep_rows", "sweep_table")},
                                    os.path.join(out_dir, "best_cell.json"))
        if xlsx:
            p = export_excel({"Sweep": res["sweep_rows"], "Medians": res["sweep_table"]},
                             os.path.join(out_dir, "sweep.xlsx"))
            if p:
                paths["xlsx"] = p
        return paths
    # per-step trace doubles as the report curve
    paths["trace"] = write_csv(os.path.join(out_dir, "curve.csv"), res["trace"])
    paths["summary"] = write_csv(os.path.join(out_dir, "summary.csv"), res["summary"])
    return paths


def export_async(res: Dict[str, Any], out_dir: str, xlsx: bool = False, plots: bool = False) -> Dict[str, str]:
    paths: Dict[str, str] = {"summary": write_csv(os.path.join(out_dir, "summary.csv"), res["summary"])}
    stat_rows: List[Dict[str, Any]] = []
    hist_rows: List[Dict[str, Any]] = []
    stall_rows: List[Dict[str, Any]] = []
    for run in res["runs"]:
        seed = run["seed"]
        trace = run["trace"]
        trace.dump_events(os.path.join(out_dir, f"events_seed{seed}.jsonl"))
        trace.ledger.dump(os.path.join(out_dir, f"ledger_seed{seed}.jsonl"))
        for name, s in run["summaries"].items():
            stat_rows.append({"seed": seed, **metrics.summary_row(name, s)})
            hist_rows.extend({"seed": seed, **r} for r in metrics.histogram_rows(name, s))
        stall_rows.extend({"seed": seed, **r} for r in run["stalls"])
    paths["metrics"] = write_csv(os.path.join(out_dir, "metrics.csv"), stat_rows)
    paths["histograms"] = write_csv(os.path.join(out_dir, "histograms.csv"), hist_rows)
    paths["stalls"] = write_csv(os.path.join(out_dir, "stalls.csv"), stall_rows)
    if xlsx:
        p = export_excel({"Summary": res["summary"], "Metrics": stat_rows, "Stalls": stall_rows},
                         os.path.join(out_dir, "async.xlsx"))
        if p:
            paths["xlsx"] = p
    if plots and res["runs"]:
        first = res["runs"][0]["summaries"]
        hists = {k: v.histogram for k, v in first.items() if k != "new_fraction"}
        paths["hist_plot"] = plot_histograms(hists, os.path.join(out_dir, "histograms.png"))
    return paths


def export_bandit(res: Dict[str, Any], out_dir: str, xlsx: bool = False, plots: bool = False) -> Dict[str, str]:
    paths = {
        "curve": write_csv(os.path.join(out_dir, "curve.csv"), res["curves"]),
        "summary": write_csv(os.path.join(out_dir, "summary.csv"), res["summary"]),
        "peaks": export_json({"peaks": res["peaks"], "warnings": res["warnings"]}, os.path.join(out_dir, "peaks.json")),
        "task": res["task"].to_json(os.path.join(out_dir, "task.json")),
    }
    if xlsx:
        p = export_excel({"Curves": res["curves"], "Summary": res["summary"]}, os.path.join(out_dir, "bandit.xlsx"))
        if p:
            paths["xlsx"] = p
    if plots and res["curves"]:
        seeds = sorted({r["seed"] for r in res["curves"]})
        per_seed = [[r for r in res["curves"] if r["seed"] == s] for s in seeds]
        band = metrics.curve_band([[r["mean_reward"] for r in c] for c in per_seed])
        x = [r["compute"] for r in per_seed[0]]
        paths["reward_plot"] = plot_curves({"mean reward": {"x": x, **band}}, "mean reward",
                                           os.path.join(out_dir, "reward.png"))
    return paths


def export_report(rep: Dict[str, Any], out_dir: str, xlsx: bool = False, plots: bool = False) -> Dict[str, str]:
    paths = {
        "frontier": write_csv(os.path.join(out_dir, "frontier.csv"), rep["frontier"]),
        "budget": write_csv(os.path.join(out_dir, "best_per_budget.csv"), rep["best_per_budget"]),
        "targets": write_csv(os.path.join(out_dir, "compute_to_target.csv"), rep["compute_to_target"]),
    }
    if xlsx:
        p = export_excel({"Frontier": rep["frontier"], "PerBudget": rep["best_per_budget"],
                          "ToTarget": rep["compute_to_target"]}, os.path.join(out_dir, "report.xlsx"))
        if p:
            paths["xlsx"] = p
    return paths


EXPORTERS = {
    "design": export_design,
    "simulate-sync": export_sync,
    "simulate-async": export_async,
    "train-bandit": export_bandit,
}
