"""
Command line interface for ReplayLab

  design          gamma table, optimal (x*, y*), step size and bound
  simulate-sync   buffer-SGD runs or an (x, y) design sweep
  simulate-async  discrete-event pipeline runs
  train-bandit    GRPO / AsymRE bandit training
  report          Pareto frontier and per-budget table over run directories

Exit status: 0 ok, 1 library error, 2 config error, 3 divergence, 4 deadlock.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import exporter
import inputs
import model
import report
from config import TOOL_VERSION, log_level
from errors import ConfigError, ReplayLabError

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("design", "simulate-sync", "simulate-async", "train-bandit")

# report metric per subcommand: (curve column, direction)
CURVE_METRIC = {
    "simulate-sync": ("grad_norm_sq", report.MINIMIZE),
    "train-bandit": ("mean_reward", report.MAXIMIZE),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaylab", description="Replay-buffer compute/staleness laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides 'seed'")
        p.add_argument("--seeds", help="comma list or a-b range; overrides 'seeds'")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--grid-overrides", dest="grid", help='"k=v1,v2;k2=w1,w2" (WT=6:2,5:3 sets W and T)')
        p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                       help="single override, repeatable")
        p.add_argument("--xlsx", action="store_true", help="also write an Excel workbook")
        p.add_argument("--plots", action="store_true", help="also write PNG figures")

    p = sub.add_parser("report")
    p.add_argument("runs", nargs="+", help="completed run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--budgets", help="comma list of compute budgets (default: every compute point)")
    p.add_argument("--fraction", type=float, default=None, help="target fraction of the best value")
    p.add_argument("--xlsx", action="store_true")
    return parser


def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'", item)
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.seeds:
        out["seeds"] = args.seeds
    return out


def _print_design(res: dict) -> None:
    print(report.format_table(res["gamma_table"], ["W", "T", "mu", "cost_without_buffer", "cost_with_buffer", "gamma"]))
    d = res["design"]
    print(f"\nx* = {d['x_star']:.6g}   y* = {d['y_star']:.6g}   ({d['method']}{', ' + d['branch'] if d['branch'] else ''})")
    s = res["step_size"]
    if "eta_star" in s:
        print(f"eta* = {s['eta_star']:.6g}   eta cap = {s['eta_cap']:.6g}")
    if res["bound"]:
        print(f"bound = {res['bound']['bound']:.6g}  (optimisation {res['bound']['optimisation']:.4g}, noise {res['bound']['noise']:.4g})")


def _run_cell(command: str, cfg, out_dir: str, config_path: str | None, args) -> dict:
    res = model.RUNNERS[command](cfg)
    extra = {"name": os.path.basename(os.path.normpath(out_dir))}
    if command in CURVE_METRIC and not (command == "simulate-sync" and "sweep_rows" in res):
        extra["metric"], extra["direction"] = CURVE_METRIC[command]
    exporter.write_manifest(out_dir, command, inputs.resolved_values(cfg), model.seeds_of(cfg), config_path, extra)
    exporter.EXPORTERS[command](res, out_dir, xlsx=args.xlsx, plots=args.plots)
    for w in res["warnings"]:
        logger.warning("[config] %s", w)
    return res


def run_subcommand(args) -> int:
    cells = inputs.config_cells(args.command, args.config, _overrides(args), args.grid)
    if len(cells) == 1:
        res = _run_cell(args.command, cells[0], args.out, args.config, args)
        if args.command == "design":
            _print_design(res)
        print(f"\nwrote {args.out}")
        return 0
    varied = inputs.grid_keys(inputs.parse_grid_overrides(args.grid))
    shared = {k: v for k, v in inputs.resolved_values(cells[0]).items() if k not in varied}
    seeds = sorted({s for cfg in cells for s in model.seeds_of(cfg)})
    exporter.write_manifest(args.out, args.command, shared, seeds, args.config,
                            {"name": os.path.basename(os.path.normpath(args.out)), "grid": args.grid, "cells": len(cells)})
    index = []
    for i, cfg in enumerate(cells):
        cell_dir = os.path.join(args.out, f"cell_{i:03d}")
        _run_cell(args.command, cfg, cell_dir, args.config, args)
        values = inputs.resolved_values(cfg)
        index.append({"cell": f"cell_{i:03d}", **{k: values.get(k) for k in varied}})
    exporter.write_csv(os.path.join(args.out, "cells.csv"), index)
    print(f"wrote {len(cells)} cells under {args.out}")
    return 0


def run_report(args) -> int:
    budgets = [float(b) for b in args.budgets.split(",")] if args.budgets else None
    kw = {} if args.fraction is None else {"fraction": args.fraction}
    rep = report.build_report(args.runs, budgets, **kw)
    os.makedirs(args.out, exist_ok=True)
    exporter.export_report(rep, args.out, xlsx=args.xlsx)
    print(report.format_table([r for r in rep["frontier"] if r["on_frontier"]], ["run", "compute", "value"]))
    print()
    print(report.format_table(rep["compute_to_target"], ["run", "fraction", "compute"]))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else log_level(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return run_report(args)
        return run_subcommand(args)
    except ReplayLabError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
