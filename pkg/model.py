"""
Experiment orchestration: one run_* entry per subcommand.

Each entry takes a validated config (inputs.py schemas) and returns a plain
results dict; soft problems are collected under "warnings" and never raise.

run_design(cfg) -> {
    gamma_table: [{W, T, mu, cost_without_buffer, cost_with_buffer, gamma}],
    design: {x_star, y_star, objective, method, branch, boundary, numeric_x_star, numeric_y_star},
    step_size: {eta, eta_star, eta_cap, valid, condition, j0_a, j0_b},
    bound: {optimisation, noise, V, bound} | None,
    k_curve: [{x, K, I}],
    warnings: [...]
}
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace

import numpy as np

import async_sim
import design_theory as dt
import equations
import inputs
import metrics
import rl_toy
import sgd_lab
import streams
from errors import ConfigError, DesignError, EtaValidityError

logger = logging.getLogger(__name__)


def noise_profile(cfg) -> dt.NoiseProfile:
    if cfg.noise == "constant":
        return dt.NoiseProfile.constant(cfg.sigma0)
    if cfg.noise == "power_law":
        return dt.NoiseProfile.power_law(cfg.alpha, cfg.tau)
    if cfg.noise == "cell_averaged_power_law":
        return dt.NoiseProfile.cell_averaged(cfg.alpha, cfg.tau)
    return dt.NoiseProfile.tabulated(cfg.sigma_table)


def seeds_of(cfg) -> list[int]:
    return streams.seed_list(cfg.seeds, default=cfg.seed) if cfg.seeds else [cfg.seed]


# ----------------------------- design -----------------------------

def run_design(cfg: inputs.DesignConfig) -> dict:
    warnings = inputs.validate_design(cfg)
    profile = noise_profile(cfg)
    d = dt.DesignParams(mu=cfg.mu, rho=cfg.rho, profile=profile, kappa=cfg.kappa, L=cfg.L, F0=cfg.F0,
                        N=cfg.N, R=cfg.R, B=cfg.B, eta=cfg.eta, T_steps=cfg.T_steps)

    gamma = equations.gamma_table(cfg.mu, cfg.pairs, cfg.C)

    numeric = dt.optimal_design_numeric(d, cfg.x_lo, cfg.x_hi, cfg.x_points)
    if numeric.boundary:
        warnings.append(f"numeric optimum sits on the search boundary x={numeric.x_star:.4g}")
    solution = numeric
    power_law = cfg.noise in ("power_law", "cell_averaged_power_law")
    if power_law and 0.0 < cfg.alpha < 0.5:
        solution = dt.optimal_design_power_law(cfg.alpha, cfg.mu, cfg.rho, cfg.tau)
    design = {
        "x_star": solution.x_star,
        "y_star": solution.y_star,
        "objective": solution.objective_value,
        "method": solution.method,
        "branch": solution.branch,
        "boundary": solution.boundary,
        "numeric_x_star": numeric.x_star,
        "numeric_y_star": numeric.y_star,
    }

    check = dt.eta_validity(d)
    step_size = {"eta": cfg.eta, "eta_cap": dt.eta_cap(d), "valid": check.valid, "condition": check.condition}
    bound = None
    if d.N % d.R == 0:
        a, b = dt.j0_coefficients(d, cfg.C_budget)
        step_size.update({"j0_a": a, "j0_b": b, "eta_star": min(dt.optimal_eta(d, cfg.C_budget), dt.eta_cap(d))})
        try:
            bound = dt.bound_terms(d)
        except EtaValidityError as exc:
            warnings.append(f"bound not evaluated: {exc}")

    lo = max(cfg.x_lo, solution.x_star / 100.0)
    hi = min(cfg.x_hi, solution.x_star * 100.0)
    xs = np.geomspace(lo, hi, cfg.k_points)
    k_rows = []
    Ivals = dt.objective_I(xs, d)
    Kvals = dt.k_curve(cfg.alpha, cfg.mu, cfg.rho, xs) if power_law else np.sqrt(Ivals)
    for x, k, i in zip(xs, Kvals, Ivals):
        k_rows.append({"x": float(x), "K": float(k), "I": float(i)})

    logger.info("[design] x*=%.4g y*=%.4g (%s)", design["x_star"], design["y_star"], design["method"])
    return {"gamma_table": gamma, "design": design, "step_size": step_size, "bound": bound,
            "k_curve": k_rows, "warnings": warnings}


# ----------------------------- synchronous SGD -----------------------------

def sync_base(cfg: inputs.SyncConfig) -> sgd_lab.SyncRunConfig:
    return sgd_lab.SyncRunConfig(
        N=cfg.N, R=cfg.R, B=cfg.B, eta=cfg.eta, T_steps=cfg.T_steps,
        objective=sgd_lab.SyntheticObjective(cfg.objective, cfg.L, cfg.d),
        noise=sgd_lab.NoiseModel(noise_profile(cfg), cfg.kappa, cfg.rho_knob),
        seed=cfg.seed, mu=cfg.mu, theta0_radius=cfg.theta0_radius,
    )


def run_sync_experiment(cfg: inputs.SyncConfig) -> dict:
    """
    Single configuration: one trace per seed plus the bound.
    Sweep (xs, ys and C_budget given): per (cell, seed) rows and per-cell medians.
    """
    warnings = inputs.validate_sync(cfg)
    base = sync_base(cfg)
    seeds = seeds_of(cfg)
    if cfg.xs and cfg.ys and cfg.C_budget is not None:
        sweep = sgd_lab.sweep_designs(cfg.C_budget, cfg.xs, cfg.ys, base, seeds, cfg.eta_mode)
        best = sgd_lab.best_cell(sweep["table"])
        out = {"sweep_rows": sweep["rows"], "sweep_table": sweep["table"], "best_cell": best}
        if cfg.noise in ("power_law", "cell_averaged_power_law") and 0.0 < cfg.alpha < 0.5:
            sol = dt.optimal_design_power_law(cfg.alpha, cfg.mu, min(1.0, cfg.rho_knob), cfg.tau)
            out["predicted"] = {"x_star": sol.x_star, "y_star": sol.y_star}
            out["best_within_one_step"] = sgd_lab.within_one_step(best, sol.x_star, sol.y_star, cfg.xs, cfg.ys)
        out["warnings"] = warnings
        return out

    bound = None
    try:
        bound = dt.convergence_bound(base.design_params())
    except (EtaValidityError, DesignError) as exc:
        warnings.append(f"bound not evaluated: {exc}")
    trace_rows: list[dict] = []
    summary: list[dict] = []
    for seed in seeds:
        tr = sgd_lab.run_sync(replace(base, seed=seed))
        for r in tr.rows:
            trace_rows.append({"seed": seed, "compute": (r["step"] + 1) * (cfg.B + cfg.mu * cfg.R), **r})
        summary.append({
            "seed": seed,
            "mean_grad_norm_sq": tr.mean_grad_norm_sq,
            "mean_noise_sq": tr.mean_noise_sq,
            "final_F": tr.final_value,
            "bound": bound if bound is not None else math.nan,
            "within_bound": bound is None or tr.mean_grad_norm_sq <= bound,
        })
    return {"trace": trace_rows, "summary": summary, "bound": bound, "warnings": warnings}


# ----------------------------- asynchronous pipeline -----------------------------

def pipeline_config(cfg: inputs.AsyncConfig, seed: int) -> async_sim.PipelineConfig:
    return async_sim.PipelineConfig(
        W=cfg.W, T=cfg.T, mu=cfg.mu, horizon=cfg.horizon, transfer=cfg.transfer, N=cfg.N,
        strategy=cfg.strategy, delta=cfg.delta, queue_capacity=cfg.queue_capacity, B=cfg.B, G=cfg.G,
        service_jitter=cfg.service_jitter, weight_sync_every=cfg.weight_sync_every,
        p_correct=cfg.p_correct, C=cfg.C, seed=seed,
    )


def run_async_experiment(cfg: inputs.AsyncConfig) -> dict:
    """Per seed: staleness/replay/gap summaries, stall table, replay ratio and compute ledger."""
    warnings = inputs.validate_async(cfg)
    runs = []
    for seed in seeds_of(cfg):
        trace = async_sim.simulate(pipeline_config(cfg, seed))
        rng = streams.named_stream(seed, streams.METRICS)
        summaries = metrics.replay_summaries(trace.ledger, rng)
        row = {
            "seed": seed,
            "steps": trace.steps,
            "generations": trace.generations,
            "end_time": trace.end_time,
            "time_per_update": trace.time_per_update(),
            "per_update_compute": trace.per_update_compute(),
            "trainer_units": trace.trainer_units,
            "inference_units": trace.inference_units,
            "predicted_replay_ratio": async_sim.steady_state_replay_ratio(cfg.W, cfg.T, cfg.mu),
        }
        if cfg.transfer == "buffer":
            try:
                row["measured_replay_ratio"] = async_sim.measured_replay_ratio(trace)
            except ConfigError as exc:  # horizon too short for a complete lifetime
                warnings.append(f"seed {seed}: {exc}")
                row["measured_replay_ratio"] = math.nan
            row["mu_estimate"] = async_sim.estimated_mu(trace)
        else:
            st = async_sim.staleness_without_buffer(trace)
            row["median_staleness_by_version"] = float(np.median(st)) if st else math.nan
        fr = async_sim.stall_fractions(trace)
        row["trainer_stall"] = fr["trainer"]
        row["worker_stall"] = fr["workers"]
        runs.append({"seed": seed, "trace": trace, "summaries": summaries,
                     "stalls": async_sim.stall_report(trace), "row": row})
    return {"runs": runs, "summary": [r["row"] for r in runs], "warnings": warnings}


# ----------------------------- bandit -----------------------------

def bandit_task(cfg: inputs.BanditConfig) -> rl_toy.BanditTask:
    if cfg.task_file:
        return rl_toy.BanditTask.from_json(cfg.task_file)
    rng = streams.named_stream(cfg.task_seed, "task")
    return rl_toy.BanditTask.random(cfg.P, cfg.K, cfg.n_correct, rng)


def train_config(cfg: inputs.BanditConfig, task: rl_toy.BanditTask, seed: int) -> rl_toy.TrainConfig:
    return rl_toy.TrainConfig(
        task=task,
        loss=rl_toy.LossSpec(cfg.loss, cfg.eps_low, cfg.eps_high, cfg.delta_v, cfg.G),
        transfer=cfg.transfer, schedule=cfg.schedule, W=cfg.W, T=cfg.T, mu=cfg.mu, B=cfg.B, R=cfg.R,
        N=cfg.N, strategy=cfg.strategy, delta=cfg.delta, eta=cfg.eta, steps=cfg.steps,
        eval_every=cfg.eval_every, temperature_train=cfg.temperature_train,
        temperature_eval=cfg.temperature_eval, service_jitter=cfg.service_jitter, C=cfg.C, seed=seed,
    )


def run_bandit_experiment(cfg: inputs.BanditConfig) -> dict:
    """Curves per seed, the median-over-seeds peaks and the compute ledger."""
    warnings = inputs.validate_bandit(cfg)
    task = bandit_task(cfg)
    curve_rows: list[dict] = []
    summary: list[dict] = []
    per_seed: list[list[dict]] = []
    for seed in seeds_of(cfg):
        res = rl_toy.train(train_config(cfg, task, seed))
        for w in res.warnings:
            if w not in warnings:
                warnings.append(w)
        per_seed.append(res.curve)
        for r in res.curve:
            curve_rows.append({"seed": seed, **r})
        summary.append({
            "seed": seed,
            "final_reward": res.curve[-1]["mean_reward"],
            "compute": res.compute,
            "trainer_units": res.trainer_units,
            "inference_units": res.inference_units,
            "mean_batch_entropy": float(np.mean(res.batch_entropy)),
            "mean_correct_fraction": float(np.mean(res.correct_fraction)),
        })
    peaks = {}
    for key in ("mean_reward",) + tuple(f"pass@{k}" for k in rl_toy.PASS_AT_K):
        peaks[key] = metrics.peak_of_median([[r[key] for r in c] for c in per_seed])
    return {"task": task, "curves": curve_rows, "summary": summary, "peaks": peaks, "warnings": warnings}


RUNNERS = {
    "design": run_design,
    "simulate-sync": run_sync_experiment,
    "simulate-async": run_async_experiment,
    "train-bandit": run_bandit_experiment,
}
