"""
Synchronous buffer-SGD testbed.

Each step inserts R fresh samples (frozen at the current parameters) into a
FIFO buffer of capacity N, draws B of them uniformly with replacement and
takes a plain SGD step on the mean synthetic gradient. The synthetic noise
satisfies the conditions of the convergence bound by construction, so the
bound and the optimal design can be checked on real trajectories.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

import design_theory as dt
import streams
from buffer_core import SamplingStrategy, ShardedReplayBuffer
from config import DIMENSION, DIVERGENCE_NORM, MIN_SWEEP_SEEDS, THETA0_RADIUS
from errors import ConfigError, DivergenceError, EtaValidityError, LedgerError

logger = logging.getLogger(__name__)

QUADRATIC = "quadratic"
DOUBLE_WELL = "double_well"


@dataclass(frozen=True)
class SyntheticObjective:
    """
    quadratic:   F(theta) = L/2 |theta|^2
    double_well: F(theta) = sum_i (L/6) (u_i^2 - 1)^2 / (1 + u_i^2); wells at u = +-1,
                 curvature between -L and 2L/3, so the function is L-smooth
    """

    kind: str = QUADRATIC
    L: float = 1.0
    d: int = DIMENSION

    def __post_init__(self) -> None:
        if self.kind not in (QUADRATIC, DOUBLE_WELL):
            raise ConfigError(f"unknown objective '{self.kind}'", "objective")
        if not self.L > 0:
            raise ConfigError("L must be > 0", "L")
        if self.d < 1:
            raise ConfigError("dimension must be >= 1", "d")

    def value(self, theta: np.ndarray) -> float:
        if self.kind == QUADRATIC:
            return 0.5 * self.L * float(theta @ theta)
        u2 = theta * theta
        return float(np.sum((self.L / 6.0) * (u2 - 1.0) ** 2 / (1.0 + u2)))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        if self.kind == QUADRATIC:
            return self.L * theta
        u2 = theta * theta
        return (self.L / 3.0) * theta * (u2 - 1.0) * (u2 + 3.0) / (1.0 + u2) ** 2


@dataclass(frozen=True)
class SyntheticSample:
    rollout_id: int
    creation_step: int
    frozen_theta: np.ndarray = field(repr=False)
    noise_direction: np.ndarray = field(repr=False)
    noise_scale_seed: int = 0


@dataclass(frozen=True)
class NoiseModel:
    """Age-dependent noise sigma(t - t_i), saturated bias kappa, in-batch correlation rho_knob."""

    profile: dt.NoiseProfile
    kappa: float = 0.0
    rho_knob: float = 0.0

    def correlation_weight(self, N: int, R: int) -> float:
        """
        Loading on the shared per-step factor: the pairwise cap rho |t_i - t_j| / N
        averaged over pairs from a full buffer, E|t_i - t_j| = (H^2 - 1)/(3H), clipped at 1.
        """
        if self.rho_knob <= 0:
            return 0.0
        H = N / R
        return min(1.0, self.rho_knob * (H * H - 1.0) / (3.0 * H * N))


@dataclass(frozen=True)
class SyncRunConfig:
    N: int
    R: int
    B: int
    eta: float
    T_steps: int
    objective: SyntheticObjective = field(default_factory=SyntheticObjective)
    noise: NoiseModel = field(default_factory=lambda: NoiseModel(dt.NoiseProfile.constant(1.0)))
    seed: int = 0
    mu: float = 1.0
    theta0_radius: float = THETA0_RADIUS
    check_eta: bool = True

    def __post_init__(self) -> None:
        for key in ("N", "R", "B", "T_steps"):
            if int(getattr(self, key)) < 1:
                raise ConfigError("must be a positive integer", key)
        if self.N % self.R != 0:
            raise ConfigError(f"R={self.R} must divide N={self.N}", "N")
        if not self.eta > 0:
            raise ConfigError("eta must be > 0", "eta")

    def theta0(self) -> np.ndarray:
        rng = streams.named_stream(self.seed, "theta0")
        v = rng.standard_normal(self.objective.d)
        return self.theta0_radius * v / np.linalg.norm(v)

    def design_params(self) -> dt.DesignParams:
        return dt.DesignParams(
            mu=self.mu, rho=min(1.0, self.noise.rho_knob), profile=self.noise.profile,
            kappa=self.noise.kappa, L=self.objective.L, F0=self.objective.value(self.theta0()),
            N=self.N, R=self.R, B=self.B, eta=self.eta, T_steps=self.T_steps,
        )


@dataclass
class SyncTrace:
    rows: list[dict]
    mean_grad_norm_sq: float
    mean_noise_sq: float
    final_value: float
    inserted: list[int]
    evicted: list[int]
    config: SyncRunConfig


def _xi(sample: SyntheticSample, t: int) -> float:
    return float(np.random.default_rng([sample.noise_scale_seed, int(t)]).standard_normal())


def synth_gradient(theta_t: np.ndarray, sample: SyntheticSample, t: int,
                   objective: SyntheticObjective, noise: NoiseModel,
                   common: np.ndarray | None = None, weight: float = 0.0) -> np.ndarray:
    """
    grad F(theta_t) + kappa (theta_t - theta_{t_i}) + sigma(t - t_i) * eps, with
    eps = sqrt(1 - w) xi u_i + sqrt(w) common; xi seeded by (noise_scale_seed, t).
    """
    age = t - sample.creation_step
    if age < 0:
        raise LedgerError(f"sample {sample.rollout_id} created at {sample.creation_step} used at {t}")
    g = objective.grad(theta_t)
    if noise.kappa > 0 and age > 0:
        # |bias| = kappa |theta_t - theta_{t_i}| along the drift direction
        g = g + noise.kappa * (theta_t - sample.frozen_theta)
    s = float(noise.profile.sigma(age))
    if s > 0:
        eps = math.sqrt(1.0 - weight) * _xi(sample, t) * sample.noise_direction
        if common is not None and weight > 0:
            eps = eps + math.sqrt(weight) * common
        g = g + s * eps
    return g


def run_sync(config: SyncRunConfig) -> SyncTrace:
    """T_steps of buffer-SGD; statistic is (1/T) sum_t |grad F(theta_t)|^2."""
    if config.check_eta:
        check = dt.eta_validity(config.design_params())
        if not check.valid:
            raise EtaValidityError(check.condition, config.eta)
    obj = config.objective
    noise = config.noise
    buf = ShardedReplayBuffer(config.N, 1, SamplingStrategy.UNIFORM_WITH_REPLACEMENT)
    rng_train = streams.named_stream(config.seed, streams.TRAINING)
    rng_noise = streams.named_stream(config.seed, streams.NOISE)
    w = noise.correlation_weight(config.N, config.R)

    theta = config.theta0()
    rows: list[dict] = []
    inserted: list[int] = []
    evicted: list[int] = []
    next_id = 0
    for t in range(config.T_steps):
        for _ in range(config.R):
            u = rng_noise.standard_normal(obj.d)
            s = SyntheticSample(next_id, t, theta.copy(), u / np.linalg.norm(u),
                                int(rng_noise.integers(0, 2 ** 62)))
            ev = buf.push(s)
            inserted.append(next_id)
            if ev is not None:
                evicted.append(ev.rollout_id)
            next_id += 1
        batch = buf.sample(config.B, rng_train, use_step=t, batch_id=t).records
        common = rng_noise.standard_normal(obj.d) / math.sqrt(obj.d) if w > 0 else None

        grad_true = obj.grad(theta)
        g = np.zeros_like(theta)
        by_id = {s.rollout_id: s for s in batch}
        for rid, mult in Counter(s.rollout_id for s in batch).items():
            g += mult * synth_gradient(theta, by_id[rid], t, obj, noise, common, w)
        g /= len(batch)

        gn = float(grad_true @ grad_true)
        diff = g - grad_true
        rows.append({
            "step": t,
            "grad_norm_sq": gn,
            "F": obj.value(theta),
            "occupancy": len(buf),
            "noise_sq": float(diff @ diff),
        })
        theta = theta - config.eta * g
        norm = float(np.linalg.norm(theta))
        if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise DivergenceError(t, norm)

    mean_gn = math.fsum(r["grad_norm_sq"] for r in rows) / len(rows)
    mean_noise = math.fsum(r["noise_sq"] for r in rows) / len(rows)
    logger.debug("[sgd] N=%d R=%d B=%d eta=%.4g seed=%d -> %.6g", config.N, config.R, config.B,
                 config.eta, config.seed, mean_gn)
    return SyncTrace(rows, mean_gn, mean_noise, obj.value(theta), inserted, evicted, config)


# ----------------------------- Design sweeps -----------------------------

@dataclass(frozen=True)
class SweepCell:
    x: float
    y: float
    N: int
    R: int
    B: int
    T_steps: int
    eta: float


def _as_int(v: float) -> int | None:
    r = round(v)
    return int(r) if abs(v - r) < 1e-9 and r >= 1 else None


def plan_cells(C_budget: float, xs: Sequence[float], ys: Sequence[float], base: SyncRunConfig,
               eta_mode: str = "fixed") -> list[SweepCell]:
    """Feasible (x, y) cells: integral N = xR and B = yR, T = floor(C/(B + mu R)) >= 1."""
    cells = []
    R = base.R
    for x in xs:
        for y in ys:
            N = _as_int(x * R)
            B = _as_int(y * R)
            if N is None or B is None or N % R != 0:
                logger.info("[sgd] skipping non-integral cell x=%g y=%g at R=%d", x, y, R)
                continue
            T = int(math.floor(C_budget / (B + base.mu * R) + 1e-12))
            if T < 1:
                continue
            eta = base.eta
            if eta_mode == "optimal":
                d = replace(base, N=N, B=B, T_steps=T, check_eta=False).design_params()
                eta = min(dt.optimal_eta(d, C_budget), dt.eta_cap(d))
            cells.append(SweepCell(float(x), float(y), N, R, B, T, eta))
    if not cells:
        raise ConfigError("no feasible cell in the design grid", "grid")
    return cells


def sweep_designs(C_budget: float, xs: Sequence[float], ys: Sequence[float], base: SyncRunConfig,
                  seeds: Sequence[int] | None = None, eta_mode: str = "fixed") -> dict:
    """
    One run per (cell, seed); returns {"rows": per-run rows, "table": per-cell medians}.
    Diverged runs are kept with an infinite statistic.
    """
    seeds = list(seeds) if seeds is not None else list(range(MIN_SWEEP_SEEDS))
    if len(seeds) < MIN_SWEEP_SEEDS:
        logger.warning("[sgd] %d seeds per cell, fewer than %d", len(seeds), MIN_SWEEP_SEEDS)
    rows = []
    table = []
    for cell in plan_cells(C_budget, xs, ys, base, eta_mode):
        stats = []
        for seed in seeds:
            cfg = replace(base, N=cell.N, B=cell.B, T_steps=cell.T_steps, eta=cell.eta, seed=int(seed))
            try:
                stat = run_sync(cfg).mean_grad_norm_sq
            except DivergenceError as exc:
                logger.warning("[sgd] cell x=%g y=%g seed=%d diverged at step %d", cell.x, cell.y, seed, exc.step)
                stat = math.inf
            stats.append(stat)
            rows.append({"x": cell.x, "y": cell.y, "N": cell.N, "R": cell.R, "B": cell.B,
                         "T": cell.T_steps, "eta": cell.eta, "seed": int(seed), "stat": stat})
        table.append({"x": cell.x, "y": cell.y, "N": cell.N, "R": cell.R, "B": cell.B, "T": cell.T_steps,
                      "eta": cell.eta, "median": float(np.median(stats)), "seeds": len(stats)})
    return {"rows": rows, "table": table}


def best_cell(table: list[dict]) -> dict:
    return min(table, key=lambda r: r["median"])


def nearest_index(value: float, grid: Sequence[float]) -> int:
    """Grid index closest to value on a log scale."""
    logs = np.log(np.asarray(grid, dtype=float))
    return int(np.argmin(np.abs(logs - math.log(value))))


def within_one_step(cell: dict, x_star: float, y_star: float,
                    xs: Sequence[float], ys: Sequence[float]) -> bool:
    ix = list(xs).index(cell["x"])
    iy = list(ys).index(cell["y"])
    return abs(ix - nearest_index(x_star, xs)) <= 1 and abs(iy - nearest_index(y_star, ys)) <= 1
