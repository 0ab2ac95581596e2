"""
Core compute-accounting equations for buffered asynchronous RL
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from config import C_UNIT
from errors import ConfigError


@dataclass(frozen=True)
class ComputeParams:
    """W inference workers, T trainers, rollout/trainer cost ratio mu, trainer-step cost C."""

    W: int
    T: int
    mu: float
    C: float = C_UNIT

    def __post_init__(self) -> None:
        if self.W < 0:
            raise ConfigError("worker count must be >= 0", "W")
        if self.T < 1:
            raise ConfigError("trainer count must be >= 1", "T")
        if not self.mu >= 0:
            raise ConfigError("mu must be >= 0", "mu")
        if not self.C > 0:
            raise ConfigError("C must be > 0", "C")


# Per-update cost
def cost_without_buffer(p: ComputeParams) -> float:
    """Every update needs a fresh rollout batch: C(1 + mu)"""
    return p.C * (1.0 + p.mu)


def cost_with_buffer(p: ComputeParams) -> float:
    """Workers never idle, so each update carries W/T of a rollout batch: C(1 + W/T)"""
    return p.C * (1.0 + p.W / p.T)


def compute_ratio(p: ComputeParams) -> float:
    """gamma = (1 + W/T) / (1 + mu)"""
    return (1.0 + p.W / p.T) / (1.0 + p.mu)


def gamma_table(mu: float, pairs: Iterable[tuple[int, int]], C: float = C_UNIT) -> list[dict]:
    """One row per (W, T) pair, in the order given."""
    rows = []
    for W, T in pairs:
        p = ComputeParams(W=int(W), T=int(T), mu=mu, C=C)
        rows.append({
            "W": p.W,
            "T": p.T,
            "mu": mu,
            "cost_without_buffer": cost_without_buffer(p),
            "cost_with_buffer": cost_with_buffer(p),
            "gamma": compute_ratio(p),
        })
    return rows


def estimate_mu(K_training: float, T: float, K_inference: float, W: float) -> float:
    """
    Rollout/trainer cost ratio from throughput counts:
    K_training samples consumed by T trainers, K_inference samples produced by W workers
    over the same window.
    """
    if K_inference <= 0 or W <= 0:
        raise ConfigError("K_inference and W must be positive", "K_inference" if K_inference <= 0 else "W")
    if K_training <= 0 or T <= 0:
        raise ConfigError("K_training and T must be positive", "K_training" if K_training <= 0 else "T")
    return (K_training / T) / (K_inference / W)


def median_iqr(values: Sequence[float]) -> tuple[float, float, float]:
    """(median, q25, q75) with linear interpolation, used for mu across runs."""
    if len(values) == 0:
        raise ConfigError("need at least one value", "values")
    arr = np.asarray(values, dtype=float)
    q25, med, q75 = np.percentile(arr, [25.0, 50.0, 75.0])
    return float(med), float(q25), float(q75)


def parity_scale(baseline: ComputeParams, buffered: ComputeParams) -> float:
    """Factor mapping buffered-run updates onto the baseline's compute axis (= gamma)."""
    return cost_with_buffer(buffered) / cost_without_buffer(baseline)


def updates_for_budget(budget: float, per_update: float) -> int:
    """Whole updates affordable at `per_update` cost."""
    if per_update <= 0:
        raise ConfigError("per-update cost must be positive", "per_update")
    return int(math.floor(budget / per_update + 1e-12))
