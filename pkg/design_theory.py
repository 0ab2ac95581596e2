"""
Convergence bound and optimal design of a replay buffer (buffer-SGD theory).

Symbols: N buffer capacity, R fresh samples per step, B batch size, eta step
size, H = N/R staleness horizon, x = N/R and y = B/R as design ratios,
mu rollout/trainer cost ratio, rho in-batch correlation, kappa bias constant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from config import X_GRID_HI, X_GRID_LO, X_GRID_POINTS
from errors import ConfigError, DesignError, EtaValidityError

logger = logging.getLogger(__name__)

COND_SMOOTH = "L*eta < 1/2"
COND_BIAS = "2*H^2*kappa^2*eta^2 <= 1/4"

# ----------------------------- Noise profiles -----------------------------

CONSTANT = "constant"
POWER_LAW = "power_law"
CELL_AVERAGED = "cell_averaged_power_law"
TABULATED = "tabulated"


@dataclass(frozen=True)
class NoiseProfile:
    """
    Non-decreasing noise level sigma(s) as a function of sample age s.

    power_law:               sigma(s) = (s/tau)^alpha, sigma(0) = 0 when alpha > 0
    cell_averaged_power_law: sigma(s)^2 = integral of (u/tau)^(2 alpha) over [s, s+1];
                             its exact horizon average equals the continuous relaxation
    tabulated:               sigma(s) = values[s], last value held beyond the table
    """

    kind: str
    sigma0: float = 1.0
    alpha: float = 0.0
    tau: float = 1.0
    values: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.kind not in (CONSTANT, POWER_LAW, CELL_AVERAGED, TABULATED):
            raise ConfigError(f"unknown noise profile '{self.kind}'", "noise")
        if self.kind in (POWER_LAW, CELL_AVERAGED):
            if not (0.0 <= self.alpha < 0.5):
                raise ConfigError(f"alpha={self.alpha} outside [0, 1/2)", "alpha")
            if not self.tau > 0:
                raise ConfigError("tau must be > 0", "tau")
        if self.kind == TABULATED:
            if len(self.values) == 0:
                raise ConfigError("tabulated profile needs at least one value", "sigma_table")
            if any(b < a for a, b in zip(self.values, self.values[1:])):
                raise ConfigError("tabulated sigma must be non-decreasing", "sigma_table")
        if self.kind == CONSTANT and self.sigma0 < 0:
            raise ConfigError("sigma0 must be >= 0", "sigma0")

    # constructors
    @classmethod
    def constant(cls, sigma0: float) -> "NoiseProfile":
        return cls(CONSTANT, sigma0=float(sigma0))

    @classmethod
    def power_law(cls, alpha: float, tau: float = 1.0) -> "NoiseProfile":
        return cls(POWER_LAW, alpha=float(alpha), tau=float(tau))

    @classmethod
    def cell_averaged(cls, alpha: float, tau: float = 1.0) -> "NoiseProfile":
        return cls(CELL_AVERAGED, alpha=float(alpha), tau=float(tau))

    @classmethod
    def tabulated(cls, values: Sequence[float]) -> "NoiseProfile":
        return cls(TABULATED, values=tuple(float(v) for v in values))

    def sigma(self, s):
        """sigma(s) for integer age s >= 0 (scalar or array)."""
        s_arr = np.asarray(s, dtype=float)
        if self.kind == CONSTANT:
            out = np.full_like(s_arr, self.sigma0)
        elif self.kind == POWER_LAW:
            if self.alpha == 0.0:
                out = np.ones_like(s_arr)
            else:
                out = (s_arr / self.tau) ** self.alpha
        elif self.kind == CELL_AVERAGED:
            p = 2.0 * self.alpha + 1.0
            sq = ((s_arr + 1.0) ** p - s_arr ** p) / (p * self.tau ** (2.0 * self.alpha))
            out = np.sqrt(sq)
        else:
            table = np.asarray(self.values, dtype=float)
            idx = np.minimum(s_arr.astype(int), len(table) - 1)
            out = table[idx]
        return float(out) if np.ndim(out) == 0 else out

    def sigma_bar_sq(self, H: int) -> float:
        """Exact (1/H) * sum_{s=0}^{H-1} sigma(s)^2."""
        H = int(H)
        if H < 1:
            raise ConfigError("horizon H must be >= 1", "H")
        if self.kind == CONSTANT:
            return self.sigma0 ** 2
        if self.kind == CELL_AVERAGED:
            return self.sigma_bar_sq_relaxed(H)
        s = np.arange(H, dtype=float)
        return float(np.mean(np.asarray(self.sigma(s)) ** 2))

    def sigma_bar_sq_relaxed(self, x):
        """
        Continuous relaxation used by the design optimisers.
        Power laws: (1/(2 alpha + 1)) (x/tau)^(2 alpha). Others: exact average,
        linearly interpolated between integer horizons (x < 1 clamps to H = 1).
        """
        x_arr = np.asarray(x, dtype=float)
        if self.kind in (POWER_LAW, CELL_AVERAGED):
            out = (x_arr / self.tau) ** (2.0 * self.alpha) / (2.0 * self.alpha + 1.0)
        elif self.kind == CONSTANT:
            out = np.full_like(x_arr, self.sigma0 ** 2)
        else:
            xc = np.maximum(x_arr, 1.0)
            lo = np.floor(xc).astype(int)
            hi = np.ceil(xc).astype(int)
            top = int(np.max(hi)) if hi.size else 1
            # prefix means of sigma^2 up to the largest horizon needed
            sq = np.asarray(self.sigma(np.arange(top, dtype=float)), dtype=float) ** 2
            means = np.cumsum(sq) / np.arange(1, top + 1)
            m_lo = means[lo - 1]
            m_hi = means[hi - 1]
            w = xc - lo
            out = m_lo + w * (m_hi - m_lo)
        return float(out) if np.ndim(out) == 0 else out


def sigma_bar_sq(profile: NoiseProfile, H: int) -> float:
    return profile.sigma_bar_sq(H)


def sigma_bar_sq_approx(alpha: float, tau: float, H: float) -> float:
    """Closed-form power-law approximation (1/(2 alpha + 1)) (H/tau)^(2 alpha)."""
    return (H / tau) ** (2.0 * alpha) / (2.0 * alpha + 1.0)


# ----------------------------- Parameters -----------------------------

@dataclass(frozen=True)
class DesignParams:
    mu: float
    rho: float
    profile: NoiseProfile
    kappa: float = 0.0
    L: float = 1.0
    F0: float = 1.0
    N: int = 64
    R: int = 8
    B: int = 16
    eta: float = 0.01
    T_steps: int = 1000

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ConfigError("mu must be > 0", "mu")
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigError("rho must lie in [0, 1]", "rho")
        if self.kappa < 0:
            raise ConfigError("kappa must be >= 0", "kappa")
        if not self.L > 0:
            raise ConfigError("L must be > 0", "L")
        if self.F0 < 0:
            raise ConfigError("F0 must be >= 0", "F0")
        for key in ("N", "R", "B", "T_steps"):
            if int(getattr(self, key)) < 1:
                raise ConfigError("must be a positive integer", key)
        if self.R > self.N:
            raise ConfigError("R must not exceed N", "R")
        if not self.eta > 0:
            raise ConfigError("eta must be > 0", "eta")

    @property
    def horizon(self) -> int:
        if self.N % self.R != 0:
            raise ConfigError(f"R={self.R} must divide N={self.N}", "N")
        return self.N // self.R


@dataclass(frozen=True)
class DesignSolution:
    x_star: float
    y_star: float
    objective_value: float
    method: str  # "closed_form" | "grid_refine"
    boundary: bool = False
    branch: str | None = None


@dataclass(frozen=True)
class EtaCheck:
    valid: bool
    condition: str | None = None


# ----------------------------- Convergence bound -----------------------------

def variance_param(d: DesignParams) -> float:
    """V = sigma_bar^2(N/R) * (1/B + 1/N + rho/R)"""
    sb = d.profile.sigma_bar_sq(d.horizon)
    return sb * (1.0 / d.B + 1.0 / d.N + d.rho / d.R)


def eta_validity(d: DesignParams) -> EtaCheck:
    """
    eta < 1/(2L) and eta <= R/(2 sqrt(2) kappa N).
    The smoothness cap is read as L*eta < 1/2.
    """
    if not d.L * d.eta < 0.5:
        return EtaCheck(False, COND_SMOOTH)
    if d.kappa > 0:
        H = d.N / d.R
        if 2.0 * H * H * d.kappa * d.kappa * d.eta * d.eta > 0.25 * (1.0 + 1e-12):
            return EtaCheck(False, COND_BIAS)
    return EtaCheck(True)


def eta_cap(d: DesignParams) -> float:
    """Largest admissible eta (the open cap 1/(2L) is approached from below)."""
    cap = math.nextafter(0.5 / d.L, 0.0)
    if d.kappa > 0:
        cap = min(cap, d.R / (2.0 * math.sqrt(2.0) * d.kappa * d.N))
    return cap


def bound_terms(d: DesignParams) -> dict:
    """Pieces of the convergence bound; raises when eta is outside the valid region."""
    check = eta_validity(d)
    if not check.valid:
        raise EtaValidityError(check.condition, d.eta)
    V = variance_param(d)
    optimisation = 12.0 * d.F0 / (d.eta * d.T_steps)
    bias_factor = 4.0 * d.N ** 2 * d.kappa ** 2 * d.eta / d.R ** 2
    noise = 8.0 * d.eta * (bias_factor + d.L) * V
    return {"optimisation": optimisation, "noise": noise, "V": V, "bound": optimisation + noise}


def convergence_bound(d: DesignParams) -> float:
    """12 F0/(eta T) + 8 eta (4 N^2 kappa^2 eta / R^2 + L) V"""
    return bound_terms(d)["bound"]


# ----------------------------- Design objectives -----------------------------

def objective_J(x, y, d: DesignParams):
    """J(x, y) = sigma_bar^2(x) (1 + y/mu) (1/y + 1/x + rho)"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = d.profile.sigma_bar_sq_relaxed(x) * (1.0 + y / d.mu) * (1.0 / y + 1.0 / x + d.rho)
    return float(out) if np.ndim(out) == 0 else out


def objective_I(x, d: DesignParams):
    """I(x) = sigma_bar^2(x) (1/sqrt(mu) + sqrt(rho + 1/x))^2 = min over y of J(x, y)"""
    x = np.asarray(x, dtype=float)
    out = d.profile.sigma_bar_sq_relaxed(x) * (1.0 / math.sqrt(d.mu) + np.sqrt(d.rho + 1.0 / x)) ** 2
    return float(out) if np.ndim(out) == 0 else out


def y_from_x(x, mu: float, rho: float):
    """Replay ratio minimising J at fixed x: sqrt(mu / (rho + 1/x))"""
    x = np.asarray(x, dtype=float)
    out = np.sqrt(mu / (rho + 1.0 / x))
    return float(out) if np.ndim(out) == 0 else out


def k_curve(alpha: float, mu: float, rho: float, xs) -> np.ndarray:
    """K(x) = x^alpha (1/sqrt(mu) + sqrt(rho + 1/x)); sqrt of I up to a constant for power laws."""
    xs = np.asarray(xs, dtype=float)
    return xs ** alpha * (1.0 / math.sqrt(mu) + np.sqrt(rho + 1.0 / xs))


def optimal_design_numeric(d: DesignParams,
                           lo: float = X_GRID_LO,
                           hi: float = X_GRID_HI,
                           points: int = X_GRID_POINTS) -> DesignSolution:
    """Log grid over x followed by golden-section refinement of I in log x."""
    if not 0 < lo < hi:
        raise ConfigError(f"search range for x needs 0 < x_lo < x_hi, got [{lo}, {hi}]", "x_lo")
    if int(points) < 3:
        raise ConfigError("x_points must be >= 3", "x_points")
    logs = np.linspace(math.log(lo), math.log(hi), int(points))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        vals = np.asarray(objective_I(np.exp(logs), d), dtype=float)
    finite = np.isfinite(vals)
    if not finite.any():
        raise DesignError("design objective is non-finite over the whole grid")
    vals = np.where(finite, vals, np.inf)
    i = int(np.argmin(vals))
    if i == 0 or i == len(logs) - 1:
        x_star = float(math.exp(logs[i]))
        logger.warning("[design] optimum on the search boundary (x=%.3g)", x_star)
        return DesignSolution(x_star, y_from_x(x_star, d.mu, d.rho), float(vals[i]), "grid_refine", boundary=True)

    def f(u: float) -> float:
        return float(objective_I(math.exp(u), d))

    try:
        res = minimize_scalar(f, bracket=(logs[i - 1], logs[i], logs[i + 1]), method="golden")
    except ValueError:
        # flat neighbourhood: the bracket condition fails, fall back to a bounded search
        res = minimize_scalar(f, bounds=(logs[i - 1], logs[i + 1]), method="bounded")
    u = float(res.x)
    if not (logs[i - 1] <= u <= logs[i + 1]) or f(u) > vals[i]:
        u = float(logs[i])
    x_star = math.exp(u)
    return DesignSolution(x_star, y_from_x(x_star, d.mu, d.rho), f(u), "grid_refine")


def optimal_design_power_law(alpha: float, mu: float, rho: float, tau: float = 1.0) -> DesignSolution:
    """
    Closed-form optimum for sigma(s) = (s/tau)^alpha.

    y* = mu(1-2a) / (a + sqrt(a^2 + mu rho (1-2a)))
    x* = (1-2a)^2 / (2a (a/mu + rho(1-2a) + sqrt(a^2/mu^2 + rho(1-2a)/mu)))

    Both are the rationalised forms of the quadratic roots; they stay finite at
    rho = 0 and rho = 1/mu where the textbook expressions divide by zero.
    """
    if not (0.0 < alpha < 0.5):
        raise DesignError(f"closed form needs alpha in (0, 1/2), got {alpha}")
    if not mu > 0:
        raise DesignError("mu must be > 0")
    if not (0.0 <= rho <= 1.0):
        raise DesignError("rho must lie in [0, 1]")
    beta = 1.0 - 2.0 * alpha
    if rho == 0.0:
        branch = "rho_zero"
        y = mu * beta / (2.0 * alpha)
        x = y * y / mu
    elif math.isclose(rho * mu, 1.0, rel_tol=1e-12):
        branch = "rho_inverse_mu"
        # leading coefficient vanishes: the quadratic in x is linear
        x = mu * beta * beta / (4.0 * alpha * (1.0 - alpha))
        y = mu * beta / (alpha + math.sqrt(alpha * alpha + mu * rho * beta))
    else:
        branch = "general"
        A = alpha / mu + rho * beta
        D = math.sqrt(alpha * alpha / (mu * mu) + rho * beta / mu)
        x = beta * beta / (2.0 * alpha * (A + D))
        y = mu * beta / (alpha + math.sqrt(alpha * alpha + mu * rho * beta))
    d = DesignParams(mu=mu, rho=rho, profile=NoiseProfile.power_law(alpha, tau))
    return DesignSolution(x, y, float(objective_I(x, d)), "closed_form", branch=branch)


# ----------------------------- Step size -----------------------------

def j0_coefficients(d: DesignParams, C_budget: float) -> tuple[float, float]:
    """a, b of J0(eta) = a/eta + b*eta at compute budget C = (B + mu R) T."""
    if not C_budget > 0:
        raise ConfigError("compute budget must be > 0", "C_budget")
    x = d.N / d.R
    sb = d.profile.sigma_bar_sq(d.N // d.R) if d.N % d.R == 0 else d.profile.sigma_bar_sq_relaxed(x)
    a = 12.0 * d.F0 * (d.B + d.mu * d.R) / C_budget
    b = 8.0 * d.L * sb * (1.0 / d.B + 1.0 / d.N + d.rho / d.R)
    return a, b


def j0(eta: float, d: DesignParams, C_budget: float) -> float:
    a, b = j0_coefficients(d, C_budget)
    return a / eta + b * eta


def eta_from_coefficients(a: float, b: float) -> float:
    return math.sqrt(a / b)


def optimal_eta(d: DesignParams, C_budget: float) -> float:
    """argmin of a/eta + b*eta; falls back to the validity cap when the noise term vanishes."""
    a, b = j0_coefficients(d, C_budget)
    if b <= 0:
        cap = eta_cap(d)
        logger.warning("[design] noise term is zero; step size unbounded, using validity cap %.6g", cap)
        return cap
    return eta_from_coefficients(a, b)
