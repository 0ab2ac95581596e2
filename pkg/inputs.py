"""
Configuration parsing and soft validation.

Config files are flat `key = value` text, `#` starts a comment. Each
subcommand has a pydantic schema; unknown keys and unparsable values are
hard errors naming the key. Out-of-range but usable values only produce
warnings, returned next to results the way the calculator always did.
"""

from __future__ import annotations

import itertools
import logging
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from config import (
    ALPHA_RANGE,
    ASYMRE_DELTA_V,
    C_UNIT,
    DEFAULT_BATCH,
    DEFAULT_DELTA,
    DEFAULT_GROUP,
    DEFAULT_JITTER_CV,
    DIMENSION,
    GRPO_EPS_HIGH,
    GRPO_EPS_LOW,
    GROUP_SIZE,
    MU_RANGE,
    MU_LARGE_MODEL,
    REPLAY_RATIO_HINT,
    TEMP_EVAL,
    TEMP_TRAIN,
    THETA0_RADIUS,
    X_GRID_HI,
    X_GRID_LO,
    X_GRID_POINTS,
)
from errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_PAIRS = ((7, 1), (6, 2), (5, 3), (4, 4), (2, 6), (1, 7))


# ----------------------------- key = value text -----------------------------

def parse_kv_text(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got '{raw.strip()}'", line.split()[0])
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key", "")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key", key)
        out[key] = value
    return out


def parse_kv_file(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_kv_text(f.read(), path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}", "config") from exc


def parse_grid_overrides(text: str | None) -> dict[str, list[str]]:
    """"k=v1,v2;k2=w1" -> {"k": ["v1", "v2"], "k2": ["w1"]}"""
    grid: dict[str, list[str]] = {}
    if not text:
        return grid
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"grid override '{part}' is not key=values", part)
        key, values = (p.strip() for p in part.split("=", 1))
        items = [v.strip() for v in values.split(",") if v.strip()]
        if not items:
            raise ConfigError("grid override has no values", key)
        grid[key] = items
    return grid


def expand_grid(base: dict[str, str], grid: dict[str, list[str]]) -> list[dict[str, str]]:
    """
    Cartesian product of the override values on top of `base`, keys in given
    order. The key WT takes W:T pairs and sets both W and T.
    """
    if not grid:
        return [dict(base)]
    keys = list(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = dict(base)
        for key, value in zip(keys, combo):
            if key == "WT":
                w, _, t = value.partition(":")
                if not t:
                    raise ConfigError(f"'{value}' is not a W:T pair", "WT")
                cell["W"], cell["T"] = w.strip(), t.strip()
            else:
                cell[key] = value
        cells.append(cell)
    return cells


def grid_keys(grid: dict[str, list[str]]) -> list[str]:
    """Config keys a grid varies (WT expands to W and T)."""
    out: list[str] = []
    for key in grid:
        out.extend(("W", "T") if key == "WT" else (key,))
    return out


def _split(v):
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    return v


def _pairs(v):
    """"7:1,6:2" -> [(7, 1), (6, 2)]"""
    if isinstance(v, str):
        out = []
        for tok in _split(v):
            w, _, t = tok.partition(":")
            if not t:
                raise ValueError(f"'{tok}' is not a W:T pair")
            out.append((int(w), int(t)))
        return out
    return v


# ----------------------------- schemas -----------------------------

class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NoiseSection(_Schema):
    noise: Literal["constant", "power_law", "cell_averaged_power_law", "tabulated"] = Field(
        default="power_law", description="sigma(s) family")
    alpha: float = Field(default=0.3, ge=0.0, lt=0.5, description="power-law exponent")
    tau: float = Field(default=1.0, gt=0.0, description="power-law age scale (steps)")
    sigma0: float = Field(default=1.0, ge=0.0, description="constant noise level")
    sigma_table: list[float] = Field(default_factory=list, description="tabulated sigma(s), s = 0, 1, ...")

    @field_validator("sigma_table", mode="before")
    @classmethod
    def split_table(cls, v):
        return _split(v)


class DesignConfig(NoiseSection):
    mu: float = Field(default=MU_LARGE_MODEL, gt=0.0, description="rollout/trainer cost ratio")
    rho: float = Field(default=0.1, ge=0.0, le=1.0, description="in-batch correlation")
    kappa: float = Field(default=0.0, ge=0.0)
    L: float = Field(default=1.0, gt=0.0, description="smoothness constant")
    F0: float = Field(default=1.0, ge=0.0, description="initial suboptimality")
    N: int = Field(default=64, ge=1)
    R: int = Field(default=8, ge=1)
    B: int = Field(default=16, ge=1)
    eta: float = Field(default=0.01, gt=0.0)
    T_steps: int = Field(default=1000, ge=1)
    C_budget: float = Field(default=1e5, gt=0.0, description="compute budget (trainer-step units)")
    C: float = Field(default=C_UNIT, gt=0.0)
    pairs: list[tuple[int, int]] = Field(default_factory=lambda: list(DEFAULT_PAIRS), description="W:T list")
    k_points: int = Field(default=50, ge=2, description="K(x) curve samples")
    x_lo: float = Field(default=X_GRID_LO, gt=0.0)
    x_hi: float = Field(default=X_GRID_HI, gt=0.0)
    x_points: int = Field(default=X_GRID_POINTS, ge=3)

    @field_validator("pairs", mode="before")
    @classmethod
    def split_pairs(cls, v):
        return _pairs(v)


class SyncConfig(NoiseSection):
    objective: Literal["quadratic", "double_well"] = "quadratic"
    L: float = Field(default=1.0, gt=0.0)
    d: int = Field(default=DIMENSION, ge=1, description="parameter dimension")
    N: int = Field(default=64, ge=1)
    R: int = Field(default=8, ge=1)
    B: int = Field(default=16, ge=1)
    eta: float = Field(default=0.05, gt=0.0)
    T_steps: int = Field(default=1000, ge=1)
    kappa: float = Field(default=0.0, ge=0.0)
    rho_knob: float = Field(default=0.0, ge=0.0)
    mu: float = Field(default=1.0, gt=0.0)
    theta0_radius: float = Field(default=THETA0_RADIUS, gt=0.0)
    seed: int = 0
    seeds: Optional[str] = Field(default=None, description="comma list or a-b range")
    # sweep: active when xs and ys are given
    C_budget: Optional[float] = Field(default=None, gt=0.0)
    xs: list[float] = Field(default_factory=list, description="N/R grid")
    ys: list[float] = Field(default_factory=list, description="B/R grid")
    eta_mode: Literal["fixed", "optimal"] = "fixed"

    @field_validator("xs", "ys", mode="before")
    @classmethod
    def split_grid(cls, v):
        return _split(v)


class AsyncConfig(_Schema):
    W: int = Field(default=6, ge=1)
    T: int = Field(default=2, ge=1)
    mu: float = Field(default=5.34, gt=0.0)
    horizon: int = Field(default=2000, ge=1, description="trainer steps")
    transfer: Literal["queue", "buffer"] = "buffer"
    N: int = Field(default=252, ge=1)
    strategy: Literal["uniform_with_replacement", "uniform_without_replacement",
                      "unused_first_without_replacement", "freshest"] = "uniform_with_replacement"
    delta: float = Field(default=DEFAULT_DELTA, ge=0.0, le=1.0)
    queue_capacity: Optional[int] = Field(default=None, ge=0, description="0 = unbounded; unset = 2B")
    B: int = Field(default=DEFAULT_BATCH, ge=1)
    G: int = Field(default=DEFAULT_GROUP, ge=1)
    service_jitter: float = Field(default=DEFAULT_JITTER_CV, ge=0.0, description="cv of generation time")
    weight_sync_every: int = Field(default=1, ge=1)
    p_correct: float = Field(default=0.5, ge=0.0, le=1.0)
    C: float = Field(default=C_UNIT, gt=0.0)
    seed: int = 0
    seeds: Optional[str] = None


class BanditConfig(_Schema):
    task_file: Optional[str] = None
    P: int = Field(default=10, ge=1, description="prompts (random task)")
    K: int = Field(default=8, ge=2, description="arms (random task)")
    n_correct: int = Field(default=2, ge=1)
    loss: Literal["grpo", "asymre"] = "grpo"
    eps_low: float = Field(default=GRPO_EPS_LOW, ge=0.0)
    eps_high: float = Field(default=GRPO_EPS_HIGH, ge=0.0)
    delta_v: float = ASYMRE_DELTA_V
    G: int = Field(default=GROUP_SIZE, ge=2)
    transfer: Literal["queue", "buffer"] = "queue"
    schedule: Literal["sync", "async"] = "sync"
    W: int = Field(default=6, ge=1)
    T: int = Field(default=2, ge=1)
    mu: float = Field(default=6.0, gt=0.0)
    B: int = Field(default=32, ge=1)
    R: Optional[int] = Field(default=None, ge=1)
    N: int = Field(default=64, ge=1)
    strategy: Literal["uniform_with_replacement", "uniform_without_replacement",
                      "unused_first_without_replacement", "freshest"] = "uniform_with_replacement"
    delta: float = Field(default=DEFAULT_DELTA, ge=0.0, le=1.0)
    eta: float = Field(default=1.0, gt=0.0)
    steps: int = Field(default=2000, ge=1)
    eval_every: int = Field(default=50, ge=1)
    temperature_train: float = Field(default=TEMP_TRAIN, gt=0.0)
    temperature_eval: float = Field(default=TEMP_EVAL, gt=0.0)
    service_jitter: float = Field(default=0.0, ge=0.0)
    C: float = Field(default=C_UNIT, gt=0.0)
    task_seed: int = Field(default=0, description="seed of the random task")
    seed: int = 0
    seeds: Optional[str] = None


SCHEMAS: dict[str, type[_Schema]] = {
    "design": DesignConfig,
    "simulate-sync": SyncConfig,
    "simulate-async": AsyncConfig,
    "train-bandit": BanditConfig,
}


def build_config(kind: str, values: dict[str, str]):
    """Validate raw key/value strings against the subcommand schema."""
    try:
        schema = SCHEMAS[kind]
    except KeyError:
        raise ConfigError(f"unknown subcommand '{kind}'", "subcommand") from None
    try:
        return schema.model_validate(values)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"]) or None
        if err["type"] == "extra_forbidden":
            raise ConfigError("unknown key", key) from None
        raise ConfigError(f"{err['msg']} (got {err.get('input')!r})", key) from None


def load_config(kind: str, path: str | None = None, overrides: dict[str, str] | None = None):
    values = parse_kv_file(path) if path else {}
    values.update(overrides or {})
    cfg = build_config(kind, values)
    logger.debug("[config] %s: %s", kind, cfg.model_dump())
    return cfg


def config_cells(kind: str, path: str | None, overrides: dict[str, str] | None,
                 grid_text: str | None) -> list:
    """One validated config per grid cell."""
    base = parse_kv_file(path) if path else {}
    base.update(overrides or {})
    return [build_config(kind, cell) for cell in expand_grid(base, parse_grid_overrides(grid_text))]


def resolved_values(cfg) -> dict:
    return cfg.model_dump(mode="json")


# ----------------------------- soft validation -----------------------------

def _warn_range(warnings: list[str], label: str, val: float, lo: float, hi: float) -> None:
    warnings.append(
        f"{label} = {val:.4g} outside the usual range [{lo:.4g}, {hi:.4g}]; "
        "computed with the value as given, results may be unrealistic."
    )


def validate_design(cfg: DesignConfig) -> list[str]:
    """Never raises; returns warnings."""
    warnings: list[str] = []
    if not (MU_RANGE[0] <= cfg.mu <= MU_RANGE[1]):
        _warn_range(warnings, "mu", cfg.mu, *MU_RANGE)
    if cfg.noise in ("power_law", "cell_averaged_power_law") and cfg.alpha == ALPHA_RANGE[0]:
        warnings.append("alpha = 0: staleness is free, the optimal horizon is unbounded")
    if cfg.N % cfg.R != 0:
        warnings.append(f"R={cfg.R} does not divide N={cfg.N}; bound terms need an integer horizon")
    return warnings


def validate_sync(cfg: SyncConfig) -> list[str]:
    warnings: list[str] = []
    if cfg.N % cfg.R != 0:
        warnings.append(f"R={cfg.R} does not divide N={cfg.N}")
    rr = cfg.B / cfg.R
    if not (REPLAY_RATIO_HINT[0] <= rr <= REPLAY_RATIO_HINT[1]):
        _warn_range(warnings, "replay ratio B/R", rr, *REPLAY_RATIO_HINT)
    if cfg.rho_knob > 1.0:
        warnings.append(f"rho_knob = {cfg.rho_knob:.4g} > 1; the shared-factor weight is clipped at 1")
    if bool(cfg.xs) != bool(cfg.ys):
        warnings.append("sweep needs both xs and ys; running a single configuration")
    if cfg.xs and cfg.ys and cfg.C_budget is None:
        warnings.append("sweep without C_budget; running a single configuration")
    return warnings


def validate_async(cfg: AsyncConfig) -> list[str]:
    warnings: list[str] = []
    if not (MU_RANGE[0] <= cfg.mu <= MU_RANGE[1]):
        _warn_range(warnings, "mu", cfg.mu, *MU_RANGE)
    rr = cfg.mu * cfg.T / cfg.W
    if cfg.transfer == "buffer" and not (REPLAY_RATIO_HINT[0] <= rr <= REPLAY_RATIO_HINT[1]):
        _warn_range(warnings, "steady-state replay ratio mu*T/W", rr, *REPLAY_RATIO_HINT)
    if cfg.transfer == "buffer" and cfg.horizon < 50 * cfg.N / cfg.B:
        warnings.append(f"horizon {cfg.horizon} < 50 N/B; replay statistics may not have reached steady state")
    if cfg.transfer == "queue" and cfg.queue_capacity not in (None, 0) and cfg.queue_capacity < cfg.G:
        warnings.append(f"queue_capacity {cfg.queue_capacity} < G={cfg.G}: groups are delivered record by record")
    if cfg.transfer == "queue" and cfg.delta > 0:
        warnings.append("delta applies to buffers only; ignored in queue mode")
    return warnings


def validate_bandit(cfg: BanditConfig) -> list[str]:
    warnings: list[str] = []
    if cfg.transfer == "buffer":
        rr = cfg.B / cfg.R if cfg.R else cfg.mu * cfg.T / cfg.W
        if not (REPLAY_RATIO_HINT[0] <= rr <= REPLAY_RATIO_HINT[1]):
            _warn_range(warnings, "replay ratio", rr, *REPLAY_RATIO_HINT)
    if cfg.temperature_eval > cfg.temperature_train:
        warnings.append("evaluation temperature above training temperature")
    if cfg.eta > 10.0:
        warnings.append(f"eta = {cfg.eta:.4g} is large for logit updates")
    return warnings


VALIDATORS = {
    "design": validate_design,
    "simulate-sync": validate_sync,
    "simulate-async": validate_async,
    "train-bandit": validate_bandit,
}
