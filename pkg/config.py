"""
Default constants and operating ranges for the replay laboratory
"""

import logging
import os

TOOL_VERSION = "1.0.0"

# Compute model (abstract units; one baseline trainer step costs C)
C_UNIT = 1.0
MU_LARGE_MODEL = 5.28  # rollout/trainer cost ratio measured on a 7B model
MU_SMALL_MODEL = 6.84  # 0.6B model

# Buffer defaults
DEFAULT_BATCH = 12
DEFAULT_GROUP = 4
DEFAULT_DELTA = 0.0  # positive-bias share, 0 = plain FIFO

# Design optimiser
X_GRID_LO = 1e-3
X_GRID_HI = 1e6
X_GRID_POINTS = 2000

# Synchronous SGD testbed
THETA0_RADIUS = 10.0
DIMENSION = 32
DIVERGENCE_NORM = 1e12
MIN_SWEEP_SEEDS = 5

# Asynchronous simulator
DEFAULT_JITTER_CV = 0.2
QUEUE_CAPACITY_FACTOR = 2  # default queue capacity = factor * B

# Bandit testbed
TEMP_TRAIN = 1.0
TEMP_EVAL = 0.1
GRPO_EPS_LOW = 0.2
GRPO_EPS_HIGH = 0.2
ASYMRE_DELTA_V = -0.1
GROUP_SIZE = 16
ADV_STD_FLOOR = 1e-8
PASS_AT_K = (1, 4, 16)
LOGIT_GUARD = 1e6

# Soft operating ranges (warnings only)
MU_RANGE = (0.05, 50.0)
ALPHA_RANGE = (0.0, 0.5)
REPLAY_RATIO_HINT = (0.5, 16.0)

# Reports
TARGET_FRACTION = 0.98  # compute-to-reach 98% of the best value


def env_bool(name: str, default: bool = False) -> bool:
    """Read a boolean switch from the environment.
    Accepted true values: 1, true, yes, on.
    """
    v = os.environ.get(name)
    if v is None:
        return default
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def log_level() -> int:
    """Level for the CLI root logger: REPLAYLAB_LOG_LEVEL wins, then REPLAYLAB_VERBOSE."""
    name = os.environ.get("REPLAYLAB_LOG_LEVEL")
    if name:
        level = logging.getLevelName(name.strip().upper())
        if isinstance(level, int):
            return level
    return logging.DEBUG if env_bool("REPLAYLAB_VERBOSE") else logging.INFO
