"""
Named random sub-streams derived from one run seed.

Each consumer (training, metrics, service times, noise, eval) gets its own
numpy Generator so that drawing from one never shifts another.
"""

from __future__ import annotations

import re
import zlib

import numpy as np

from errors import ConfigError

TRAINING = "training"
METRICS = "metrics"
SERVICE = "service"
NOISE = "noise"
EVAL = "eval"

_RANGE = re.compile(r"^(-?\d+)-(-?\d+)$")


def stream_key(name: str) -> int:
    # crc32 is stable across processes, unlike hash()
    return zlib.crc32(name.encode("utf-8"))


def named_stream(seed: int, name: str) -> np.random.Generator:
    if int(seed) < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}", "seed")
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_key(name)]))


def seed_list(text: str | int | None, default: int = 0) -> list[int]:
    """Parse "1,2,3" or "0-4" into a list of seeds."""
    if text is None:
        return [int(default)]
    if isinstance(text, int):
        return [text]
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        m = _RANGE.match(part)
        if m:
            out.extend(range(int(m.group(1)), int(m.group(2)) + 1))
        else:
            out.append(int(part))
    return out
