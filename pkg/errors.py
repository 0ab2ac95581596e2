"""
Exception hierarchy for ReplayLab.

Hard failures raise one of these; soft problems are returned as warning
lists next to results (see inputs.validate_* and model.run_*).
Each class carries the process exit status the CLI uses for it.
"""

from __future__ import annotations

from typing import Any


class ReplayLabError(Exception):
    """Base class; exit status 1 unless a subclass says otherwise."""

    exit_status = 1


class ConfigError(ReplayLabError, ValueError):
    """Invalid or unknown configuration value. `key` names the offending field."""

    exit_status = 2

    def __init__(self, message: str, key: str | None = None) -> None:
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DuplicateRecordError(ReplayLabError):
    """A rollout_id was pushed twice into the same buffer."""


class NotReadyError(ReplayLabError):
    """Empty shard or empty queue; the caller decides whether to wait."""


class BackPressure(ReplayLabError):
    """Push onto a full bounded queue."""


class LedgerError(ReplayLabError):
    """Corrupted use ledger (negative staleness, use before creation)."""


class EtaValidityError(ReplayLabError):
    """Step size outside the region where the convergence bound holds."""

    def __init__(self, condition: str, eta: float) -> None:
        self.condition = condition
        self.eta = eta
        super().__init__(f"eta={eta:.6g} violates {condition}")


class DivergenceError(ReplayLabError):
    exit_status = 3

    def __init__(self, step: int, norm: float) -> None:
        self.step = step
        self.norm = norm
        super().__init__(f"diverged at step {step} (norm={norm:.3g})")


class DeadlockError(ReplayLabError):
    exit_status = 4

    def __init__(self, message: str, actor_states: dict[str, Any]) -> None:
        self.actor_states = actor_states
        super().__init__(f"{message}; actors={actor_states}")


class DesignError(ReplayLabError):
    """Design optimisation impossible (non-finite objective, alpha >= 1/2)."""


class ReportError(ReplayLabError):
    """Run directories cannot be compared."""
