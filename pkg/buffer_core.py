"""
Rollout storage: the LIFO transfer queue (no replay) and the sharded FIFO
replay buffer with its sampling strategies and retention rules.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, Iterable, Protocol

import numpy as np

from errors import BackPressure, ConfigError, DuplicateRecordError, LedgerError, NotReadyError
from metrics import UseEvent, UseLedger

logger = logging.getLogger(__name__)


class SamplingStrategy(str, Enum):
    """How a shard picks its share of a batch."""

    UNIFORM_WITH_REPLACEMENT = "uniform_with_replacement"
    UNIFORM_WITHOUT_REPLACEMENT = "uniform_without_replacement"
    UNUSED_FIRST_WITHOUT_REPLACEMENT = "unused_first_without_replacement"  # never-used, freshest first
    FRESHEST = "freshest"  # deterministic, most recent records


WITHOUT_REPLACEMENT = {
    SamplingStrategy.UNIFORM_WITHOUT_REPLACEMENT,
    SamplingStrategy.UNUSED_FIRST_WITHOUT_REPLACEMENT,
    SamplingStrategy.FRESHEST,
}


_FROZEN_FIELDS = frozenset({
    "rollout_id", "prompt_id", "group_id", "creation_step", "policy_version",
    "reward", "is_correct", "behavior_logprob", "advantage", "action", "group_mean_reward", "cost",
})


@dataclass
class RolloutRecord:
    """One generated trajectory. Everything except use_count is fixed at creation."""

    rollout_id: int
    prompt_id: int
    group_id: int
    creation_step: int
    policy_version: int
    reward: float
    is_correct: bool
    behavior_logprob: float
    advantage: float
    use_count: int = 0
    action: int = -1
    group_mean_reward: float = 0.0
    cost: float = 0.0

    def __setattr__(self, name: str, value: Any) -> None:
        if name in _FROZEN_FIELDS and name in self.__dict__:
            raise AttributeError(f"{name} is frozen at creation")
        object.__setattr__(self, name, value)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, row: dict) -> "RolloutRecord":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in row.items() if k in names})


class Record(Protocol):
    rollout_id: int
    creation_step: int


# ----------------------------- Retention -----------------------------

@dataclass(frozen=True)
class PlainFIFO:
    def victim(self, candidates: list) -> int:
        return 0

    def describe(self) -> str:
        return "fifo"


@dataclass(frozen=True)
class PositiveBias:
    """
    Keep the freshest ceil((1 - delta) * cap) records, then the freshest correct
    ones outside that window; on a shortfall the freshest remaining fill in.
    """

    delta: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.delta <= 1.0):
            raise ConfigError(f"delta={self.delta} outside [0, 1]", "delta")

    def fresh_slots(self, cap: int) -> int:
        # round first so 0.3*10 does not ceil to 4
        return int(math.ceil(round((1.0 - self.delta) * cap, 9)))

    def victim(self, candidates: list) -> int:
        """candidates: shard contents oldest-first plus the arriving record (cap + 1 items)."""
        cap = len(candidates) - 1
        fresh = self.fresh_slots(cap)
        older = len(candidates) - fresh
        for i in range(older):
            if not candidates[i].is_correct:
                return i
        return 0

    def describe(self) -> str:
        return f"positive_bias({self.delta:g})"


def retention_from(delta: float | None):
    return PlainFIFO() if not delta else PositiveBias(float(delta))


def round_robin(arrival_index: int, T: int) -> int:
    if T < 1:
        raise ConfigError("shard count must be >= 1", "T")
    return int(arrival_index) % int(T)


@dataclass
class SampleResult:
    records: list
    events: list[UseEvent]


# ----------------------------- Replay buffer -----------------------------

class ShardedReplayBuffer:
    """
    T FIFO shards of N/T records each. Records are routed round-robin on
    arrival; sampling never removes records.
    """

    def __init__(self, capacity_total: int, T: int = 1,
                 strategy: SamplingStrategy | str = SamplingStrategy.UNIFORM_WITH_REPLACEMENT,
                 retention=None) -> None:
        if T < 1:
            raise ConfigError("shard count must be >= 1", "T")
        if capacity_total < 1 or capacity_total % T != 0:
            raise ConfigError(f"capacity N={capacity_total} must be a positive multiple of T={T}", "N")
        self.capacity_total = int(capacity_total)
        self.T = int(T)
        self.capacity_per_shard = self.capacity_total // self.T
        self.strategy = SamplingStrategy(strategy)
        self.retention = retention if retention is not None else PlainFIFO()
        self.shards: list[list] = [[] for _ in range(self.T)]
        self._ids: set[int] = set()
        self._uses: dict[int, int] = {}
        self._arrival: dict[int, int] = {}
        self.arrivals = 0
        self.evictions = 0
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return sum(len(s) for s in self.shards)

    def __contains__(self, rollout_id: int) -> bool:
        return rollout_id in self._ids

    def occupancy(self, shard: int | None = None) -> int:
        return len(self) if shard is None else len(self.shards[shard])

    def contents(self, shard: int = 0) -> list:
        with self._lock:
            return list(self.shards[shard])

    def records(self) -> list:
        with self._lock:
            return [r for s in self.shards for r in s]

    def uses(self, rollout_id: int) -> int:
        return self._uses.get(rollout_id, 0)

    def shard_route(self, record=None) -> int:
        """Shard of the next arrival (round-robin)."""
        return round_robin(self.arrivals, self.T)

    def push(self, record):
        """Append to the routed shard; returns the evicted record or None."""
        with self._lock:
            if record.rollout_id in self._ids:
                raise DuplicateRecordError(f"rollout {record.rollout_id} already in buffer")
            k = self.shard_route(record)
            shard = self.shards[k]
            self._arrival[record.rollout_id] = self.arrivals
            self.arrivals += 1
            if len(shard) < self.capacity_per_shard:
                shard.append(record)
                self._ids.add(record.rollout_id)
                return None
            candidates = shard + [record]
            i = self.retention.victim(candidates)
            evicted = candidates.pop(i)
            self.shards[k] = candidates
            self._ids.discard(evicted.rollout_id)
            if evicted is not record:
                self._ids.add(record.rollout_id)
            self._arrival.pop(evicted.rollout_id, None)
            self._uses.pop(evicted.rollout_id, None)
            self.evictions += 1
            return evicted

    def push_many(self, records: Iterable) -> list:
        """Push records in order under one lock; returns the evicted ones."""
        with self._lock:
            out = []
            for r in records:
                ev = self.push(r)
                if ev is not None:
                    out.append(ev)
            return out

    def ready(self, batch_per_shard: int) -> bool:
        """Warm-up rule: every shard holds at least batch_per_shard records."""
        return all(len(s) >= batch_per_shard for s in self.shards)

    def _pick(self, shard: list, k: int, rng: np.random.Generator) -> list[int]:
        n = len(shard)
        if self.strategy == SamplingStrategy.UNIFORM_WITH_REPLACEMENT:
            return [int(i) for i in rng.integers(0, n, size=k)]
        if k > n:
            raise ConfigError(
                f"batch_per_shard={k} exceeds shard occupancy {n} for {self.strategy.value}", "batch"
            )
        if self.strategy == SamplingStrategy.UNIFORM_WITHOUT_REPLACEMENT:
            return [int(i) for i in rng.choice(n, size=k, replace=False)]
        if self.strategy == SamplingStrategy.FRESHEST:
            return list(range(n - k, n))
        unused = [i for i in range(n - 1, -1, -1) if self._uses.get(shard[i].rollout_id, 0) == 0]
        picked = unused[:k]
        rest = k - len(picked)
        if rest > 0:
            taken = set(picked)
            pool = [i for i in range(n) if i not in taken]
            picked.extend(int(pool[j]) for j in rng.choice(len(pool), size=rest, replace=False))
        return picked

    def sample(self, batch_per_shard: int, rng: np.random.Generator,
               use_step: int = 0, batch_id: int = 0, ledger: UseLedger | None = None) -> SampleResult:
        """
        batch_per_shard records from every shard; bumps use counts and emits
        one UseEvent per selection (also appended to `ledger` when given).
        """
        if batch_per_shard < 1:
            raise ConfigError("batch_per_shard must be >= 1", "batch")
        with self._lock:
            for k, shard in enumerate(self.shards):
                if not shard:
                    raise NotReadyError(f"shard {k} is empty")
            if self.strategy != SamplingStrategy.UNIFORM_WITH_REPLACEMENT:
                short = min(len(s) for s in self.shards)
                if batch_per_shard > short:
                    raise ConfigError(
                        f"batch_per_shard={batch_per_shard} exceeds shard occupancy {short} for {self.strategy.value}",
                        "batch",
                    )
            # all picks are checked before any use count moves
            chosen = [shard[i] for shard in self.shards for i in self._pick(shard, batch_per_shard, rng)]
            for rec in chosen:
                if rec.creation_step > use_step:
                    raise LedgerError(f"rollout {rec.rollout_id} created at {rec.creation_step} sampled at step {use_step}")
            picked: list = []
            events: list[UseEvent] = []
            for rec in chosen:
                self._uses[rec.rollout_id] = self._uses.get(rec.rollout_id, 0) + 1
                if hasattr(rec, "use_count"):
                    rec.use_count += 1
                events.append(UseEvent(rec.rollout_id, rec.creation_step, use_step, batch_id, len(events)))
                picked.append(rec)
            if ledger is not None:
                ledger.extend(events)
            return SampleResult(picked, events)

    # ----------------------------- dump / load -----------------------------

    def dump(self, path: str) -> str:
        """One JSON record per line, shard and arrival ordinal included."""
        with self._lock, open(path, "w", encoding="utf-8") as f:
            for k, shard in enumerate(self.shards):
                for rec in shard:
                    row = rec.to_dict()
                    row["use_count"] = self._uses.get(rec.rollout_id, row.get("use_count", 0))
                    row["shard"] = k
                    row["arrival"] = self._arrival.get(rec.rollout_id, -1)
                    f.write(json.dumps(row, sort_keys=True) + "\n")
        logger.info("[buffer] dumped %d records to %s", len(self), path)
        return path

    @classmethod
    def load(cls, path: str, capacity_total: int, T: int = 1,
             strategy: SamplingStrategy | str = SamplingStrategy.UNIFORM_WITH_REPLACEMENT,
             retention=None) -> "ShardedReplayBuffer":
        buf = cls(capacity_total, T, strategy, retention)
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
        rows.sort(key=lambda r: (r.get("arrival", -1), r["rollout_id"]))
        for row in rows:
            k = int(row.get("shard", 0))
            if not (0 <= k < buf.T):
                raise ConfigError(f"shard index {k} outside 0..{buf.T - 1}", "shard")
            if len(buf.shards[k]) >= buf.capacity_per_shard:
                raise ConfigError(f"shard {k} overflows capacity {buf.capacity_per_shard}", "N")
            rec = RolloutRecord.from_dict(row)
            if rec.rollout_id in buf._ids:
                raise DuplicateRecordError(f"rollout {rec.rollout_id} appears twice in {path}")
            buf.shards[k].append(rec)
            buf._ids.add(rec.rollout_id)
            buf._uses[rec.rollout_id] = int(rec.use_count)
            buf._arrival[rec.rollout_id] = int(row.get("arrival", -1))
        if rows:
            buf.arrivals = max(int(r.get("arrival", -1)) for r in rows) + 1
        return buf


# ----------------------------- Transfer queue -----------------------------

class TransferQueue:
    """LIFO pipe; every record is consumed exactly once."""

    def __init__(self, capacity: int | None = None) -> None:
        if capacity is not None and capacity < 1:
            raise ConfigError("queue capacity must be >= 1 or unbounded", "queue_capacity")
        self.capacity = capacity
        self.entries: list = []
        self.pushed = 0
        self.popped = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def room(self) -> float:
        return math.inf if self.capacity is None else self.capacity - len(self.entries)

    def push(self, record) -> None:
        with self._lock:
            if self.capacity is not None and len(self.entries) >= self.capacity:
                raise BackPressure(f"queue full ({self.capacity})")
            self.entries.append(record)
            self.pushed += 1

    def push_group(self, records: list) -> None:
        """All or nothing: the whole group fits or BackPressure is raised."""
        with self._lock:
            if self.capacity is not None and len(self.entries) + len(records) > self.capacity:
                raise BackPressure(f"queue has room for {self.capacity - len(self.entries)}, group of {len(records)}")
            self.entries.extend(records)
            self.pushed += len(records)

    def pop(self):
        with self._lock:
            if not self.entries:
                raise NotReadyError("queue empty")
            self.popped += 1
            return self.entries.pop()

    def pop_many(self, k: int) -> list:
        """k most recent records, most recent first."""
        if k < 1:
            return []
        with self._lock:
            if len(self.entries) < k:
                raise NotReadyError(f"queue holds {len(self.entries)} < {k}")
            out = self.entries[-k:][::-1]
            del self.entries[-k:]
            self.popped += k
            return out


def queue_push(queue: TransferQueue, record) -> None:
    queue.push(record)


def queue_pop(queue: TransferQueue):
    return queue.pop()
