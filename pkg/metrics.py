"""
Use ledger and the three replay diagnostics: staleness, replay count and
steps-since-last-use, plus summaries over them.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from errors import ConfigError, LedgerError

logger = logging.getLogger(__name__)

NEW = "new"


@dataclass(frozen=True)
class UseEvent:
    """One occurrence of a rollout inside a training batch."""

    rollout_id: int
    creation_step: int
    use_step: int
    batch_id: int
    within_batch_rank: int


@dataclass(frozen=True)
class MetricSummary:
    histogram: dict[int, int]
    mean: float
    median: float
    iqr: tuple[float, float]
    count: int
    quantiles: dict[int, float] = field(default_factory=dict)


class UseLedger:
    """
    Append-only record of UseEvents and of every rollout ever generated.
    Appends are atomic; readers work on snapshots.
    """

    def __init__(self) -> None:
        self._events: list[UseEvent] = []
        self._rollouts: dict[int, int] = {}
        self._lock = threading.Lock()

    def register(self, rollout_id: int, creation_step: int) -> None:
        with self._lock:
            self._rollouts.setdefault(int(rollout_id), int(creation_step))

    def append(self, event: UseEvent) -> None:
        if event.use_step < event.creation_step:
            raise LedgerError(
                f"rollout {event.rollout_id} used at step {event.use_step} before creation at {event.creation_step}"
            )
        with self._lock:
            self._events.append(event)
            self._rollouts.setdefault(event.rollout_id, event.creation_step)

    def extend(self, events: Iterable[UseEvent]) -> None:
        for e in events:
            self.append(e)

    @property
    def events(self) -> tuple[UseEvent, ...]:
        with self._lock:
            return tuple(self._events)

    @property
    def rollouts(self) -> dict[int, int]:
        """rollout_id -> creation_step for everything registered or used."""
        with self._lock:
            return dict(self._rollouts)

    def __len__(self) -> int:
        return len(self._events)

    def dump(self, path: str) -> str:
        """One JSON event per line, then one line per never-used rollout."""
        events = self.events
        used = {e.rollout_id for e in events}
        with open(path, "w", encoding="utf-8") as f:
            for e in events:
                f.write(json.dumps({"type": "use", **asdict(e)}, sort_keys=True) + "\n")
            for rid, step in sorted(self.rollouts.items()):
                if rid not in used:
                    f.write(json.dumps({"type": "rollout", "rollout_id": rid, "creation_step": step}, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str) -> "UseLedger":
        ledger = cls()
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                kind = row.pop("type", "use")
                if kind == "rollout":
                    ledger.register(row["rollout_id"], row["creation_step"])
                else:
                    ledger.append(UseEvent(**row))
        return ledger


def _events_of(ledger) -> tuple[UseEvent, ...]:
    return ledger.events if isinstance(ledger, UseLedger) else tuple(ledger)


# ----------------------------- Diagnostics -----------------------------

def staleness(event: UseEvent) -> int:
    """use_step - creation_step"""
    s = event.use_step - event.creation_step
    if s < 0:
        raise LedgerError(f"negative staleness {s} for rollout {event.rollout_id}")
    return s


def staleness_values(ledger) -> list[int]:
    return [staleness(e) for e in _events_of(ledger)]


def replay_counts(ledger, include_unused: bool = True) -> dict[int, int]:
    """Uses per rollout over the whole run; never-sampled rollouts count 0 unless excluded."""
    counts: Counter[int] = Counter(e.rollout_id for e in _events_of(ledger))
    out: dict[int, int] = {}
    if include_unused and isinstance(ledger, UseLedger):
        for rid in ledger.rollouts:
            out[rid] = 0
    out.update(counts)
    if not include_unused:
        out = {k: v for k, v in out.items() if v > 0}
    return dict(sorted(out.items()))


def global_order(ledger, rng: np.random.Generator) -> list[UseEvent]:
    """Events ordered by use step, batches kept together, a random order drawn inside each batch."""
    batches: dict[tuple[int, int], list[UseEvent]] = defaultdict(list)
    for e in _events_of(ledger):
        batches[(e.use_step, e.batch_id)].append(e)
    ordered: list[UseEvent] = []
    for key in sorted(batches):
        batch = sorted(batches[key], key=lambda e: e.within_batch_rank)
        ranks = rng.permutation(len(batch))
        ordered.extend(batch[i] for i in ranks)
    return ordered


def steps_since_last_use(ledger, rng: np.random.Generator) -> list[tuple[UseEvent, str | int]]:
    """
    Label each use with the steps elapsed since the previous use of the same
    rollout in the global order; first uses are labelled "new".
    """
    last: dict[int, int] = {}
    out: list[tuple[UseEvent, str | int]] = []
    for e in global_order(ledger, rng):
        prev = last.get(e.rollout_id)
        out.append((e, NEW if prev is None else e.use_step - prev))
        last[e.rollout_id] = e.use_step
    return out


# ----------------------------- Summaries -----------------------------

def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    n = len(sorted_values)
    rank = max(1, int(math.ceil(pct / 100.0 * n - 1e-12)))
    return float(sorted_values[min(rank, n) - 1])


def summarize(values: Iterable[float]) -> MetricSummary:
    vals = list(values)
    if not vals:
        raise ConfigError("cannot summarise an empty list", "values")
    ordered = sorted(vals)
    hist = Counter(int(math.floor(v)) for v in vals)
    quantiles = {p: nearest_rank(ordered, p) for p in range(0, 101, 5)}
    return MetricSummary(
        histogram=dict(sorted(hist.items())),
        mean=math.fsum(vals) / len(vals),
        median=nearest_rank(ordered, 50),
        iqr=(nearest_rank(ordered, 25), nearest_rank(ordered, 75)),
        count=len(vals),
        quantiles=quantiles,
    )


def summary_row(name: str, s: MetricSummary) -> dict:
    return {"metric": name, "mean": s.mean, "median": s.median, "q25": s.iqr[0], "q75": s.iqr[1], "count": s.count}


def histogram_rows(name: str, s: MetricSummary) -> list[dict]:
    return [{"metric": name, "bin": b, "count": c} for b, c in s.histogram.items()]


def replay_summaries(ledger, rng: np.random.Generator, include_unused: bool = True) -> dict[str, MetricSummary]:
    """The three distributions for one run; empty distributions are omitted."""
    out: dict[str, MetricSummary] = {}
    st = staleness_values(ledger)
    if st:
        out["staleness"] = summarize(st)
    rc = list(replay_counts(ledger, include_unused=include_unused).values())
    if rc:
        out["replay_ratio"] = summarize(rc)
    labels = [lab for _, lab in steps_since_last_use(ledger, rng)]
    gaps = [lab for lab in labels if lab != NEW]
    if gaps:
        out["steps_since_last_use"] = summarize(gaps)
    if labels:
        out["new_fraction"] = summarize([1 if lab == NEW else 0 for lab in labels])
    return out


# ----------------------------- Batch and curve statistics -----------------------------

def batch_entropy(records) -> float:
    """Mean of -behavior_logprob: a sample estimate of the generating policies' entropy."""
    lp = [r.behavior_logprob for r in records]
    if not lp:
        return 0.0
    return -math.fsum(lp) / len(lp)


def correct_fraction(records) -> float:
    recs = list(records)
    if not recs:
        return 0.0
    return sum(1 for r in recs if r.is_correct) / len(recs)


def curve_band(curves) -> dict[str, np.ndarray]:
    """Per-step median and interquartile band across seeds (rows = seeds)."""
    arr = np.asarray(curves, dtype=float)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ConfigError("curves must be a non-empty seeds x steps array", "curves")
    q25, med, q75 = np.percentile(arr, [25.0, 50.0, 75.0], axis=0)
    return {"median": med, "q25": q25, "q75": q75}


def peak_of_median(curves) -> dict:
    """Max of the median curve, with the IQR at the argmax step."""
    band = curve_band(curves)
    i = int(np.argmax(band["median"]))
    return {"step_index": i, "median": float(band["median"][i]), "q25": float(band["q25"][i]), "q75": float(band["q75"][i])}
