"""
Discrete-event simulator of the asynchronous generation/training pipeline.

W inference workers generate rollout batches while a group of T trainers
consumes them through either a LIFO transfer queue (no replay) or a sharded
replay buffer. Everything runs on a virtual clock in one thread; ties are
broken by (time, actor id, sequence number) so a seed fixes the trace.

Actor ids: the trainer group is 0, workers are 1..W.

In queue mode workers push whole groups of G as room allows (single records
when the queue is smaller than a group) and the trainer collects its batch
record by record, so any capacity >= 1 keeps the pipeline moving.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

import equations as eq
import streams
from buffer_core import (
    RolloutRecord,
    SamplingStrategy,
    ShardedReplayBuffer,
    TransferQueue,
    retention_from,
)
from config import C_UNIT, DEFAULT_BATCH, DEFAULT_GROUP, DEFAULT_JITTER_CV, QUEUE_CAPACITY_FACTOR
from errors import ConfigError, DeadlockError, LedgerError
from metrics import UseEvent, UseLedger

logger = logging.getLogger(__name__)

QUEUE = "queue"
BUFFER = "buffer"

WAITING_ON_EMPTY = "waiting_on_empty"
WAITING_ON_FULL = "waiting_on_full"

TRAINER_ID = 0

_GEN_DONE = 0
_STEP_DONE = 1


@dataclass(frozen=True)
class PipelineConfig:
    W: int
    T: int
    mu: float
    horizon: int
    transfer: str = BUFFER
    N: int = 252
    strategy: str = SamplingStrategy.UNIFORM_WITH_REPLACEMENT.value
    delta: float = 0.0
    queue_capacity: int | None = None  # None -> QUEUE_CAPACITY_FACTOR * B; 0 -> unbounded
    B: int = DEFAULT_BATCH
    G: int = DEFAULT_GROUP
    service_jitter: float = DEFAULT_JITTER_CV
    weight_sync_every: int = 1
    p_correct: float = 0.5
    C: float = C_UNIT
    seed: int = 0

    def __post_init__(self) -> None:
        if self.W < 1:
            raise ConfigError("need at least one worker", "W")
        if self.T < 1:
            raise ConfigError("need at least one trainer", "T")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1", "horizon")
        if not self.mu > 0:
            raise ConfigError("mu must be > 0", "mu")
        if self.transfer not in (QUEUE, BUFFER):
            raise ConfigError(f"unknown transfer '{self.transfer}'", "transfer")
        if self.B < 1 or self.G < 1 or self.B % self.G != 0:
            raise ConfigError(f"group size G={self.G} must divide B={self.B}", "G")
        if self.transfer == BUFFER:
            if self.B % self.T != 0:
                raise ConfigError(f"T={self.T} must divide B={self.B}", "B")
            if self.N % self.T != 0:
                raise ConfigError(f"T={self.T} must divide N={self.N}", "N")
        if self.service_jitter < 0:
            raise ConfigError("service_jitter must be >= 0", "service_jitter")
        if self.weight_sync_every < 1:
            raise ConfigError("weight_sync_every must be >= 1", "weight_sync_every")
        if not (0.0 <= self.p_correct <= 1.0):
            raise ConfigError("p_correct must lie in [0, 1]", "p_correct")
        if self.queue_capacity is not None and self.queue_capacity < 0:
            raise ConfigError("queue_capacity must be >= 0", "queue_capacity")

    def resolved_queue_capacity(self) -> int | None:
        if self.queue_capacity is None:
            return QUEUE_CAPACITY_FACTOR * self.B
        return None if self.queue_capacity == 0 else int(self.queue_capacity)


@dataclass(frozen=True)
class GenerationContext:
    """What a producer needs to build one rollout batch."""

    worker: int
    creation_step: int
    policy_version: int
    first_id: int
    count: int
    group_size: int
    rng: np.random.Generator


Producer = Callable[[GenerationContext], list]
Consumer = Callable[[int, list], None]


def bernoulli_producer(p_correct: float) -> Producer:
    """Records with binary reward ~ Bernoulli(p_correct) and group-relative advantages."""

    def produce(ctx: GenerationContext) -> list:
        out = []
        rid = ctx.first_id
        for g in range(ctx.count // ctx.group_size):
            rewards = (ctx.rng.random(ctx.group_size) < p_correct).astype(float)
            mean = float(rewards.mean())
            std = float(rewards.std())
            adv = (rewards - mean) / std if std > 0 else np.zeros_like(rewards)
            for r, a in zip(rewards, adv):
                out.append(RolloutRecord(
                    rollout_id=rid, prompt_id=g, group_id=rid // ctx.group_size,
                    creation_step=ctx.creation_step, policy_version=ctx.policy_version,
                    reward=float(r), is_correct=bool(r > 0), behavior_logprob=0.0,
                    advantage=float(a), group_mean_reward=mean,
                ))
                rid += 1
        return out

    return produce


@dataclass
class StallInterval:
    actor: int
    cause: str
    start: float
    end: float


@dataclass
class RunTrace:
    config: PipelineConfig
    updates: list[dict] = field(default_factory=list)
    stalls: list[StallInterval] = field(default_factory=list)
    ledger: UseLedger = field(default_factory=UseLedger)
    versions: list[dict] = field(default_factory=list)
    trainer_units: float = 0.0
    inference_units: float = 0.0
    generations: int = 0
    produced: int = 0
    consumed: int = 0
    in_transfer: int = 0
    warmup_end: float = math.nan
    end_time: float = 0.0
    lifetimes: list[dict] = field(default_factory=list)  # evicted records: uses over a full lifetime
    staleness_by_version: list[int] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.updates)

    def per_update_compute(self) -> float:
        return (self.trainer_units + self.inference_units) / max(1, self.steps)

    def time_per_update(self) -> float:
        if self.steps == 0:
            return math.nan
        return (self.end_time - self.warmup_end) / self.steps

    def dump_events(self, path: str) -> str:
        """Updates, stalls and version changes as one JSON object per line."""
        with open(path, "w", encoding="utf-8") as f:
            for u in self.updates:
                f.write(json.dumps({"type": "update", **u}, sort_keys=True) + "\n")
            for s in self.stalls:
                f.write(json.dumps({"type": "stall", **asdict(s)}, sort_keys=True) + "\n")
            for v in self.versions:
                f.write(json.dumps({"type": "version", **v}, sort_keys=True) + "\n")
        return path


def _service_time(rng: np.random.Generator, mean: float, cv: float) -> float:
    """Log-normal with the given mean and coefficient of variation; cv = 0 is deterministic."""
    if cv <= 0:
        return mean
    s2 = math.log1p(cv * cv)
    return float(rng.lognormal(math.log(mean) - 0.5 * s2, math.sqrt(s2)))


class _Simulation:
    def __init__(self, cfg: PipelineConfig, producer: Producer | None, consumer: Consumer | None) -> None:
        self.cfg = cfg
        self.producer = producer or bernoulli_producer(cfg.p_correct)
        self.consumer = consumer
        self.rng_service = streams.named_stream(cfg.seed, streams.SERVICE)
        self.rng_train = streams.named_stream(cfg.seed, streams.TRAINING)
        self.rng_records = streams.named_stream(cfg.seed, streams.NOISE)
        self.trace = RunTrace(cfg)
        if cfg.transfer == QUEUE:
            self.queue = TransferQueue(cfg.resolved_queue_capacity())
            cap = self.queue.capacity
            # groups go in whole unless the queue can never hold one
            self.unit = cfg.G if cap is None or cap >= cfg.G else 1
            self.buffer = None
        else:
            self.queue = None
            self.buffer = ShardedReplayBuffer(cfg.N, cfg.T, cfg.strategy, retention_from(cfg.delta))
        self.now = 0.0
        self.step = 0
        self.version = 0
        self.next_id = 0
        self.seq = 0
        self.heap: list[tuple[float, int, int, int]] = []
        self.training = False
        self.batch: list = []
        self.pending: list = []  # popped records of the batch being collected, queue mode
        self.blocked: dict[int, list] = {}  # worker -> undelivered records, in blocking order
        self.stall_open: dict[int, StallInterval] = {}
        self.gen_meta: dict[int, tuple[int, int]] = {}  # worker -> (creation_step, version)
        self.arrived: dict[int, float] = {}  # rollout_id -> delivery time, buffer mode

    # ----------------------------- event plumbing -----------------------------

    def _schedule(self, t: float, actor: int, kind: int) -> None:
        heapq.heappush(self.heap, (t, actor, self.seq, kind))
        self.seq += 1

    def _stall(self, actor: int, cause: str) -> None:
        if actor not in self.stall_open:
            self.stall_open[actor] = StallInterval(actor, cause, self.now, self.now)

    def _unstall(self, actor: int) -> None:
        iv = self.stall_open.pop(actor, None)
        if iv is not None:
            iv.end = self.now
            self.trace.stalls.append(iv)

    def _actor_states(self) -> dict:
        states = {"trainer": "training" if self.training else WAITING_ON_EMPTY}
        for w in range(1, self.cfg.W + 1):
            states[f"worker_{w}"] = WAITING_ON_FULL if w in self.blocked else "generating"
        states["queue_len"] = len(self.queue) if self.queue is not None else None
        states["pending"] = len(self.pending)
        states["step"] = self.step
        return states

    # ----------------------------- workers -----------------------------

    def _start_generation(self, w: int) -> None:
        cfg = self.cfg
        self.gen_meta[w] = (self.step, self.version)
        dt = _service_time(self.rng_service, cfg.C * cfg.mu, cfg.service_jitter)
        self._schedule(self.now + dt, w, _GEN_DONE)

    def _finish_generation(self, w: int) -> None:
        cfg = self.cfg
        creation_step, version = self.gen_meta.pop(w)
        ctx = GenerationContext(w, creation_step, version, self.next_id, cfg.B, cfg.G, self.rng_records)
        records = self.producer(ctx)
        if len(records) != cfg.B:
            raise ConfigError(f"producer returned {len(records)} records, expected {cfg.B}", "producer")
        self.next_id += cfg.B
        self.trace.generations += 1
        self.trace.inference_units += cfg.C * cfg.mu
        for r in records:
            self.trace.ledger.register(r.rollout_id, r.creation_step)
        if self.queue is None:
            self._deliver_to_buffer(records)
            self._start_generation(w)
            self._try_train()
            return
        self.blocked[w] = records
        self._pump()

    def _deliver_to_buffer(self, records: list) -> None:
        for r in records:
            self.arrived[r.rollout_id] = self.now
        for ev in self.buffer.push_many(records):
            self._retire(ev)
        self.trace.in_transfer = len(self.buffer)
        self.trace.produced += len(records)

    def _fits(self, n: int) -> int:
        """How many of n outgoing records the queue takes now, in whole delivery units."""
        room = self.queue.room()
        if room >= n:
            return n
        return int(room) // self.unit * self.unit

    def _retire(self, rec) -> None:
        self.trace.lifetimes.append({
            "rollout_id": rec.rollout_id,
            "creation_step": rec.creation_step,
            "arrived_time": self.arrived.pop(rec.rollout_id, math.nan),
            "evicted_step": self.step,
            "evicted_time": self.now,
            "uses": int(rec.use_count),
        })

    def _unblock_workers(self) -> bool:
        """Push waiting records, longest-waiting worker first; True if anything moved."""
        moved = False
        for w in list(self.blocked):
            records = self.blocked[w]
            n = self._fits(len(records))
            if n > 0:
                for i in range(0, n, self.unit):
                    self.queue.push_group(records[i:i + self.unit])
                self.trace.produced += n
                self.trace.in_transfer = len(self.queue)
                records = records[n:]
                moved = True
            if records:
                self.blocked[w] = records
                self._stall(w, WAITING_ON_FULL)
                break
            del self.blocked[w]
            self._unstall(w)
            self._start_generation(w)
        return moved

    def _pump(self) -> None:
        # alternate trainer pops and worker pushes until neither side moves
        while True:
            popped = self._try_train()
            pushed = self._unblock_workers()
            if not (popped or pushed):
                return

    # ----------------------------- trainers -----------------------------

    def _try_train(self) -> bool:
        """Collect and possibly start the next batch; True if records were popped or a step began."""
        if self.training or self.step >= self.cfg.horizon:
            return False
        cfg = self.cfg
        moved = False
        if self.queue is not None:
            k = min(cfg.B - len(self.pending), len(self.queue))
            if k > 0:
                self.pending.extend(self.queue.pop_many(k))
                self.trace.consumed += k
                self.trace.in_transfer = len(self.queue)
                moved = True
            if len(self.pending) < cfg.B:
                self._stall(TRAINER_ID, WAITING_ON_EMPTY)
                return moved
            batch, self.pending = self.pending, []
            events = [UseEvent(r.rollout_id, r.creation_step, self.step, self.step, i) for i, r in enumerate(batch)]
            self.trace.ledger.extend(events)
        else:
            if not self.buffer.ready(cfg.B // cfg.T):
                self._stall(TRAINER_ID, WAITING_ON_EMPTY)
                return False
            batch = self.buffer.sample(cfg.B // cfg.T, self.rng_train, use_step=self.step,
                                       batch_id=self.step, ledger=self.trace.ledger).records
            self.trace.consumed += len(batch)
        if math.isnan(self.trace.warmup_end):
            self.trace.warmup_end = self.now
            logger.debug("[sim] warm-up over at t=%.3f", self.now)
        self._unstall(TRAINER_ID)
        self.training = True
        self.batch = batch
        for r in batch:
            self.trace.staleness_by_version.append(self.step - r.policy_version)
        if self.consumer is not None:
            self.consumer(self.step, batch)
        self._schedule(self.now + cfg.C / cfg.T, TRAINER_ID, _STEP_DONE)
        return True

    def _finish_step(self) -> None:
        cfg = self.cfg
        self.training = False
        ages = [self.step - r.creation_step for r in self.batch]
        self.trace.updates.append({
            "step": self.step,
            "time": self.now,
            "batch": [r.rollout_id for r in self.batch],
            "mean_staleness": float(np.mean(ages)),
        })
        self.trace.trainer_units += cfg.C
        self.step += 1
        if self.step % cfg.weight_sync_every == 0:
            self.version = self.step
            self.trace.versions.append({"step": self.step, "time": self.now, "version": self.version})
        if self.queue is not None:
            self._pump()
        else:
            self._try_train()

    # ----------------------------- loop -----------------------------

    def _check_conservation(self) -> None:
        if self.queue is not None and self.trace.produced != len(self.queue) + self.trace.consumed:
            raise LedgerError(
                f"queue conservation broken: produced={self.trace.produced} queued={len(self.queue)} consumed={self.trace.consumed}"
            )

    def run(self) -> RunTrace:
        cfg = self.cfg
        for w in range(1, cfg.W + 1):
            self._start_generation(w)
        self._try_train()
        while self.step < cfg.horizon:
            if not self.heap:
                raise DeadlockError("no event can fire before the horizon", self._actor_states())
            t, actor, _, kind = heapq.heappop(self.heap)
            self.now = t
            if kind == _STEP_DONE:
                self._finish_step()
            else:
                self._finish_generation(actor)
            self._check_conservation()
        self.trace.end_time = self.now
        for actor in list(self.stall_open):
            self._unstall(actor)
        logger.info("[sim] %s W=%d T=%d mu=%g: %d steps, %d generations, t=%.2f",
                    cfg.transfer, cfg.W, cfg.T, cfg.mu, self.step, self.trace.generations, self.now)
        return self.trace


def simulate(config: PipelineConfig, producer: Producer | None = None,
             consumer: Consumer | None = None) -> RunTrace:
    """
    Run the pipeline until `horizon` trainer steps have completed.
    `producer` builds each generation's records; `consumer` sees each batch when its step starts.
    """
    return _Simulation(config, producer, consumer).run()


# ----------------------------- Analysis -----------------------------

def steady_state_replay_ratio(W: float, T: float, mu: float) -> float:
    """mu * T / W: consumption rate T*B/C over production rate W*B/(C*mu)."""
    if W <= 0 or T <= 0 or mu <= 0:
        raise ConfigError("W, T and mu must be positive", "W" if W <= 0 else ("T" if T <= 0 else "mu"))
    return mu * T / W


def measured_replay_ratio(trace: RunTrace) -> float:
    """Mean uses over records born after warm-up and evicted before the end."""
    t0 = trace.warmup_end
    done = [r["uses"] for r in trace.lifetimes if r["arrived_time"] >= t0]
    if not done:
        raise ConfigError("no complete record lifetime in the trace; raise the horizon", "horizon")
    return float(np.mean(done))


def estimated_mu(trace: RunTrace) -> float:
    cfg = trace.config
    return eq.estimate_mu(trace.steps * cfg.B, cfg.T, trace.generations * cfg.B, cfg.W)


def staleness_without_buffer(trace: RunTrace) -> list[int]:
    """use step - weight version at generation start, one entry per consumed record."""
    if trace.config.transfer != QUEUE:
        raise ConfigError("staleness_without_buffer needs queue transfer", "transfer")
    return list(trace.staleness_by_version)


def stall_report(trace: RunTrace) -> list[dict]:
    """Per actor: share of post-warm-up virtual time spent stalled, by cause."""
    t0 = trace.warmup_end if not math.isnan(trace.warmup_end) else 0.0
    span = trace.end_time - t0
    actors = [TRAINER_ID] + list(range(1, trace.config.W + 1))
    totals = {a: {WAITING_ON_EMPTY: 0.0, WAITING_ON_FULL: 0.0} for a in actors}
    for iv in trace.stalls:
        lo = max(iv.start, t0)
        hi = min(iv.end, trace.end_time)
        if hi > lo:
            totals[iv.actor][iv.cause] += hi - lo
    rows = []
    for a in actors:
        empty = totals[a][WAITING_ON_EMPTY] / span if span > 0 else 0.0
        full = totals[a][WAITING_ON_FULL] / span if span > 0 else 0.0
        rows.append({
            "actor": "trainer" if a == TRAINER_ID else f"worker_{a}",
            WAITING_ON_EMPTY: empty,
            WAITING_ON_FULL: full,
            "stalled": empty + full,
            "busy": 1.0 - empty - full,
        })
    return rows


def stall_fractions(trace: RunTrace) -> dict[str, float]:
    """Trainer stall share and mean worker stall share."""
    rows = stall_report(trace)
    workers = [r["stalled"] for r in rows[1:]]
    return {"trainer": rows[0]["stalled"], "workers": float(np.mean(workers)) if workers else 0.0}
