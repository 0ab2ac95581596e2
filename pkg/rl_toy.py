"""
Prompt-conditioned bandit testbed for the GRPO and AsymRE policy-gradient losses.

A policy is a P x K logit table; a rollout is one arm drawn for one prompt with
binary reward. Groups of G rollouts per prompt give frozen group-relative
advantages, and batches flow through the same queue/buffer substrate and
compute ledger as the larger pipelines.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

import async_sim
import equations as eq
import metrics
import streams
from buffer_core import RolloutRecord, SamplingStrategy, ShardedReplayBuffer, retention_from
from config import (
    ADV_STD_FLOOR,
    ASYMRE_DELTA_V,
    C_UNIT,
    GRPO_EPS_HIGH,
    GRPO_EPS_LOW,
    GROUP_SIZE,
    LOGIT_GUARD,
    PASS_AT_K,
    TEMP_EVAL,
    TEMP_TRAIN,
)
from errors import ConfigError, DivergenceError

logger = logging.getLogger(__name__)

GRPO = "grpo"
ASYMRE = "asymre"


# ----------------------------- Task and policy -----------------------------

@dataclass(frozen=True)
class BanditTask:
    """P prompts, K arms; correct[p, a] is True when arm a solves prompt p."""

    correct: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        c = np.asarray(self.correct, dtype=bool)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 2:
            raise ConfigError("correct table must be P x K with K >= 2", "task")
        object.__setattr__(self, "correct", c)

    @property
    def P(self) -> int:
        return int(self.correct.shape[0])

    @property
    def K(self) -> int:
        return int(self.correct.shape[1])

    def reward(self, prompt: int, arm: int) -> float:
        return 1.0 if self.correct[prompt, arm] else 0.0

    def degenerate_prompts(self) -> list[int]:
        """Prompts whose arms all share one reward."""
        rows = self.correct.sum(axis=1)
        return [int(p) for p in np.flatnonzero((rows == 0) | (rows == self.K))]

    def validate(self) -> list[str]:
        bad = self.degenerate_prompts()
        return [f"prompt {p} has no correct or no incorrect arm; its groups carry zero advantage" for p in bad]

    @classmethod
    def random(cls, P: int, K: int, n_correct: int, rng: np.random.Generator) -> "BanditTask":
        if not (1 <= n_correct < K):
            raise ConfigError(f"n_correct={n_correct} must lie in [1, K-1]", "n_correct")
        c = np.zeros((P, K), dtype=bool)
        for p in range(P):
            c[p, rng.choice(K, size=n_correct, replace=False)] = True
        return cls(c)

    @classmethod
    def from_json(cls, path: str) -> "BanditTask":
        """{"arms": K, "correct": [[arm, ...] per prompt]}"""
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        try:
            K = int(doc["arms"])
            sets = doc["correct"]
        except KeyError as exc:
            raise ConfigError(f"task file {path} lacks '{exc.args[0]}'", exc.args[0]) from exc
        c = np.zeros((len(sets), K), dtype=bool)
        for p, arms in enumerate(sets):
            for a in arms:
                if not (0 <= int(a) < K):
                    raise ConfigError(f"prompt {p}: arm {a} outside 0..{K - 1}", "correct")
                c[p, int(a)] = True
        return cls(c)

    def to_json(self, path: str) -> str:
        doc = {"arms": self.K, "correct": [[int(a) for a in np.flatnonzero(row)] for row in self.correct]}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
        return path


@dataclass
class PolicyParams:
    logits: np.ndarray
    temperature_train: float = TEMP_TRAIN
    temperature_eval: float = TEMP_EVAL

    def __post_init__(self) -> None:
        self.logits = np.array(self.logits, dtype=float)
        if self.temperature_train <= 0 or self.temperature_eval <= 0:
            raise ConfigError("temperatures must be > 0", "temperature")
        if not np.all(np.isfinite(self.logits)):
            raise ConfigError("logits must be finite", "logits")

    @classmethod
    def uniform(cls, P: int, K: int, **kw) -> "PolicyParams":
        return cls(np.zeros((P, K)), **kw)

    def probs(self, temperature: float | None = None) -> np.ndarray:
        """Row-wise softmax of logits / temperature (P x K)."""
        tau = self.temperature_train if temperature is None else temperature
        z = self.logits / tau
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))

    def logprob(self, prompts, arms, temperature: float | None = None) -> np.ndarray:
        tau = self.temperature_train if temperature is None else temperature
        z = self.logits[np.asarray(prompts)] / tau
        return z[np.arange(len(z)), np.asarray(arms)] - logsumexp(z, axis=1)

    def snapshot(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy(), self.temperature_train, self.temperature_eval)


@dataclass(frozen=True)
class LossSpec:
    kind: str = GRPO
    eps_low: float = GRPO_EPS_LOW
    eps_high: float = GRPO_EPS_HIGH
    delta_v: float = ASYMRE_DELTA_V
    G: int = GROUP_SIZE

    def __post_init__(self) -> None:
        if self.kind not in (GRPO, ASYMRE):
            raise ConfigError(f"unknown loss '{self.kind}'", "loss")
        if self.eps_low < 0 or self.eps_high < 0:
            raise ConfigError("clip bounds must be >= 0", "eps_low" if self.eps_low < 0 else "eps_high")
        if self.G < 2:
            raise ConfigError("group size must be >= 2", "G")


# ----------------------------- Rollouts -----------------------------

def advantage(rewards: Sequence[float]) -> list[float]:
    """(r - mean) / std over the group, population std; all zeros when std < 1e-8."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ConfigError("advantage needs a group of at least 2", "G")
    std = float(r.std())
    if std < ADV_STD_FLOOR:
        return [0.0] * int(r.size)
    return [float(v) for v in (r - r.mean()) / std]


def rollout_group(policy: PolicyParams, task: BanditTask, prompt: int, G: int, rng: np.random.Generator,
                  first_id: int = 0, creation_step: int = 0, policy_version: int = 0,
                  group_id: int = 0) -> list[RolloutRecord]:
    """G arms from the training-temperature softmax; reward, log-prob and advantage frozen here."""
    if not (0 <= prompt < task.P):
        raise ConfigError(f"prompt {prompt} outside 0..{task.P - 1}", "prompt")
    p = policy.probs()[prompt]
    arms = rng.choice(task.K, size=G, p=p)
    rewards = [task.reward(prompt, int(a)) for a in arms]
    adv = advantage(rewards)
    lp = np.log(p[arms])
    vhat = float(np.mean(rewards))
    return [
        RolloutRecord(
            rollout_id=first_id + i, prompt_id=int(prompt), group_id=int(group_id),
            creation_step=int(creation_step), policy_version=int(policy_version),
            reward=rewards[i], is_correct=rewards[i] > 0, behavior_logprob=float(lp[i]),
            advantage=adv[i], action=int(arms[i]), group_mean_reward=vhat,
        )
        for i in range(G)
    ]


# ----------------------------- Losses -----------------------------

def _score(policy: PolicyParams, prompts: np.ndarray, arms: np.ndarray) -> np.ndarray:
    """d log pi(a|q) / d logits[q] = (e_a - pi(.|q)) / tau, one row per record."""
    tau = policy.temperature_train
    s = -policy.probs()[prompts]
    s[np.arange(len(arms)), arms] += 1.0
    return s / tau


def _scatter(policy: PolicyParams, prompts: np.ndarray, rows: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(policy.logits)
    np.add.at(grad, prompts, rows)
    return grad


def grpo_loss_grad(policy: PolicyParams, batch: Sequence, loss: LossSpec = LossSpec()) -> tuple[float, np.ndarray]:
    """
    Loss = -mean_i min(ratio_i A_i, clip(ratio_i, 1 - eps_low, 1 + eps_high) A_i), no KL term.
    Gradient follows the active branch; ties go to the unclipped one.
    Records with a non-finite ratio are dropped with a warning.
    """
    if not batch:
        raise ConfigError("empty batch", "batch")
    prompts = np.array([r.prompt_id for r in batch])
    arms = np.array([r.action for r in batch])
    adv = np.array([r.advantage for r in batch], dtype=float)
    old = np.array([r.behavior_logprob for r in batch], dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(policy.logprob(prompts, arms) - old)
    ok = np.isfinite(ratio)
    if not ok.all():
        logger.warning("[train] %d record(s) with non-finite importance ratio excluded", int((~ok).sum()))
        prompts, arms, adv, ratio = prompts[ok], arms[ok], adv[ok], ratio[ok]
        if len(ratio) == 0:
            return 0.0, np.zeros_like(policy.logits)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - loss.eps_low, 1.0 + loss.eps_high) * adv
    obj = np.minimum(unclipped, clipped)
    active = unclipped <= clipped
    n = len(ratio)
    coef = np.where(active, ratio * adv, 0.0) / n
    grad = -_scatter(policy, prompts, coef[:, None] * _score(policy, prompts, arms))
    return -float(obj.mean()), grad


def asymre_loss_grad(policy: PolicyParams, batch: Sequence, loss: LossSpec = LossSpec(kind=ASYMRE)) -> tuple[float, np.ndarray]:
    """Loss = -mean_i (r_i - (V_i + delta_v)) log pi(a_i|q_i); no importance ratio."""
    if not batch:
        raise ConfigError("empty batch", "batch")
    prompts = np.array([r.prompt_id for r in batch])
    arms = np.array([r.action for r in batch])
    coef = np.array([r.reward - (r.group_mean_reward + loss.delta_v) for r in batch], dtype=float)
    lp = policy.logprob(prompts, arms)
    n = len(batch)
    grad = -_scatter(policy, prompts, (coef / n)[:, None] * _score(policy, prompts, arms))
    return -float(np.mean(coef * lp)), grad


def loss_grad(policy: PolicyParams, batch: Sequence, loss: LossSpec) -> tuple[float, np.ndarray]:
    if loss.kind == GRPO:
        return grpo_loss_grad(policy, batch, loss)
    return asymre_loss_grad(policy, batch, loss)


# ----------------------------- Evaluation -----------------------------

def policy_entropy(policy: PolicyParams, prompt: int) -> float:
    p = policy.probs()[prompt]
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mean_entropy(policy: PolicyParams) -> float:
    return float(np.mean([policy_entropy(policy, q) for q in range(policy.logits.shape[0])]))


def p_correct(policy: PolicyParams, task: BanditTask, temperature: float | None = None) -> np.ndarray:
    """Per-prompt probability mass on correct arms."""
    return (policy.probs(temperature) * task.correct).sum(axis=1)


def pass_at_k(policy: PolicyParams, task: BanditTask, k: int) -> float:
    """mean over prompts of 1 - (1 - p_correct)^k at the evaluation temperature."""
    if k < 1:
        raise ConfigError("k must be >= 1", "k")
    pc = p_correct(policy, task, policy.temperature_eval)
    return float(np.mean(1.0 - (1.0 - pc) ** k))


def pass_at_k_monte_carlo(policy: PolicyParams, task: BanditTask, k: int, draws: int,
                          rng: np.random.Generator) -> float:
    if k < 1:
        raise ConfigError("k must be >= 1", "k")
    probs = policy.probs(policy.temperature_eval)
    hits = []
    for q in range(task.P):
        arms = rng.choice(task.K, size=(draws, k), p=probs[q])
        hits.append(task.correct[q][arms].any(axis=1).mean())
    return float(np.mean(hits))


def expected_reward(policy: PolicyParams, task: BanditTask) -> float:
    """Mean over prompts of the training-temperature success probability."""
    return float(np.mean(p_correct(policy, task)))


# ----------------------------- Training -----------------------------

QUEUE = async_sim.QUEUE
BUFFER = async_sim.BUFFER
SYNC = "sync"
ASYNC = "async"


@dataclass(frozen=True)
class TrainConfig:
    task: BanditTask
    loss: LossSpec = field(default_factory=LossSpec)
    transfer: str = QUEUE
    schedule: str = SYNC
    W: int = 6
    T: int = 2
    mu: float = 6.0
    B: int = 32
    R: int | None = None  # fresh records per step; None -> B / (mu T / W) for buffers, B for queues
    N: int = 64
    strategy: str = SamplingStrategy.UNIFORM_WITH_REPLACEMENT.value
    delta: float = 0.0
    eta: float = 1.0
    steps: int = 2000
    eval_every: int = 50
    temperature_train: float = TEMP_TRAIN
    temperature_eval: float = TEMP_EVAL
    service_jitter: float = 0.0
    C: float = C_UNIT
    seed: int = 0

    def __post_init__(self) -> None:
        if self.transfer not in (QUEUE, BUFFER):
            raise ConfigError(f"unknown transfer '{self.transfer}'", "transfer")
        if self.schedule not in (SYNC, ASYNC):
            raise ConfigError(f"unknown schedule '{self.schedule}'", "schedule")
        for key in ("B", "N", "steps", "eval_every"):
            if int(getattr(self, key)) < 1:
                raise ConfigError("must be a positive integer", key)
        if not self.eta > 0:
            raise ConfigError("eta must be > 0", "eta")
        if self.B % self.loss.G != 0:
            raise ConfigError(f"group size {self.loss.G} must divide B={self.B}", "B")
        R = self.fresh_per_step()
        if R < self.loss.G or R % self.loss.G != 0:
            raise ConfigError(f"fresh records per step R={R} must be a multiple of G={self.loss.G}", "R")

    def replay_ratio(self) -> float:
        return self.B / self.fresh_per_step()

    def fresh_per_step(self) -> int:
        if self.transfer == QUEUE:
            return self.B
        if self.R is not None:
            return int(self.R)
        rr = async_sim.steady_state_replay_ratio(self.W, self.T, self.mu)
        return int(round(self.B / rr))

    def compute_params(self) -> eq.ComputeParams:
        return eq.ComputeParams(W=self.W, T=self.T, mu=self.mu, C=self.C)

    def cost_per_update(self) -> float:
        p = self.compute_params()
        return eq.cost_with_buffer(p) if self.transfer == BUFFER else eq.cost_without_buffer(p)


@dataclass
class TrainResult:
    curve: list[dict]
    policy: PolicyParams
    compute: float
    inference_units: float
    trainer_units: float
    batch_entropy: list[float]
    correct_fraction: list[float]
    warnings: list[str]
    warmup_rollouts: int = 0


def _check_logits(policy: PolicyParams, step: int) -> None:
    m = float(np.max(np.abs(policy.logits)))
    if not math.isfinite(m) or m > LOGIT_GUARD:
        raise DivergenceError(step, m)


class _Trainer:
    """Shared update and bookkeeping for both schedules."""

    def __init__(self, cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.policy = PolicyParams.uniform(cfg.task.P, cfg.task.K,
                                           temperature_train=cfg.temperature_train,
                                           temperature_eval=cfg.temperature_eval)
        self.snapshots: dict[int, PolicyParams] = {0: self.policy.snapshot()}
        self.curve: list[dict] = []
        self.entropies: list[float] = []
        self.correct: list[float] = []
        self.batch_rewards: list[float] = []
        self.cost = cfg.cost_per_update()
        self.baseline_cost = eq.cost_without_buffer(cfg.compute_params())
        self.warmup_rollouts = 0

    def generate(self, policy: PolicyParams, count: int, first_id: int, creation_step: int,
                 version: int, rng: np.random.Generator) -> list[RolloutRecord]:
        G = self.cfg.loss.G
        out: list[RolloutRecord] = []
        for g in range(count // G):
            prompt = int(rng.integers(0, self.cfg.task.P))
            rid = first_id + g * G
            out.extend(rollout_group(policy, self.cfg.task, prompt, G, rng, first_id=rid,
                                     creation_step=creation_step, policy_version=version, group_id=rid // G))
        return out

    def update(self, step: int, batch: list) -> None:
        _, grad = loss_grad(self.policy, batch, self.cfg.loss)
        self.policy.logits -= self.cfg.eta * grad
        _check_logits(self.policy, step)
        self.snapshots[step + 1] = self.policy.snapshot()
        self.entropies.append(metrics.batch_entropy(batch))
        self.correct.append(metrics.correct_fraction(batch))
        self.batch_rewards.append(float(np.mean([r.reward for r in batch])))
        done = step + 1
        if done % self.cfg.eval_every == 0 or done == self.cfg.steps:
            self.record(done)

    def record(self, done: int) -> None:
        row = {
            "step": done,
            "compute": done * self.cost,
            "compute_baseline_model": done * self.baseline_cost,
            "mean_reward": expected_reward(self.policy, self.cfg.task),
            "batch_reward": self.batch_rewards[-1] if self.batch_rewards else math.nan,
            "entropy": mean_entropy(self.policy),
            "batch_entropy": self.entropies[-1] if self.entropies else math.nan,
        }
        for k in PASS_AT_K:
            row[f"pass@{k}"] = pass_at_k(self.policy, self.cfg.task, k)
        self.curve.append(row)


def _train_sync(cfg: TrainConfig, tr: _Trainer) -> None:
    rng_gen = streams.named_stream(cfg.seed, streams.NOISE)
    rng_sample = streams.named_stream(cfg.seed, streams.TRAINING)
    R = cfg.fresh_per_step()
    buf = None
    if cfg.transfer == BUFFER:
        buf = ShardedReplayBuffer(cfg.N, 1, cfg.strategy, retention_from(cfg.delta))
    next_id = 0
    if buf is not None:
        # warm-up: the first batch must find B records
        while len(buf) < min(cfg.B, cfg.N):
            buf.push_many(tr.generate(tr.policy, R, next_id, 0, 0, rng_gen))
            next_id += R
        tr.warmup_rollouts = next_id
    for t in range(cfg.steps):
        fresh = tr.generate(tr.policy, R, next_id, t, t, rng_gen)
        next_id += R
        if buf is None:
            batch = fresh
        else:
            buf.push_many(fresh)
            batch = buf.sample(cfg.B, rng_sample, use_step=t, batch_id=t).records
        tr.update(t, batch)


def _train_async(cfg: TrainConfig, tr: _Trainer) -> None:
    def produce(ctx: async_sim.GenerationContext) -> list:
        policy = tr.snapshots[ctx.policy_version]
        return tr.generate(policy, ctx.count, ctx.first_id, ctx.creation_step, ctx.policy_version, ctx.rng)

    pc = async_sim.PipelineConfig(
        W=cfg.W, T=cfg.T, mu=cfg.mu, horizon=cfg.steps, transfer=cfg.transfer,
        N=cfg.N, strategy=cfg.strategy, delta=cfg.delta, B=cfg.B, G=cfg.loss.G,
        service_jitter=cfg.service_jitter, C=cfg.C, seed=cfg.seed,
        queue_capacity=0 if cfg.transfer == QUEUE else None,
    )
    async_sim.simulate(pc, producer=produce, consumer=tr.update)


def train(cfg: TrainConfig) -> TrainResult:
    """
    Run `steps` policy updates. The sync schedule inserts R fresh records per
    step; the async schedule takes its timing from async_sim.
    """
    warnings = cfg.task.validate()
    rr = cfg.replay_ratio()
    if cfg.transfer == BUFFER and cfg.R is None:
        target = async_sim.steady_state_replay_ratio(cfg.W, cfg.T, cfg.mu)
        if abs(rr - target) > 1e-9:
            warnings.append(f"replay ratio {rr:.3g} rounded from the pipeline's {target:.3g}")
    tr = _Trainer(cfg)
    if cfg.schedule == SYNC:
        _train_sync(cfg, tr)
    else:
        _train_async(cfg, tr)
    steps = cfg.steps
    logger.info("[train] %s/%s %s: %d steps, final reward %.4f", cfg.loss.kind, cfg.transfer, cfg.schedule,
                steps, tr.curve[-1]["mean_reward"] if tr.curve else math.nan)
    p = cfg.compute_params()
    per_update_inference = (cfg.W / cfg.T if cfg.transfer == BUFFER else cfg.mu) * cfg.C
    return TrainResult(
        curve=tr.curve,
        policy=tr.policy,
        compute=steps * tr.cost,
        inference_units=steps * per_update_inference,
        trainer_units=steps * p.C,
        batch_entropy=tr.entropies,
        correct_fraction=tr.correct,
        warnings=warnings,
        warmup_rollouts=tr.warmup_rollouts,
    )
