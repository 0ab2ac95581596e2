import numpy as np
import pytest

from buffer_core import (
    PlainFIFO,
    PositiveBias,
    RolloutRecord,
    SamplingStrategy,
    ShardedReplayBuffer,
    TransferQueue,
    retention_from,
    round_robin,
)
from errors import BackPressure, ConfigError, DuplicateRecordError, LedgerError, NotReadyError
from metrics import UseLedger


def rec(i, step=0, correct=True):
    return RolloutRecord(rollout_id=i, prompt_id=0, group_id=i // 4, creation_step=step, policy_version=step,
                         reward=1.0 if correct else 0.0, is_correct=correct, behavior_logprob=-1.0,
                         advantage=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# ----------------------------- records -----------------------------

def test_record_fields_frozen_except_use_count():
    r = rec(1)
    with pytest.raises(AttributeError):
        r.reward = 0.5
    with pytest.raises(AttributeError):
        r.creation_step = 3
    r.use_count += 2
    assert r.use_count == 2


def test_record_dict_round_trip_keeps_extra_fields():
    r = RolloutRecord(3, 1, 0, 2, 2, 1.0, True, -0.7, 0.5, action=4, group_mean_reward=0.25, cost=6.0)
    assert RolloutRecord.from_dict({**r.to_dict(), "shard": 1}) == r


# ----------------------------- routing and eviction -----------------------------

def test_round_robin():
    assert [round_robin(i, 3) for i in range(6)] == [0, 1, 2, 0, 1, 2]
    with pytest.raises(ConfigError):
        round_robin(0, 0)


def test_fifo_eviction_per_shard():
    buf = ShardedReplayBuffer(4, T=2)
    evicted = [buf.push(rec(i)) for i in range(8)]
    assert [e.rollout_id for e in evicted if e is not None] == [0, 1, 2, 3]
    assert [r.rollout_id for r in buf.contents(0)] == [4, 6]
    assert [r.rollout_id for r in buf.contents(1)] == [5, 7]
    assert buf.evictions == 4 and buf.arrivals == 8
    assert 0 not in buf and 7 in buf


def test_capacity_must_split_across_shards():
    with pytest.raises(ConfigError) as exc:
        ShardedReplayBuffer(10, T=3)
    assert exc.value.key == "N"


def test_duplicate_push_rejected():
    buf = ShardedReplayBuffer(4)
    buf.push(rec(1))
    with pytest.raises(DuplicateRecordError):
        buf.push(rec(1))


def test_positive_bias_keeps_correct_records():
    pattern = [True, False, True, True, False, True, False, True]
    buf = ShardedReplayBuffer(8, retention=PositiveBias(0.75))
    buf.push_many(rec(i, correct=c) for i, c in enumerate(pattern))
    out = [buf.push(rec(8, correct=False)).rollout_id,
           buf.push(rec(9, correct=True)).rollout_id,
           buf.push(rec(10, correct=True)).rollout_id,
           buf.push(rec(11, correct=True)).rollout_id]
    assert out == [1, 4, 6, 8]
    assert [r.rollout_id for r in buf.contents()] == [0, 2, 3, 5, 7, 9, 10, 11]


def test_positive_bias_shortfall_evicts_oldest():
    buf = ShardedReplayBuffer(4, retention=PositiveBias(0.5))
    buf.push_many(rec(i) for i in range(4))
    assert buf.push(rec(4, correct=False)).rollout_id == 0


def test_positive_bias_worked_sequence():
    pattern = [False, True, True, False, True, True, False, True, False, False]
    buf = ShardedReplayBuffer(8, retention=PositiveBias(0.75))
    evicted = [buf.push(rec(i, correct=c)) for i, c in enumerate(pattern)]
    assert [e.rollout_id for e in evicted if e is not None] == [0, 3]
    assert [r.rollout_id for r in buf.contents()] == [1, 2, 4, 5, 6, 7, 8, 9]


@pytest.mark.parametrize("delta", [0.25, 0.5, 0.75])
def test_positive_bias_retention_on_random_stream(delta):
    policy = PositiveBias(delta)
    cap = 12
    fresh = policy.fresh_slots(cap)
    gen = np.random.default_rng(11)
    buf = ShardedReplayBuffer(cap, retention=policy)
    for i in range(400):
        before = buf.contents()
        new = rec(i, correct=bool(gen.random() < 0.4))
        ev = buf.push(new)
        kept = [r.rollout_id for r in buf.contents()]
        assert len(kept) == min(i + 1, cap)
        assert set(range(max(0, i + 1 - fresh), i + 1)) <= set(kept)
        if ev is not None:
            older = (before + [new])[: cap + 1 - fresh]
            assert ev.rollout_id in [r.rollout_id for r in older]
            if ev.is_correct:
                assert all(r.is_correct for r in older)



def test_zero_delta_is_plain_fifo():
    assert isinstance(retention_from(0.0), PlainFIFO)
    assert PositiveBias(0.3).fresh_slots(10) == 7
    buf = ShardedReplayBuffer(3, retention=PositiveBias(0.0))
    buf.push_many(rec(i, correct=False) for i in range(3))
    assert buf.push(rec(3, correct=True)).rollout_id == 0
    with pytest.raises(ConfigError):
        PositiveBias(1.5)


# ----------------------------- sampling -----------------------------

def test_warmup_rule():
    buf = ShardedReplayBuffer(8, T=2)
    buf.push_many(rec(i) for i in range(3))
    assert not buf.ready(2)
    buf.push(rec(3))
    assert buf.ready(2)


def test_sample_with_replacement_counts_uses(rng):
    buf = ShardedReplayBuffer(8, T=2)
    buf.push_many(rec(i) for i in range(8))
    ledger = UseLedger()
    res = buf.sample(3, rng, use_step=5, batch_id=5, ledger=ledger)
    assert len(res.records) == 6 and len(res.events) == 6
    assert [e.within_batch_rank for e in res.events] == list(range(6))
    assert len(ledger) == 6
    assert sum(buf.uses(i) for i in range(8)) == 6
    assert sum(r.use_count for r in buf.records()) == 6
    assert buf.occupancy() == 8


def test_sample_without_replacement_distinct(rng):
    buf = ShardedReplayBuffer(6, strategy=SamplingStrategy.UNIFORM_WITHOUT_REPLACEMENT)
    buf.push_many(rec(i) for i in range(6))
    ids = [r.rollout_id for r in buf.sample(6, rng).records]
    assert sorted(ids) == list(range(6))
    with pytest.raises(ConfigError):
        buf.sample(7, rng)


def test_unused_first_prefers_fresh_unused(rng):
    buf = ShardedReplayBuffer(6, strategy="unused_first_without_replacement")
    buf.push_many(rec(i) for i in range(6))
    first = [r.rollout_id for r in buf.sample(2, rng).records]
    assert first == [5, 4]
    second = [r.rollout_id for r in buf.sample(2, rng).records]
    assert second == [3, 2]
    third = buf.sample(3, rng).records
    assert {r.rollout_id for r in third[:2]} == {1, 0}
    assert third[2].rollout_id in {2, 3, 4, 5}


def test_freshest_is_deterministic(rng):
    buf = ShardedReplayBuffer(6, strategy=SamplingStrategy.FRESHEST)
    buf.push_many(rec(i) for i in range(6))
    assert [r.rollout_id for r in buf.sample(2, rng).records] == [4, 5]


def test_sample_empty_shard_not_ready(rng):
    buf = ShardedReplayBuffer(4, T=2)
    buf.push(rec(0))
    with pytest.raises(NotReadyError):
        buf.sample(1, rng)


def test_sample_before_creation_is_ledger_error(rng):
    buf = ShardedReplayBuffer(2)
    buf.push(rec(0, step=4))
    with pytest.raises(LedgerError):
        buf.sample(1, rng, use_step=3)


def test_failed_sample_leaves_use_counts_untouched(rng):
    buf = ShardedReplayBuffer(4, T=2, strategy=SamplingStrategy.UNIFORM_WITHOUT_REPLACEMENT)
    buf.push_many(rec(i) for i in range(3))
    ledger = UseLedger()
    with pytest.raises(ConfigError):
        buf.sample(2, rng, ledger=ledger)
    assert [buf.uses(i) for i in range(3)] == [0, 0, 0]
    assert [r.use_count for r in buf.records()] == [0, 0, 0]
    assert len(ledger) == 0


def test_failed_creation_check_leaves_use_counts_untouched(rng):
    buf = ShardedReplayBuffer(4, T=2)
    buf.push_many([rec(0), rec(1, step=9), rec(2), rec(3, step=9)])
    with pytest.raises(LedgerError):
        buf.sample(2, rng, use_step=3)
    assert sum(buf.uses(i) for i in range(4)) == 0


@pytest.mark.slow
def test_uniform_sampling_frequencies():
    buf = ShardedReplayBuffer(8)
    buf.push_many(rec(i) for i in range(8))
    draws = 100_000
    ids = [r.rollout_id for r in buf.sample(draws, np.random.default_rng(3)).records]
    freq = np.bincount(ids, minlength=8) / draws
    assert np.all(np.abs(freq - 1 / 8) < 0.01)


def test_same_seed_replays_identical_ids():
    def run(seed):
        buf = ShardedReplayBuffer(12, T=2, retention=PositiveBias(0.5))
        gen = np.random.default_rng(seed)
        seen = []
        for step in range(30):
            buf.push_many(rec(4 * step + j, step=step, correct=bool(gen.random() < 0.5)) for j in range(4))
            if buf.ready(2):
                seen.append([r.rollout_id for r in buf.sample(2, gen, use_step=step).records])
        return seen, [r.rollout_id for r in buf.records()]

    assert run(5) == run(5)
    assert run(5) != run(6)



def test_dump_and_load(tmp_path, rng):
    buf = ShardedReplayBuffer(4, T=2)
    buf.push_many(rec(i, correct=i % 2 == 0) for i in range(6))
    buf.sample(1, rng)
    path = buf.dump(str(tmp_path / "buffer.jsonl"))
    back = ShardedReplayBuffer.load(path, 4, T=2)
    for k in range(2):
        assert [r.rollout_id for r in back.contents(k)] == [r.rollout_id for r in buf.contents(k)]
    assert [back.uses(i) for i in range(2, 6)] == [buf.uses(i) for i in range(2, 6)]
    assert back.arrivals == 6
    # routing continues where the dumped buffer stopped
    assert back.shard_route() == buf.shard_route()


# ----------------------------- transfer queue -----------------------------

def test_queue_is_lifo():
    q = TransferQueue()
    for i in range(5):
        q.push(rec(i))
    assert q.pop().rollout_id == 4
    assert [r.rollout_id for r in q.pop_many(3)] == [3, 2, 1]
    assert len(q) == 1 and q.pushed == 5 and q.popped == 4


def test_queue_back_pressure():
    q = TransferQueue(capacity=3)
    q.push_group([rec(0), rec(1)])
    assert q.room() == 1
    with pytest.raises(BackPressure):
        q.push_group([rec(2), rec(3)])
    assert len(q) == 2
    q.push(rec(2))
    with pytest.raises(BackPressure):
        q.push(rec(3))


def test_queue_empty_not_ready():
    q = TransferQueue()
    with pytest.raises(NotReadyError):
        q.pop()
    q.push(rec(0))
    with pytest.raises(NotReadyError):
        q.pop_many(2)
    assert q.pop_many(0) == []
