import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsim.consensus import ConfigError
from rbsim.core import (
    KEY_BITS,
    InvariantViolation,
    LockRecord,
    ShardState,
    hash_key,
    make_tx,
)
from rbsim.epoch import (
    EpochConfig,
    Merge,
    NetworkState,
    Split,
    measure_skew,
    plan_reconfiguration,
    rebucket,
    shard_workload,
    transition_epoch,
)
from rbsim.partitioning import account_shard, init_ranges
from rbsim.randomness import assign_committees


def _net(n_shards=4, n_accounts=200, pool=40):
    table = init_ranges(n_shards)
    by = {s: {} for s in table.shards}
    for i in range(n_accounts):
        a = f"acct{i}"
        by[account_shard(a, table)][a] = 100 + i
    shards = {s: ShardState(s, table.range_of(s), by[s]) for s in table.shards}
    comm = assign_committees(range(pool), table.shards, 1, pool // n_shards)
    return NetworkState(0, table, shards, comm, tuple(range(pool)))


def test_workload_counts_cross_legs_double():
    txs = [make_tx(1, "a", "b", 1, 0, 0, 0), make_tx(2, "a", "b", 1, 0, 0, 1)]
    assert shard_workload(txs) == 3


def test_config_rejects_bad_thresholds():
    with pytest.raises(ConfigError):
        EpochConfig(w_hi=1.0, w_lo=2.0)
    with pytest.raises(ConfigError):
        EpochConfig(v_min=2)
    assert EpochConfig(v_min=1, single_validator=True).v_min == 1


def test_plan_splits_hot_and_merges_cold():
    net = _net()
    hist = {0: [hash_key(a) for a in net.shards[0].accounts]}
    plan = plan_reconfiguration({0: 100, 1: 1, 2: 1, 3: 30}, net.table, EpochConfig(), hist)
    assert [type(a) for a in plan.actions] == [Split, Merge]
    assert plan.merges == [Merge(1, 2)]
    assert net.table.range_of(0).lo < plan.splits[0].key < net.table.range_of(0).hi


def test_plan_respects_shard_cap():
    net = _net()
    hist = {0: [hash_key(a) for a in net.shards[0].accounts]}
    plan = plan_reconfiguration({0: 100, 1: 30, 2: 30, 3: 30}, net.table, EpochConfig(), hist,
                                max_shards=4)
    assert plan.actions == []


def test_transition_preserves_balances_and_partition():
    net = _net()
    before = net.balances()
    hist = {0: [hash_key(a) for a in net.shards[0].accounts]}
    plan = plan_reconfiguration({0: 100, 1: 1, 2: 1, 3: 30}, net.table, EpochConfig(), hist)
    new, applied = transition_epoch(net, plan, 7, EpochConfig())
    assert new.epoch == 1 and len(new.table.shards) == 4
    assert new.balances() == before
    for s, st_ in new.shards.items():
        assert all(account_shard(a, new.table) == s for a in st_.accounts)
    members = [m for vs in new.committees.values() for m in vs.members]
    assert len(members) == len(set(members))
    assert len(applied.actions) == 2 + 4


def test_transition_requires_quiescence():
    net = _net()
    st0 = net.shards[0]
    st0.lock_table[st0.accounts[0]] = LockRecord(st0.accounts[0], 9, 0, 10)
    with pytest.raises(InvariantViolation):
        transition_epoch(net, plan_reconfiguration({}, net.table, EpochConfig()), 1, EpochConfig())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=4, max_size=4), st.integers(0, 1000))
def test_random_plans_conserve_and_cover(loads, seed):
    net = _net()
    hist = {s: [hash_key(a) for a in net.shards[s].accounts] for s in net.table.shards}
    plan = plan_reconfiguration(dict(enumerate(loads)), net.table, EpochConfig(), hist,
                                max_shards=10)
    new, _ = transition_epoch(net, plan, seed, EpochConfig())
    assert new.total() == net.total()
    assert new.balances() == net.balances()
    new.table.validate()


def test_split_lowers_skew_of_rebucketed_histogram():
    table = init_ranges(2)
    hot = [k for k in (hash_key(f"acct{i}") for i in range(400)) if k < table.range_of(1).lo]
    hist = hot * 3 + [table.range_of(1).lo + 5]
    before = measure_skew(rebucket(hist, table))
    plan = plan_reconfiguration({0: len(hist) - 1, 1: 1}, table, EpochConfig(w_hi=10, w_lo=0),
                                {0: hist[:-1]})
    new = table.split(0, plan.splits[0].key, 2)
    assert measure_skew(rebucket(hist, new)) < before
    assert sum(rebucket(hist, new).values()) == len(hist)
    assert new.bits == KEY_BITS
