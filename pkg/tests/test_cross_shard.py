import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsim.core import SHARD_LOCK, DomainError, ShardState, make_tx
from rbsim.cross_shard import (
    FULL,
    Aborted,
    Ack,
    Conflict,
    CrossShardTx,
    RoutingError,
    Vote,
    XPhase,
    check_proof,
    decide,
    dest_abort,
    expire_locks,
    finalize,
    initiate,
    live_locks,
    retry_schedule,
    validate_and_execute,
)
from rbsim.partitioning import account_shard, init_ranges


def _pair(n=40, bal=100):
    table = init_ranges(2)
    split = {0: {}, 1: {}}
    for i in range(n):
        a = f"acct{i}"
        split[account_shard(a, table)][a] = bal
    return [ShardState(s, table.range_of(s), split[s]) for s in (0, 1)]


def _value(states):
    return sum(s.total() + s.burned + s.transfer_out - s.transfer_in for s in states)


def _transfer(src, dst, tx_id, amount=10, fee=2, i=0, j=0):
    return make_tx(tx_id, src.accounts[i], dst.accounts[j], amount, fee, src.shard, dst.shard)


def test_commit_path_moves_value_and_burns_fee():
    a, b = _pair()
    genesis = _value([a, b])
    tx = _transfer(a, b, 1)
    msg = initiate(tx, a, 0)
    assert a.is_locked(tx.sender)
    ack = validate_and_execute(msg, b, 1)
    assert ack.ok and b.is_locked(tx.receiver)
    ctx = CrossShardTx(tx, XPhase.COMMITTING)
    assert finalize(ctx, {0: Vote.VALIDATED, 1: ack}, a, b) is XPhase.FINALIZED
    assert a.balances[tx.sender] == 88 and b.balances[tx.receiver] == 110
    assert a.burned == 2 and live_locks([a, b]) == 0
    assert a.total() + b.total() + a.burned == genesis


def test_rejection_rolls_back_both_legs():
    a, b = _pair()
    tx = _transfer(a, b, 1)
    msg = initiate(tx, a, 0)
    validate_and_execute(msg, b, 1)
    ctx = CrossShardTx(tx, XPhase.COMMITTING)
    assert finalize(ctx, {0: Vote.VALIDATED, 1: Vote.REJECTED}, a, b) is XPhase.ABORTED
    assert a.balances[tx.sender] == 100 and b.balances[tx.receiver] == 100
    assert live_locks([a, b]) == 0


def test_conflicting_lock_is_reported():
    a, b = _pair()
    initiate(_transfer(a, b, 1), a, 0)
    assert initiate(_transfer(a, b, 2), a, 0) == Conflict(1)
    assert not isinstance(initiate(_transfer(a, b, 3, i=1), a, 0), Conflict)


def test_full_mode_locks_whole_shard():
    a, b = _pair()
    initiate(_transfer(a, b, 1, i=0), a, 0, mode=FULL)
    assert SHARD_LOCK in a.lock_table
    assert initiate(_transfer(a, b, 2, i=1), a, 0, mode=FULL) == Conflict(1)


def test_insufficient_sender_aborts():
    a, b = _pair(bal=5)
    assert initiate(_transfer(a, b, 1, amount=10), a, 0) == Aborted("insufficient")


def test_wrong_shard_raises():
    a, b = _pair()
    with pytest.raises(RoutingError):
        initiate(_transfer(b, a, 1), a, 0)


def test_tampered_proof_is_rejected():
    a, b = _pair()
    tx = _transfer(a, b, 1)
    msg = initiate(tx, a, 0)
    assert check_proof(msg) == ""
    bad = type(msg)(tx, msg.proof, msg.root, msg.leaf[:-1] + b"\0")
    assert check_proof(bad) == "BadProof"
    assert validate_and_execute(bad, b, 1) == Ack(1, Vote.REJECTED, "BadProof")


def test_unlocked_leaf_is_rejected():
    a, b = _pair()
    tx = _transfer(a, b, 1)
    msg = initiate(tx, a, 0)
    other = _transfer(a, b, 2, i=1)
    forged = type(msg)(other, msg.proof, msg.root, msg.leaf)
    assert check_proof(forged) == "NotLocked"


def test_stale_proof_is_rejected():
    a, b = _pair()
    tx = _transfer(a, b, 1)
    msg = initiate(tx, a, 0)
    seen = {(0, tx.sender): msg.source_height + 1}
    assert validate_and_execute(msg, b, 1, seen_heights=seen).reason == "StaleProof"


def test_expiry_aborts_source_but_keeps_pinned_credit():
    a, b = _pair()
    tx = _transfer(a, b, 1)
    validate_and_execute(initiate(tx, a, 0, ttl=50), b, 1, ttl=50)
    expire_locks(a, 50)
    expire_locks(b, 500)
    assert a.outgoing[1].status == "aborted" and not a.lock_table
    assert b.is_locked(tx.receiver)


def test_decide_is_unanimous():
    assert decide([True, True])
    assert not decide([True, False])
    assert decide([])


def test_retry_schedule_doubles_and_caps():
    assert [retry_schedule(k) for k in range(1, 8)] == [4, 8, 16, 32, 64, 128, None]
    assert retry_schedule(3, fee=10) == 8
    assert retry_schedule(3, fee=100) == 8
    assert retry_schedule(6, max_delay=50) == 50
    rng = random.Random(0)
    assert all(2 <= retry_schedule(2, rng=rng) <= 12 for _ in range(100))
    with pytest.raises(DomainError):
        retry_schedule(0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 60),
                          st.integers(0, 5), st.sampled_from(["ok", "reject", "expire"])),
                max_size=40))
def test_transfers_conserve_value(ops):
    a, b = _pair(bal=50)
    genesis = _value([a, b])
    for tid, (i, j, amount, fee, fate) in enumerate(ops):
        src, dst = (a, b) if tid % 2 == 0 else (b, a)
        i, j = i % len(src.accounts), j % len(dst.accounts)
        tx = _transfer(src, dst, tid, amount, fee, i, j)
        msg = initiate(tx, src, tid * 10, ttl=5)
        if not hasattr(msg, "proof"):
            continue
        ack = validate_and_execute(msg, dst, tid * 10, ttl=5)
        if fate == "expire":
            expire_locks(src, tid * 10 + 5)
            assert src.outgoing[tid].status == "aborted"
            # the destination learns of the abort through the decision record
            dest_abort(dst, tid)
            continue
        votes = {src.shard: Vote.VALIDATED, dst.shard: ack.vote if fate == "ok" else Vote.REJECTED}
        finalize(CrossShardTx(tx, XPhase.COMMITTING), votes, src, dst)
        assert _value([a, b]) == genesis
    assert _value([a, b]) == genesis
    assert a.total() + b.total() + a.burned + b.burned == genesis
    assert min(list(a.balances.values()) + list(b.balances.values())) >= 0
    assert live_locks([a, b]) == 0

