import random

import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from rbsim.consensus import ConfigError, ReputationTracker
from rbsim.core import DomainError
from rbsim.randomness import (
    AggMode,
    BeaconFailure,
    CommitRevealRound,
    LastRevealer,
    RoundPhase,
    Withhold,
    aggregate,
    assign_committees,
    commit,
    random_beacon,
    run_round,
    verify_reveal,
)


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**128 - 1), st.integers(0, 2**64 - 1))
def test_commitment_binds_value(value, nonce, other):
    c = commit(value, nonce)
    assert verify_reveal(c, value, nonce)
    if other != value:
        assert not verify_reveal(c, other, nonce)


def test_commit_rejects_out_of_range():
    with pytest.raises(DomainError):
        commit(2**64, 0)
    assert not verify_reveal(b"\0" * 32, -1, 0)


@given(st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=20))
def test_xor_aggregate_is_order_free(values):
    assert aggregate(values) == aggregate(list(reversed(values)))
    assert aggregate(values, AggMode.AVERAGE) == sum(values) // len(values)


def test_round_phases_are_enforced():
    rnd = CommitRevealRound(0)
    assert rnd.add_commit(1, commit(5, 7))
    assert not rnd.add_commit(1, commit(6, 7))
    assert not rnd.add_reveal(1, 5, 7)
    rnd.open_reveals()
    assert not rnd.add_commit(2, commit(1, 1))
    assert not rnd.add_reveal(1, 6, 7)
    assert rnd.rejected == [1]
    assert rnd.add_reveal(1, 5, 7)
    out = rnd.complete()
    assert out.value == 5 and rnd.phase is RoundPhase.COMPLETE


def test_round_without_reveals_fails():
    rnd = CommitRevealRound(0)
    rnd.add_commit(1, commit(1, 1))
    rnd.open_reveals()
    with pytest.raises(BeaconFailure):
        rnd.complete()


def test_withholder_is_excluded_and_penalized():
    trackers = {p: ReputationTracker() for p in range(4)}
    out = run_round(range(4), {2: Withhold()}, random.Random(3), trackers=trackers)
    assert out.contributors == (0, 1, 3) and out.excluded == (2,)
    assert trackers[2].penalty == pytest.approx(ReputationTracker.REVEAL_PENALTY)
    assert trackers[0].penalty == 0


def test_honest_rounds_low_byte_uniform():
    rng = random.Random(11)
    counts = [0] * 256
    for i in range(4000):
        counts[run_round(range(8), rng=rng, round_id=i).value & 0xFF] += 1
    assert chisquare(counts).pvalue > 0.01


def test_last_revealer_biases_toward_target():
    rng = random.Random(5)
    target = lambda v: v >> 63 == 1
    hits = sum(target(run_round(range(8), {7: LastRevealer(target)}, rng).value)
               for _ in range(2000))
    # expected 3/4: the revealer wins whenever the honest half already lands in target
    assert 0.70 < hits / 2000 < 0.80


def test_random_beacon_is_deterministic_and_order_free():
    pool = list(range(30))
    a = random_beacon(pool, 3, 99, committee_size=7)
    b = random_beacon(list(reversed(pool)), 3, 99, committee_size=7)
    assert a.members == b.members and len(a.members) == 7
    assert random_beacon(pool, 4, 99, committee_size=7).members != a.members
    with pytest.raises(ConfigError):
        random_beacon([1, 2, 3], 0, 1)


def test_assign_committees_are_disjoint():
    out = assign_committees(range(40), range(5), 7, 8)
    members = [m for vs in out.values() for m in vs.members]
    assert len(members) == len(set(members)) == 40
