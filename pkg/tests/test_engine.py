import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsim.config import ScenarioConfig
from rbsim.engine import Behavior, NodeBehavior, RateLimiter, run_engine


def _small(**kw):
    base = dict(n_nodes=16, n_shards=4, n_accounts=120, tx_rate=0.3, duration=800)
    base.update(kw)
    return ScenarioConfig(**base)


def _check_end_state(res):
    assert res.total_value() == res.genesis_total
    assert min(res.balances().values()) >= 0
    assert res.live_locks() == 0
    assert res.quiescent


def test_honest_run_finalizes_and_conserves():
    res = run_engine(_small(cross_fraction=0.3))
    _check_end_state(res)
    done = [r for r in res.records.values() if r.final_at is not None]
    assert len(done) > 0.9 * len(res.records)
    assert any(r.kind == "cross" for r in done)
    assert max(res.rounds) == 0


def test_same_seed_same_digest_other_seed_differs():
    a, b = run_engine(_small()), run_engine(_small())
    assert a.trace.digest() == b.trace.digest()
    assert a.balances() == b.balances()
    assert run_engine(_small(seed=2)).trace.digest() != a.trace.digest()


def test_injected_rejections_and_expiries_roll_back():
    res = run_engine(_small(cross_fraction=0.5, inject_reject=0.2, inject_expiry=0.2))
    _check_end_state(res)
    reasons = {r.aborted for r in res.records.values() if r.aborted}
    assert reasons, "expected some aborted transfers"


@pytest.mark.parametrize("mix", ["silent=1", "equivocate=1", "invalid=1", "staller=1"])
def test_faulty_members_do_not_break_safety(mix):
    res = run_engine(_small(n_nodes=28, malicious_fraction=0.12, behavior_mix=mix))
    _check_end_state(res)
    assert sum(1 for r in res.records.values() if r.final_at is not None) > 0


def test_full_locking_is_consistent():
    _check_end_state(run_engine(_small(locking="full", cross_fraction=0.3, zipf=1.0)))


def test_epochs_reconfigure_and_conserve():
    res = run_engine(_small(n_nodes=32, epoch_length=400, zipf=1.0, hot_range=True,
                            n_accounts=400, tx_rate=0.4))
    _check_end_state(res)
    assert len(res.epochs) >= 1
    for ep in res.epochs:
        assert ep["sigma_before"] >= 1


def test_flooder_is_rate_limited():
    res = run_engine(_small(dos_rate=2.0, dos_defense="adaptive"))
    _check_end_state(res)
    assert res.rate_limited > 0


def test_rate_limiter_static_and_adaptive():
    static = RateLimiter(2, 10, 5, adaptive=False)
    assert [static.admit("s", 0) for _ in range(3)] == [True, True, False]
    assert not static.admit("s", 4) and static.admit("s", 5)
    adaptive = RateLimiter(1, 10, 5, adaptive=True)
    adaptive.admit("s", 0)
    adaptive.admit("s", 0)          # first offense, blocked until 5
    adaptive.admit("s", 5)
    adaptive.admit("s", 5)          # second offense, blocked for 10
    assert not adaptive.admit("s", 14) and adaptive.admit("s", 15)


def test_behavior_flags():
    assert NodeBehavior().follows_consensus
    assert not NodeBehavior(Behavior.SILENT).follows_consensus


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 10_000), st.floats(0.0, 0.6), st.sampled_from(["fine", "full"]))
def test_random_scenarios_keep_invariants(seed, cross, locking):
    _check_end_state(run_engine(_small(seed=seed, cross_fraction=cross, locking=locking,
                                       duration=400, inject_reject=0.05,
                                       inject_expiry=0.05)))
