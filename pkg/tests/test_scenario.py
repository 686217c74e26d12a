import random

import pytest

from rbsim import engine
from rbsim.config import ScenarioConfig
from rbsim.consensus import fault_bound
from rbsim.core import InvariantViolation
from rbsim.randomness import assign_committees
from rbsim.scenario import (
    ScenarioFailure,
    any_captured,
    capture_probability,
    execute,
    run_preset,
    sybil_takeover,
)


def _monte_carlo(n, bad, shards, size, trials, seed=0):
    rng = random.Random(seed)
    pool = list(range(n))
    hits = 0
    for _ in range(trials):
        rng.shuffle(pool)
        f = fault_bound(size)
        hits += any(sum(1 for v in pool[i * size:(i + 1) * size] if v < bad) > f
                    for i in range(shards))
    return hits / trials


@pytest.mark.parametrize("n,bad,shards,size", [(40, 6, 4, 10), (60, 10, 5, 12), (100, 10, 10, 10)])
def test_capture_probability_matches_sampling(n, bad, shards, size):
    exact = capture_probability(n, bad, shards, size)
    assert abs(exact - _monte_carlo(n, bad, shards, size, 20_000)) < 0.015


def test_capture_probability_limits():
    assert capture_probability(100, 0, 10, 10) == 0
    assert capture_probability(100, 30, 10, 10) == pytest.approx(1 - 0.0000210801606546, abs=1e-9)
    # a full partition of 100 into 10 committees with 40 adversaries always captures one
    assert capture_probability(100, 40, 10, 10) == pytest.approx(1.0)


def test_sybil_rotation_matches_uniform_draw():
    out = sybil_takeover(3, n=60, shards=5, sybil_fraction=0.1, epochs=300, steer=False)
    p = out.analytic
    sd = (p * (1 - p) / out.epochs) ** 0.5
    assert abs(out.fraction - p) < 4 * sd + 1e-9


def test_any_captured():
    comm = assign_committees(range(8), range(2), 1, 4)
    members = comm[0].members
    assert any_captured(comm, frozenset(members[:2]))
    assert not any_captured(comm, frozenset(members[:1]))


def test_presets_are_listed_and_unknown_raises():
    with pytest.raises(KeyError):
        run_preset("nope")


def test_scenario_failure_writes_trace_tail(tmp_path, monkeypatch):
    def boom(self, *a, **kw):
        self.trace.add(0, "-", "note", "", {"why": "forced"})
        raise InvariantViolation("forced")

    monkeypatch.setattr(engine.Engine, "run", boom)
    with pytest.raises(ScenarioFailure) as e:
        execute(ScenarioConfig(), tmp_path)
    assert e.value.trace_path.read_text().splitlines()[-1] == '0\t-\tnote\t\t{"why":"forced"}'
