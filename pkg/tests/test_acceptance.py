"""End-to-end acceptance checks, one test per criterion.

Each test records its measurement through ``record`` so the session ends
with one PASS/FAIL line per criterion.
"""
import math
import random
import time
from fractions import Fraction

import pytest
from committee import run_committee
from conftest import ACCEPTANCE
from scipy.stats import chisquare

from rbsim.config import ScenarioConfig
from rbsim.consensus import fault_bound
from rbsim.engine import run_engine
from rbsim.explore import Adversary, explore_all
from rbsim.metrics import build_report
from rbsim.models import evaluate_model
from rbsim.randomness import LastRevealer, run_round
from rbsim.replay import replay_file
from rbsim.scenario import PRESETS, TRACE_NAME, run_preset, sybil_takeover

pytestmark = pytest.mark.slow


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def _rel(a, b) -> float:
    return abs(float(a) - float(b)) / abs(float(b))


@pytest.fixture(scope="module")
def presets(tmp_path_factory):
    """Every preset run once at seed 1, with its output directory and runtime."""
    out = {}
    for name in PRESETS:
        d = tmp_path_factory.mktemp(f"{name}-a")
        t = time.perf_counter()
        res = run_preset(name, 1, d)
        out[name] = (res, d, time.perf_counter() - t)
    return out


def test_c01_model_values():
    t = time.perf_counter()
    checks = [
        (evaluate_model("HonestQuorumProb", n_h=70, N=100, k=3), Fraction(657, 1000)),
        (evaluate_model("MaliciousThroughput", T_ideal=5000, f=10, N=100), 4500),
        (evaluate_model("FaultProb", m=3, t=10), Fraction(3, 10)),
        (evaluate_model("LockOverhead", T_cross=100, L_account=2, T_intra=400), Fraction(1, 2)),
        (evaluate_model("DoSProb", T_attack=10, T_threshold=5, M_malicious=50, N=100),
         0.5 * (1 - math.exp(-2))),
        (evaluate_model("DoSProb", T_attack=1, T_threshold=1000, M_malicious=1, N=10),
         0.1 * -math.expm1(-0.001)),
    ]
    dt = time.perf_counter() - t
    worst = max(_rel(got, want) for got, want in checks)
    ok = worst <= 1e-12 and dt < 1
    record(1, ok, f"max relative error {worst:.1e}, {dt * 1000:.1f} ms")
    assert ok


def test_c02_throughput_scaling(presets):
    res, _, dt = presets["scaling"]
    t = res.summary["throughput"]
    n_txs = min(res.summary["submitted"].values())
    ratio = res.summary["ratio_14_2"]
    ok = ratio >= 4.0 and n_txs >= 10_000 and dt < 300
    record(2, ok, f"T14/T2 = {ratio:.2f} (>= 4.0), {t[2]:.3f} -> {t[14]:.3f} tx/tick, "
                  f"min {n_txs} txs, {dt:.0f} s")
    assert ok


def test_c03_malicious_resilience(presets):
    res, _, dt = presets["malicious"]
    ratio = res.summary["ratio_10"]
    ok = ratio >= 0.75 and dt < 300
    record(3, ok, f"T(10%)/T(0%) = {ratio:.3f} (>= 0.75), {dt:.0f} s")
    assert ok


def test_c04_fine_vs_full_locking(presets):
    res, _, dt = presets["locking"]
    s = res.summary
    ok = s["ratio"] <= 0.8 and dt < 300
    record(4, ok, f"cross p50 fine/full = {s['p50_fine']:.0f}/{s['p50_full']:.0f} "
                  f"= {s['ratio']:.3f} (<= 0.8), {dt:.1f} s")
    assert ok


def test_c05_atomicity_and_conservation():
    cfg = ScenarioConfig(tx_rate=5.0, duration=2000, cross_fraction=1.0, inject_reject=0.05,
                         inject_expiry=0.05, n_accounts=2000)
    t = time.perf_counter()
    res = run_engine(cfg)
    dt = time.perf_counter() - t
    rep = build_report(res)
    cross = sum(1 for r in res.records.values() if r.kind == "cross" and not r.spam)
    balances = res.balances()
    exact = sum(balances.values()) + res.burned() == res.genesis_total
    ok = (cross >= 10_000 and exact and rep.conserved and min(balances.values()) >= 0
          and res.live_locks() == 0 and res.quiescent and dt < 120)
    record(5, ok, f"{cross} cross txs, {rep.finalized} finalized, aborts {rep.aborted}, "
                  f"conserved={exact}, live locks={res.live_locks()}, {dt:.1f} s")
    assert ok


def test_c06_ibft_safety():
    t = time.perf_counter()
    eq = explore_all(4, Adversary.EQUIVOCATE, max_delays=2)
    silent = explore_all(4, Adversary.SILENT, max_delays=2)
    dt = time.perf_counter() - t
    total = eq.schedules + silent.schedules
    ok = (not eq.violations and not silent.violations and eq.schedules >= 100_000
          and silent.schedules >= 100_000 and dt < 600)
    record(6, ok, f"equivocate {eq.schedules} schedules, silent {silent.schedules} schedules "
                  f"({total} total), conflicts {len(eq.violations) + len(silent.violations)}, "
                  f"{dt:.0f} s")
    assert ok


def test_c07_ibft_liveness():
    t = time.perf_counter()
    worst, bad_timers, heights = 0, [], 0
    for n in (4, 7, 10):
        f = fault_bound(n)
        for silent in ({*range(f)}, {*range(n - f, n)}, {*range(0, 3 * f, 3)}):
            out = run_committee(n, silent, 3 * n, base_timeout=8)
            assert len(out.rounds) == 3 * n, f"n={n} silent={sorted(silent)} stalled"
            heights += len(out.rounds)
            worst = max(worst, max(out.rounds.values()) + 1)
            bad_timers += [(r, ln) for r, ln in out.timeouts if ln != 8 << r]
    dt = time.perf_counter() - t
    ok = worst <= 8 and not bad_timers and dt < 120
    record(7, ok, f"{heights} heights, worst {worst} rounds per height (<= 8), "
                  f"timers 8/16/32/... exact={not bad_timers}, {dt:.1f} s")
    assert ok


def test_c08_commit_reveal():
    t = time.perf_counter()
    rng = random.Random(8)
    counts = [0] * 256
    for i in range(10_000):
        counts[run_round(range(8), rng=rng, round_id=i).value & 0xFF] += 1
    p = chisquare(counts).pvalue
    target = lambda v: v >> 63 == 1
    steer = {7: LastRevealer(target)}
    hits = sum(target(run_round(range(8), steer, rng, round_id=i).value) for i in range(10_000))
    bias = hits / 10_000
    dt = time.perf_counter() - t
    ok = p > 0.01 and bias <= 0.76 and dt < 60
    record(8, ok, f"chi-square p = {p:.3f} (> 0.01), last-revealer hit rate {bias:.4f} "
                  f"(<= 0.76), {dt:.1f} s")
    assert ok


@pytest.mark.xfail(strict=True, reason="with 30 Sybils among 100 validators filling 10 "
                   "committees of 10, only an exact 3-per-committee split avoids capture")
def test_c09_sybil_takeover():
    t = time.perf_counter()
    out = sybil_takeover(1, n=100, shards=10, sybil_fraction=0.3, epochs=1000)
    dt = time.perf_counter() - t
    ok = out.fraction < 0.02 and dt < 120
    record(9, ok, f"captured epochs {out.captured}/{out.epochs} = {out.fraction:.3f} "
                  f"(< 0.02); exact uniform-draw probability {out.analytic:.5f}, {dt:.1f} s")
    assert ok


def test_c10_dos_mitigation(presets):
    res, _, dt = presets["dos"]
    s = res.summary
    ok = s["ratio"] <= 0.6 and dt < 180
    record(10, ok, f"degradation adaptive/static = {s['degradation_adaptive']:.3f}/"
                   f"{s['degradation_static']:.3f} = {s['ratio']:.3f} (<= 0.6), {dt:.1f} s")
    assert ok


def test_c11_reconfiguration(presets, tmp_path):
    res, d, dt = presets["reconfig"]
    s = res.summary
    again = run_preset("reconfig", 1, tmp_path)
    trace_a, trace_b = d / TRACE_NAME, tmp_path / TRACE_NAME
    identical = again.summary == s and trace_a.read_bytes() == trace_b.read_bytes()
    replay = replay_file(trace_a)
    rep = res.report("reconfig")
    ok = (s["sigma_before"] >= 2 and s["sigma_rebucketed"] < s["sigma_before"]
          and s["sigma_next"] is not None and s["sigma_next"] < s["sigma_before"]
          and s["replay_matches"] and replay.matches() and s["conserved"]
          and rep.live_locks == 0 and identical and dt < 120)
    record(11, ok, f"sigma {s['sigma_before']:.2f} -> rebucketed {s['sigma_rebucketed']:.2f}, "
                   f"next epoch {s['sigma_next']:.2f}; {s['actions'][:3]}; "
                   f"replay matches={replay.matches()}, same-seed trace identical={identical}, "
                   f"{dt:.1f} s")
    assert ok


def _files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_c12_determinism(presets, tmp_path_factory):
    mismatched = []
    first = second = 0.0
    for name in PRESETS:
        res, d, dt = presets[name]
        d2 = tmp_path_factory.mktemp(f"{name}-b")
        t = time.perf_counter()
        res2 = run_preset(name, 1, d2)
        second += time.perf_counter() - t
        first += dt
        digests = [r.trace_digest for r in res.reports] == [r.trace_digest for r in res2.reports]
        if not (digests and _files(d) == _files(d2) and res.summary == res2.summary):
            mismatched.append(name)
    # the check reuses the first pass, so its own cost is the rerun
    ok = not mismatched and second < 2 * first
    record(12, ok, f"{len(PRESETS)} presets rerun at seed 1, mismatched: "
                   f"{', '.join(mismatched) or 'none'}; {first:.0f} s + {second:.0f} s")
    assert ok
