"""Scenario runner and the experiment presets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Callable, Sequence

from .config import ScenarioConfig
from .consensus import ReputationTracker, fault_bound, weighted_select
from .core import InvariantViolation
from .engine import Engine, RunResult
from .metrics import MetricsReport, build_report, report_emit
from .randomness import (
    AggMode,
    BeaconFailure,
    LastRevealer,
    Randomness,
    assign_committees,
    run_round,
)
from .replay import replay_rows
from .sim import NetworkModel, Streams, Uniform

TRACE_NAME = "trace.tsv.gz"


class ScenarioFailure(RuntimeError):
    """An invariant broke mid-run; ``trace_path`` holds the last trace rows."""

    def __init__(self, message: str, trace_path: Path | None):
        super().__init__(message)
        self.trace_path = trace_path


def execute(config: ScenarioConfig, out_dir=None) -> RunResult:
    """Run the engine; on an invariant violation, dump the trace tail."""
    eng = Engine(config)
    try:
        return eng.run()
    except InvariantViolation as e:
        path = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = out / "trace-tail.tsv"
            path.write_text("".join(eng.trace.tail))
        raise ScenarioFailure(str(e), path) from e


def run_scenario(config: ScenarioConfig, out_dir=None, label: str = "",
                 formats: Sequence[str] = ("rows", "table", "plot")) -> MetricsReport:
    res = execute(config, out_dir)
    report = build_report(res, label)
    if out_dir is not None:
        report_emit(report, out_dir, formats)
        if config.trace:
            res.trace.write(Path(out_dir) / TRACE_NAME)
    return report


@dataclass
class PresetResult:
    name: str
    runs: list[tuple[str, ScenarioConfig, MetricsReport]] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def reports(self) -> list[MetricsReport]:
        return [r for _, _, r in self.runs]

    def report(self, label: str) -> MetricsReport:
        for lab, _, r in self.runs:
            if lab == label:
                return r
        raise KeyError(label)


def _sweep(name: str, configs: list[tuple[str, ScenarioConfig]], out_dir) -> PresetResult:
    res = PresetResult(name)
    for label, cfg in configs:
        sub = Path(out_dir) / label if out_dir is not None else None
        res.runs.append((label, cfg, run_scenario(cfg, sub, label)))
    if out_dir is not None:
        report_emit(res.reports, out_dir)
    return res


# -- presets ---------------------------------------------------------------------

def preset_scaling(seed: int = 1, out_dir=None) -> PresetResult:
    """Fixed 100-node network split into 2..14 shards under saturating load."""
    base = ScenarioConfig(seed=seed, n_nodes=100, tx_rate=7.0, duration=1500, drain=False,
                          block_limit=128 + 16 * 256, cross_fraction=0.1)
    res = _sweep("scaling", [(f"shards={s}", base.replace(n_shards=s)) for s in (2, 4, 8, 14)],
                 out_dir)
    t = {int(lab.split("=")[1]): r.throughput_tick for lab, _, r in res.runs}
    res.summary = {"throughput": t, "ratio_14_2": t[14] / t[2] if t[2] else 0.0,
                   "submitted": {lab: r.submitted for lab, _, r in res.runs}}
    return res


def preset_blocksize(seed: int = 1, out_dir=None) -> PresetResult:
    """Block capacity sweep at a fixed shard count under saturating load."""
    base = ScenarioConfig(seed=seed, tx_rate=4.0, duration=1000, drain=False)
    sizes = (8, 16, 32, 64)
    res = _sweep("blocksize", [(f"txs={k}", base.replace(block_limit=128 + k * 256))
                               for k in sizes], out_dir)
    res.summary = {"throughput": {lab: r.throughput_tick for lab, _, r in res.runs}}
    return res


def preset_malicious(seed: int = 1, out_dir=None) -> PresetResult:
    """Silent and equivocating members at 0, 6 and 10 percent of the network."""
    base = ScenarioConfig(seed=seed, n_nodes=100, n_shards=10, tx_rate=6.0, duration=1500,
                          drain=False, block_limit=128 + 16 * 256,
                          behavior_mix="silent=1,equivocate=1")
    res = _sweep("malicious", [(f"f={f}", base.replace(malicious_fraction=f))
                               for f in (0.0, 0.06, 0.10)], out_dir)
    t = {lab: r.throughput_tick for lab, _, r in res.runs}
    res.summary = {"throughput": t, "ratio_10": t["f=0.1"] / t["f=0.0"] if t["f=0.0"] else 0.0,
                   "model_ratio_10": 0.9}
    return res


def preset_latency(seed: int = 1, out_dir=None) -> PresetResult:
    """Latency under light load as the same nodes spread over more shards."""
    base = ScenarioConfig(seed=seed, n_nodes=40, tx_rate=1.0, duration=1500)
    res = _sweep("latency", [(f"shards={s}", base.replace(n_shards=s)) for s in (1, 2, 5, 10)],
                 out_dir)
    res.summary = {"mean_latency": {lab: r.latency["all"]["mean"] for lab, _, r in res.runs}}
    return res


def preset_locking(seed: int = 1, out_dir=None) -> PresetResult:
    """Account-level versus whole-shard locking on a contended workload."""
    base = ScenarioConfig(seed=seed, tx_rate=0.5, duration=2000, zipf=1.0, cross_fraction=0.3)
    res = _sweep("locking", [(m, base.replace(locking=m)) for m in ("fine", "full")], out_dir)
    fine, full = res.report("fine"), res.report("full")
    p_fine, p_full = fine.latency["cross"]["p50"], full.latency["cross"]["p50"]
    res.summary = {"p50_fine": p_fine, "p50_full": p_full,
                   "ratio": p_fine / p_full if p_full else float("inf")}
    return res


def preset_dos(seed: int = 1, out_dir=None) -> PresetResult:
    """One flooder at 50x a node's normal rate against one shard.

    Throughput counts honest transfers only. Degradation is measured against
    the same run without the flooder.
    """
    base = ScenarioConfig(seed=seed, tx_rate=1.5, duration=2000, drain=False,
                          block_limit=128 + 8 * 256)
    rate = 50 * base.tx_rate / base.n_nodes
    configs = [("baseline", base),
               ("static", base.replace(dos_rate=rate, dos_defense="static")),
               ("adaptive", base.replace(dos_rate=rate, dos_defense="adaptive")),
               ("undefended", base.replace(dos_rate=rate))]
    res = _sweep("dos", configs, out_dir)
    t = {lab: r.throughput_tick for lab, _, r in res.runs}
    d_static = (t["baseline"] - t["static"]) / t["baseline"]
    d_adaptive = (t["baseline"] - t["adaptive"]) / t["baseline"]
    res.summary = {"throughput": t, "degradation_static": d_static,
                   "degradation_adaptive": d_adaptive,
                   "ratio": d_adaptive / d_static if d_static else float("inf")}
    return res


def preset_reconfig(seed: int = 1, out_dir=None) -> PresetResult:
    """A hot key range overloads one shard; one epoch of splits should spread it."""
    cfg = ScenarioConfig(seed=seed, n_nodes=48, n_shards=8, committee_size=4, tx_rate=0.5,
                         duration=2000, epoch_length=1000, zipf=1.0, hot_range=True,
                         n_accounts=2000, trace=True)
    res = PresetResult("reconfig")
    run = execute(cfg, Path(out_dir) / "reconfig" if out_dir is not None else None)
    report = build_report(run, "reconfig")
    res.runs.append(("reconfig", cfg, report))
    rows = [(t, n, k, d, _json(x)) for t, n, k, d, x in run.trace.rows]
    rep = replay_rows(rows)
    epochs = run.epochs
    res.summary = {
        "sigma_before": epochs[0]["sigma_before"] if epochs else 0.0,
        "sigma_rebucketed": epochs[0]["sigma_rebucketed"] if epochs else 0.0,
        "sigma_next": epochs[1]["sigma_before"] if len(epochs) > 1 else None,
        "actions": epochs[0]["actions"] if epochs else [],
        "replay_matches": rep.matches(),
        "conserved": report.conserved,
        "trace_digest": report.trace_digest,
    }
    if out_dir is not None:
        report_emit([report], out_dir)
        run.trace.write(Path(out_dir) / TRACE_NAME)
    return res


def _json(x):
    return json.loads(x) if x else None


# -- Sybil takeover over many epochs ---------------------------------------------------

def any_captured(committees, sybils: frozenset[int]) -> bool:
    for vs in committees.values():
        if sum(1 for m in vs.members if m in sybils) > fault_bound(len(vs.members)):
            return True
    return False


def capture_probability(n: int, bad: int, shards: int, size: int) -> float:
    """Exact chance that some committee holds more than its fault bound of
    adversarial members when disjoint committees are drawn uniformly."""
    f = fault_bound(size)
    # dist[b] = probability that b adversarial members remain, no capture so far
    dist = {bad: 1.0}
    remaining = n
    for _ in range(shards):
        nxt: dict[int, float] = {}
        for b, p in dist.items():
            total = comb(remaining, size)
            for k in range(0, min(f, b, size) + 1):
                ways = comb(b, k) * comb(remaining - b, size - k)
                if ways:
                    nxt[b - k] = nxt.get(b - k, 0.0) + p * ways / total
        dist = nxt
        remaining -= size
    return 1.0 - sum(dist.values())


@dataclass
class SybilOutcome:
    epochs: int
    captured: int
    beacon_failures: int
    analytic: float

    @property
    def fraction(self) -> float:
        return self.captured / self.epochs if self.epochs else 0.0


def sybil_takeover(seed: int = 1, n: int = 100, shards: int = 10, sybil_fraction: float = 0.3,
                   epochs: int = 1000, participants: int = 16,
                   steer: bool = True) -> SybilOutcome:
    """Rotate committees by commit-reveal beacon for many epochs and count the
    epochs in which any committee is captured.

    Sybil beacon participants act as last revealers: each waits for the
    honest reveals and withholds if revealing would not capture a committee.
    Withholding costs them reputation, which lowers their odds of taking
    part in later rounds.
    """
    streams = Streams(seed)
    pool = list(range(n))
    rng = streams.fork("sybil")
    sybils = frozenset(rng.sample(pool, round(sybil_fraction * n)))
    size = n // shards
    trackers = {v: ReputationTracker() for v in pool}
    beacon_rng = streams.fork("beacon")
    net = NetworkModel(Uniform(5, 15))
    prev = Randomness.from_seed(seed)
    captured = failures = 0
    shard_ids = list(range(shards))

    def capture(value: int) -> bool:
        return any_captured(assign_committees(pool, shard_ids, value, size, 4), sybils)

    for e in range(1, epochs + 1):
        scores = [(v, trackers[v].score().value) for v in pool]
        parts = weighted_select(scores, participants, prev)
        strategies = {p: LastRevealer(capture) for p in parts if p in sybils} if steer else {}
        try:
            prev = run_round(parts, strategies, beacon_rng, mode=AggMode.XOR, network=net,
                             round_id=e, trackers=trackers)
        except BeaconFailure:
            failures += 1
            prev = Randomness(prev.value + 1, round_id=e)
        committees = assign_committees(pool, shard_ids, prev, size, 4, e)
        for v in pool:
            trackers[v].participated(True)
        if any_captured(committees, sybils):
            captured += 1
    return SybilOutcome(epochs, captured, failures,
                        capture_probability(n, len(sybils), shards, size))


def preset_sybil(seed: int = 1, out_dir=None) -> PresetResult:
    out = sybil_takeover(seed)
    res = PresetResult("sybil")
    res.summary = {"epochs": out.epochs, "captured": out.captured, "fraction": out.fraction,
                   "analytic_uniform": out.analytic, "beacon_failures": out.beacon_failures}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    return res


PRESETS: dict[str, Callable[..., PresetResult]] = {
    "scaling": preset_scaling,
    "blocksize": preset_blocksize,
    "malicious": preset_malicious,
    "latency": preset_latency,
    "locking": preset_locking,
    "sybil": preset_sybil,
    "dos": preset_dos,
    "reconfig": preset_reconfig,
}


def run_preset(name: str, seed: int = 1, out_dir=None) -> PresetResult:
    try:
        fn = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None
    return fn(seed, out_dir)
