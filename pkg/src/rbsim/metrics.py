"""Measured metrics for one run, with the analytic models alongside, and
their stable on-disk forms."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .engine import RunResult
from .models import (
    ModelDomainError,
    adversary_takeover,
    block_throughput_consistent,
    block_throughput_literal,
    dos_prob,
    honest_quorum_prob,
    lock_overhead,
    malicious_throughput,
    sharded_throughput,
)

SCHEMA = "rbsim-report/1"
SERIES_BUCKET = 100


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; 0.0 for an empty sample."""
    if not values:
        return 0.0
    xs = sorted(values)
    k = max(1, math.ceil(q / 100 * len(xs)))
    return float(xs[k - 1])


def _stats(values: Sequence[float]) -> dict[str, float]:
    return {
        "n": len(values),
        "mean": sum(values) / len(values) if values else 0.0,
        "p50": percentile(values, 50),
        "p99": percentile(values, 99),
    }


def _num(x) -> float:
    return float(x) if isinstance(x, Fraction) else x


@dataclass
class MetricsReport:
    label: str
    seed: int
    trace_digest: str
    trace_rows: int
    duration: int
    end_tick: int
    ticks_per_second: int
    n_nodes: int
    n_shards_final: int
    submitted: int
    finalized: int
    finalized_intra: int
    finalized_cross: int
    finalized_in_window: int
    aborted: dict[str, int]
    abort_rate: float
    throughput_tick: float
    throughput_s: float
    latency: dict[str, dict[str, float]]
    lock_wait: dict[str, float]
    rounds_per_block: float
    blocks: int
    messages: dict[str, int]
    escalations: int
    faults: int
    rate_limited: int
    spam_finalized: int
    epochs: list[dict]
    conserved: bool
    live_locks: int
    quiescent: bool
    models: dict[str, float | None]
    series: list[tuple[int, int, str]] = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("series")
        return d


def _model(fn, *args):
    try:
        return _num(fn(*args))
    except ModelDomainError:
        return None


def analytic_models(res: RunResult) -> dict[str, float | None]:
    cfg = res.config
    n_s = cfg.n_shards
    per_block = (cfg.block_limit - cfg.header_bytes) // cfg.tx_bytes
    # a shard cannot finalize blocks faster than one per block interval
    t_s = Fraction(per_block, cfg.t_block)
    malicious = round(cfg.malicious_fraction * cfg.n_nodes)
    honest = cfg.n_nodes - malicious
    cross = sum(1 for r in res.records.values() if r.kind == "cross" and not r.spam)
    intra = sum(1 for r in res.records.values() if r.kind == "intra" and not r.spam)
    locked_accounts = 2 if cfg.locking == "fine" else 2 * cfg.n_accounts / cfg.n_shards
    out = {
        "ShardedThroughput": _model(sharded_throughput, n_s, t_s),
        "MaliciousThroughput": _model(malicious_throughput, sharded_throughput(n_s, t_s),
                                      malicious, cfg.n_nodes),
        "BlockThroughputLiteral": _model(block_throughput_literal, cfg.block_limit - cfg.header_bytes,
                                       cfg.tx_bytes, cfg.t_block),
        "BlockThroughputConsistent": _model(block_throughput_consistent,
                                            cfg.block_limit - cfg.header_bytes, cfg.tx_bytes,
                                            cfg.t_block),
        "HonestQuorumProb": _model(honest_quorum_prob, honest, cfg.n_nodes, cfg.committee),
        "AdversaryTakeover": _model(adversary_takeover,
                                    Fraction(malicious, cfg.n_nodes), cfg.n_nodes, n_s),
        "LockOverhead": _model(lock_overhead, cross, Fraction(locked_accounts), intra),
        "DoSProb": (_model(dos_prob, cfg.duration, cfg.rl_penalty, 1, cfg.n_nodes)
                    if cfg.dos_rate > 0 else None),
    }
    return out


def build_report(res: RunResult, label: str = "") -> MetricsReport:
    cfg = res.config
    recs = [r for r in res.records.values() if not r.spam]
    done = [r for r in recs if r.final_at is not None]
    lat = {
        "all": [r.final_at - r.submitted for r in done],
        "intra": [r.final_at - r.submitted for r in done if r.kind == "intra"],
        "cross": [r.final_at - r.submitted for r in done if r.kind == "cross"],
    }
    waits = [r.locked_at - r.submitted for r in recs if r.locked_at is not None]
    in_window = [r for r in done if r.final_at < cfg.duration]
    aborted = Counter(r.aborted for r in recs if r.aborted)
    tput = len(in_window) / cfg.duration if cfg.duration else 0.0
    buckets = Counter(r.final_at // SERIES_BUCKET for r in done)
    series = [(b * SERIES_BUCKET, buckets[b], "finalized") for b in sorted(buckets)]
    ms = 1000 / cfg.ticks_per_second
    latency = {}
    for k, v in lat.items():
        st = _stats(v)
        latency[k] = st
        latency[k + "_ms"] = {key: (val * ms if key != "n" else val) for key, val in st.items()}
    return MetricsReport(
        label=label, seed=cfg.seed, trace_digest=res.trace.digest(),
        trace_rows=res.trace.count, duration=cfg.duration, end_tick=res.end_tick,
        ticks_per_second=cfg.ticks_per_second, n_nodes=cfg.n_nodes,
        n_shards_final=len(res.shards), submitted=len(recs), finalized=len(done),
        finalized_intra=len(lat["intra"]), finalized_cross=len(lat["cross"]),
        finalized_in_window=len(in_window),
        aborted=dict(sorted(aborted.items())),
        abort_rate=sum(aborted.values()) / len(recs) if recs else 0.0,
        throughput_tick=tput, throughput_s=tput * cfg.ticks_per_second,
        latency=latency, lock_wait=_stats(waits),
        rounds_per_block=(sum(r + 1 for r in res.rounds) / len(res.rounds)) if res.rounds else 0.0,
        blocks=res.blocks, messages=res.messages, escalations=res.escalations,
        faults=res.faults, rate_limited=res.rate_limited,
        spam_finalized=sum(1 for r in res.records.values() if r.spam and r.final_at is not None),
        epochs=res.epochs, conserved=res.total_value() == res.genesis_total,
        live_locks=res.live_locks(), quiescent=res.quiescent,
        models=analytic_models(res), series=series,
    )


# -- emission ------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def rows_text(reports: Iterable[MetricsReport]) -> str:
    """One JSON record per line: a header, then a summary and series rows per run."""
    lines = [_dumps({"kind": "header", "schema": SCHEMA,
                     "series_fields": ["label", "x", "y", "series"]})]
    for rep in reports:
        lines.append(_dumps({"kind": "summary", **rep.row()}))
        for x, y, name in rep.series:
            lines.append(_dumps({"kind": "series", "label": rep.label, "x": x, "y": y,
                                 "series": name}))
    return "\n".join(lines) + "\n"


def series_text(reports: Iterable[MetricsReport]) -> str:
    lines = ["label\tx\ty\tseries"]
    for rep in reports:
        lines += [f"{rep.label}\t{x}\t{y}\t{name}" for x, y, name in rep.series]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def table_text(reports: Iterable[MetricsReport]) -> str:
    cols = [("label", lambda r: r.label or "-"),
            ("seed", lambda r: r.seed),
            ("finalized", lambda r: r.finalized),
            ("tx/tick", lambda r: r.throughput_tick),
            ("tx/s", lambda r: r.throughput_s),
            ("p50", lambda r: r.latency["all"]["p50"]),
            ("p99", lambda r: r.latency["all"]["p99"]),
            ("x-p50", lambda r: r.latency["cross"]["p50"]),
            ("aborts", lambda r: sum(r.aborted.values())),
            ("rounds/blk", lambda r: r.rounds_per_block),
            ("conserved", lambda r: r.conserved)]
    rows = [[name for name, _ in cols]]
    for rep in reports:
        rows.append([_fmt(fn(rep)) for _, fn in cols])
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n"
                   for r in rows)


FORMATS = {"rows": ("report.jsonl", rows_text), "table": ("report.txt", table_text),
           "plot": ("series.tsv", series_text)}


def report_emit(reports: MetricsReport | Sequence[MetricsReport], out_dir,
                formats: Sequence[str] = ("rows", "table", "plot")) -> list[Path]:
    if isinstance(reports, MetricsReport):
        reports = [reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        name, render = FORMATS[fmt]
        path = out / name
        path.write_text(render(reports))
        written.append(path)
    return written
