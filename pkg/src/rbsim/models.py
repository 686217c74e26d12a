"""Closed-form analytic models, evaluated exactly where the formula allows.

These are reporting models: nothing in the simulator reads them. Rational
formulas return ``Fraction`` values; formulas with an exponential return
``float``.
"""
from __future__ import annotations

import math
from fractions import Fraction
from numbers import Real
from typing import Callable, Mapping


class ModelDomainError(ValueError):
    """A parameter lies outside a model's domain; ``param`` names it."""

    def __init__(self, model: str, param: str, message: str):
        super().__init__(f"{model}: {param} {message}")
        self.model = model
        self.param = param


def _q(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**15) if not x.is_integer() else Fraction(int(x))
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x)


def _positive(model: str, params: Mapping[str, Real], *names: str) -> None:
    for n in names:
        if params[n] <= 0:
            raise ModelDomainError(model, n, f"must be positive, got {params[n]}")


def _nonneg(model: str, params: Mapping[str, Real], *names: str) -> None:
    for n in names:
        if params[n] < 0:
            raise ModelDomainError(model, n, f"must be non-negative, got {params[n]}")


def honest_quorum_prob(n_h, N, k) -> Fraction:
    """P = 1 - (n_h / N)^k."""
    p = {"n_h": _q(n_h), "N": _q(N), "k": int(k)}
    _positive("HonestQuorumProb", p, "N")
    _nonneg("HonestQuorumProb", p, "n_h", "k")
    if p["n_h"] > p["N"]:
        raise ModelDomainError("HonestQuorumProb", "n_h", "exceeds N")
    return 1 - (p["n_h"] / p["N"]) ** p["k"]


def sharded_throughput(n_s, t_s) -> Fraction:
    """T = n_s * t_s."""
    p = {"n_s": _q(n_s), "t_s": _q(t_s)}
    _nonneg("ShardedThroughput", p, "n_s", "t_s")
    return p["n_s"] * p["t_s"]


def block_throughput_literal(B, t_avg, t_block) -> Fraction:
    """T = B * t_avg / t_block, taken literally."""
    p = {"B": _q(B), "t_avg": _q(t_avg), "t_block": _q(t_block)}
    _positive("BlockThroughputLiteral", p, "t_block")
    _nonneg("BlockThroughputLiteral", p, "B", "t_avg")
    return p["B"] * p["t_avg"] / p["t_block"]


def block_throughput_consistent(B, t_avg, t_block) -> Fraction:
    """T = B / (t_avg * t_block): transactions per unit time for a block of
    B bytes holding transactions of t_avg bytes each."""
    p = {"B": _q(B), "t_avg": _q(t_avg), "t_block": _q(t_block)}
    _positive("BlockThroughputConsistent", p, "t_avg", "t_block")
    _nonneg("BlockThroughputConsistent", p, "B")
    return p["B"] / (p["t_avg"] * p["t_block"])


def malicious_throughput(T_ideal, f, N) -> Fraction:
    """T = T_ideal * (1 - f / N)."""
    p = {"T_ideal": _q(T_ideal), "f": _q(f), "N": _q(N)}
    _positive("MaliciousThroughput", p, "N")
    _nonneg("MaliciousThroughput", p, "T_ideal", "f")
    if p["f"] > p["N"]:
        raise ModelDomainError("MaliciousThroughput", "f", "exceeds N")
    return p["T_ideal"] * (1 - p["f"] / p["N"])


def net_latency(T_process, T_comm, N_shards) -> Fraction:
    """L = (T_process + T_comm) / N_shards."""
    p = {"T_process": _q(T_process), "T_comm": _q(T_comm), "N_shards": _q(N_shards)}
    _positive("NetLatency", p, "N_shards")
    _nonneg("NetLatency", p, "T_process", "T_comm")
    return (p["T_process"] + p["T_comm"]) / p["N_shards"]


def committee_latency(N_nodes, C_range, delta_comm) -> Fraction:
    """L = N_nodes / C_range + delta_comm."""
    p = {"N_nodes": _q(N_nodes), "C_range": _q(C_range), "delta_comm": _q(delta_comm)}
    _positive("CommitteeLatency", p, "C_range")
    _nonneg("CommitteeLatency", p, "N_nodes", "delta_comm")
    return p["N_nodes"] / p["C_range"] + p["delta_comm"]


def adversary_takeover(f, n, s) -> float:
    """P = (f * n / s) * e^(-n)."""
    p = {"f": _q(f), "n": _q(n), "s": _q(s)}
    _positive("AdversaryTakeover", p, "s")
    _nonneg("AdversaryTakeover", p, "n")
    if not 0 <= p["f"] <= 1:
        raise ModelDomainError("AdversaryTakeover", "f", "must lie in [0, 1]")
    return float(p["f"] * p["n"] / p["s"]) * math.exp(-float(p["n"]))


def fault_prob(m, t) -> Fraction:
    """P = m / t, defined for m <= (t - 1) / 3."""
    p = {"m": _q(m), "t": _q(t)}
    _positive("FaultProb", p, "t")
    _nonneg("FaultProb", p, "m")
    if 3 * p["m"] > p["t"] - 1:
        raise ModelDomainError("FaultProb", "m", f"exceeds (t - 1) / 3 for t = {p['t']}")
    return p["m"] / p["t"]


def lock_overhead(T_cross, L_account, T_intra) -> Fraction:
    """O = T_cross * L_account / T_intra."""
    p = {"T_cross": _q(T_cross), "L_account": _q(L_account), "T_intra": _q(T_intra)}
    _positive("LockOverhead", p, "T_intra")
    _nonneg("LockOverhead", p, "T_cross", "L_account")
    return p["T_cross"] * p["L_account"] / p["T_intra"]


def dos_prob(T_attack, T_threshold, M_malicious, N) -> float:
    """P = (1 - e^(-T_attack / T_threshold)) * M_malicious / N."""
    p = {"T_attack": _q(T_attack), "T_threshold": _q(T_threshold),
         "M_malicious": _q(M_malicious), "N": _q(N)}
    _positive("DoSProb", p, "T_threshold", "N")
    _nonneg("DoSProb", p, "T_attack", "M_malicious")
    if p["M_malicious"] > p["N"]:
        raise ModelDomainError("DoSProb", "M_malicious", "exceeds N")
    ratio = float(p["T_attack"] / p["T_threshold"])
    return -math.expm1(-ratio) * float(p["M_malicious"] / p["N"])


MODELS: dict[str, Callable] = {
    "HonestQuorumProb": honest_quorum_prob,
    "ShardedThroughput": sharded_throughput,
    "BlockThroughputLiteral": block_throughput_literal,
    "BlockThroughputConsistent": block_throughput_consistent,
    "MaliciousThroughput": malicious_throughput,
    "NetLatency": net_latency,
    "CommitteeLatency": committee_latency,
    "AdversaryTakeover": adversary_takeover,
    "FaultProb": fault_prob,
    "LockOverhead": lock_overhead,
    "DoSProb": dos_prob,
}


def evaluate_model(name: str, params: Mapping[str, object] | None = None, **kw):
    fn = MODELS.get(name)
    if fn is None:
        raise KeyError(f"unknown model {name!r}; known: {', '.join(sorted(MODELS))}")
    args = dict(params or {}, **kw)
    try:
        return fn(**args)
    except TypeError as e:
        raise ModelDomainError(name, "params", str(e)) from None


def parse_params(text: str) -> dict[str, Fraction]:
    """``"a=1,b=0.5"`` to exact values."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        k, sep, v = part.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {part!r}")
        try:
            out[k.strip()] = Fraction(v.strip())
        except ValueError:
            raise ValueError(f"{k.strip()}: not a number: {v.strip()!r}") from None
    return out
