"""Epoch transitions: workload measurement, split/merge planning, state
migration and committee rotation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .consensus import ConfigError, ValidatorSet
from .core import (
    KEY_BITS,
    InvariantViolation,
    ShardState,
    Transaction,
    TxKind,
    hash_key,
)
from .partitioning import Range, RangeTable, find_shard, skew_ratio, split_range
from .randomness import assign_committees

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpochConfig:
    length: int = 0
    w_hi: float | None = None       # None: 2x the mean workload of the epoch
    w_lo: float | None = None       # None: 0.25x the mean workload
    v_min: int = 4
    committee_size: int = 0         # 0: spread the node pool evenly
    single_validator: bool = False

    def __post_init__(self):
        if self.v_min < 4 and not self.single_validator:
            raise ConfigError("v_min below 4 needs single_validator test mode")
        if self.w_hi is not None and self.w_lo is not None and not self.w_lo < self.w_hi:
            raise ConfigError("w_lo must be below w_hi")

    def thresholds(self, workloads: Mapping[int, float]) -> tuple[float, float]:
        mean = sum(workloads.values()) / len(workloads) if workloads else 0.0
        hi = self.w_hi if self.w_hi is not None else 2 * mean
        lo = self.w_lo if self.w_lo is not None else 0.25 * mean
        return hi, lo


@dataclass(frozen=True)
class Split:
    shard: int
    key: int


@dataclass(frozen=True)
class Merge:
    a: int
    b: int


@dataclass(frozen=True)
class Rotate:
    shard: int
    validators: ValidatorSet


@dataclass
class ReconfigPlan:
    actions: list = field(default_factory=list)

    @property
    def splits(self) -> list[Split]:
        return [a for a in self.actions if isinstance(a, Split)]

    @property
    def merges(self) -> list[Merge]:
        return [a for a in self.actions if isinstance(a, Merge)]

    def describe(self) -> list[str]:
        out = []
        for a in self.actions:
            if isinstance(a, Split):
                out.append(f"split {a.shard} at {a.key:#x}")
            elif isinstance(a, Merge):
                out.append(f"merge {a.a}+{a.b}")
            else:
                out.append(f"rotate {a.shard}")
        return out


def tx_cost(tx: Transaction) -> int:
    return 1 if tx.kind is TxKind.INTRA else 2


def shard_workload(txs: Iterable[Transaction], cost: Callable[[Transaction], float] = tx_cost
                   ) -> float:
    """W = sum of per-transaction costs; a cross-shard tx listed once per leg."""
    return sum(cost(t) for t in txs)


def plan_reconfiguration(workloads: Mapping[int, float], table: RangeTable, config: EpochConfig,
                         histograms: Mapping[int, Sequence[int]] | None = None,
                         max_shards: int | None = None) -> ReconfigPlan:
    """Split overloaded shards at their load median; merge cold adjacent pairs.

    Merges are greedy left to right over adjacent pairs, each shard used at
    most once and never one that is also being split.
    """
    histograms = histograms or {}
    hi, lo = config.thresholds(workloads)
    plan = ReconfigPlan()
    split_set: set[int] = set()
    n_after = len(table.shards)
    for s in table.shards:
        if workloads.get(s, 0) <= hi:
            continue
        if max_shards is not None and n_after >= max_shards:
            log.warning("shard %s overloaded but the node pool cannot staff another shard", s)
            continue
        halves = split_range(table.range_of(s), histograms.get(s, ()))
        if halves is None:
            log.warning("shard %s overloaded but has fewer than two occupied keys", s)
            continue
        plan.actions.append(Split(s, halves[1].lo))
        split_set.add(s)
        n_after += 1
    used = set(split_set)
    order = table.shards
    for a, b in zip(order, order[1:]):
        if a in used or b in used:
            continue
        wa, wb = workloads.get(a, 0), workloads.get(b, 0)
        if wa < lo and wb < lo and wa + wb < hi:
            plan.actions.append(Merge(a, b))
            used |= {a, b}
    return plan


@dataclass
class NetworkState:
    epoch: int
    table: RangeTable
    shards: dict[int, ShardState]
    committees: dict[int, ValidatorSet]
    pool: tuple[int, ...]

    def total(self) -> int:
        return sum(s.total() + s.burned + s.transfer_out - s.transfer_in
                   for s in self.shards.values())

    def balances(self) -> dict[str, int]:
        out = {}
        for s in sorted(self.shards):
            out.update(self.shards[s].balances)
        return out


def default_key(table: RangeTable) -> Callable[[str], int]:
    shift = KEY_BITS - table.bits
    return lambda account: hash_key(account) >> shift


def _fresh_state(shard: int, rng: Range, balances: dict[str, int],
                 counters: Sequence[ShardState]) -> ShardState:
    st = ShardState(shard, rng, balances)
    st.burned = sum(c.burned for c in counters)
    st.transfer_out = sum(c.transfer_out for c in counters)
    st.transfer_in = sum(c.transfer_in for c in counters)
    return st


def committee_size_for(n_nodes: int, n_shards: int, config: EpochConfig) -> int:
    size = config.committee_size or n_nodes // n_shards
    if max(size, config.v_min) * n_shards > n_nodes:
        raise ConfigError(f"{n_nodes} nodes cannot staff {n_shards} shards of "
                          f"{max(size, config.v_min)}")
    return size


def transition_epoch(net: NetworkState, plan: ReconfigPlan, seed, config: EpochConfig,
                     key_of: Callable[[str], int] | None = None) -> tuple[NetworkState,
                                                                         ReconfigPlan]:
    """Apply splits and merges, migrate balances, rotate every committee.

    Requires quiescence: no shard may hold locks or unsettled transfers.
    Returns the new state and the applied plan, rotations included.
    """
    for s, st in net.shards.items():
        if st.lock_table or any(o.status == "locked" for o in st.outgoing.values()) \
                or any(i.status == "staged" for i in st.incoming.values()):
            raise InvariantViolation(f"shard {s} not quiescent at epoch transition")
    key_of = key_of or default_key(net.table)
    before = net.total()
    table = net.table
    shards = dict(net.shards)
    next_id = max(table.shards) + 1
    applied = ReconfigPlan()
    for act in plan.actions:
        if isinstance(act, Split):
            old = shards.pop(act.shard)
            table = table.split(act.shard, act.key, next_id)
            left = {a: b for a, b in old.balances.items() if key_of(a) < act.key}
            right = {a: b for a, b in old.balances.items() if key_of(a) >= act.key}
            shards[act.shard] = _fresh_state(act.shard, table.range_of(act.shard), left, [old])
            shards[next_id] = _fresh_state(next_id, table.range_of(next_id), right, [])
            applied.actions.append(act)
            next_id += 1
        elif isinstance(act, Merge):
            sa, sb = shards.pop(act.a), shards.pop(act.b)
            table = table.merge(act.a, act.b)
            shards[act.a] = _fresh_state(act.a, table.range_of(act.a),
                                         {**sa.balances, **sb.balances}, [sa, sb])
            applied.actions.append(act)
    for s, st in shards.items():
        rng = table.range_of(s)
        st.range = rng
        for a in st.accounts:
            k = key_of(a)
            if k not in rng or find_shard(k, table) != s:
                raise InvariantViolation(f"account {a!r} migrated outside shard {s}")
    n_shards = len(table.shards)
    size = committee_size_for(len(net.pool), n_shards, config)
    committees = assign_committees(net.pool, table.shards, seed, size, config.v_min,
                                   net.epoch + 1)
    for s in table.shards:
        applied.actions.append(Rotate(s, committees[s]))
    new = NetworkState(net.epoch + 1, table, {s: shards[s] for s in table.shards},
                       committees, net.pool)
    if new.total() != before:
        raise InvariantViolation("value not conserved across reconfiguration")
    return new, applied


def measure_skew(counts: Mapping[int, float]) -> float:
    vals = [counts[s] for s in sorted(counts)]
    return float(skew_ratio([int(round(v)) for v in vals]))


def rebucket(histogram: Iterable[int], table: RangeTable) -> dict[int, int]:
    out = {s: 0 for s in table.shards}
    for k in histogram:
        out[find_shard(k, table)] += 1
    return out
