"""Key-space partitioning: range tables, node/transaction distribution, skew,
and the split/merge arithmetic used by epoch reconfiguration."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Hashable, Iterable, Sequence

from .core import KEY_BITS, DomainError, Transaction, hash_key


@dataclass(frozen=True, slots=True, order=True)
class Range:
    """Half-open key interval ``[lo, hi)``."""

    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DomainError(f"empty range [{self.lo}, {self.hi})")

    def __contains__(self, key: int) -> bool:
        return self.lo <= key < self.hi

    def unbounded(self, bits: int = KEY_BITS) -> bool:
        return self.hi == 1 << bits

    @property
    def width(self) -> int:
        return self.hi - self.lo


@dataclass(frozen=True)
class RangeTable:
    ranges: tuple[tuple[int, Range], ...]
    bits: int = KEY_BITS
    _los: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_los", tuple(r.lo for _, r in self.ranges))
        self.validate()

    def validate(self) -> None:
        if not self.ranges:
            raise DomainError("range table is empty")
        ids = [s for s, _ in self.ranges]
        if len(set(ids)) != len(ids):
            raise DomainError("duplicate shard id in range table")
        if self.ranges[0][1].lo != 0 or self.ranges[-1][1].hi != 1 << self.bits:
            raise DomainError("range table does not cover the key space")
        for (_, a), (_, b) in zip(self.ranges, self.ranges[1:]):
            if a.hi != b.lo:
                raise DomainError(f"ranges do not abut at {a.hi:#x}/{b.lo:#x}")

    @property
    def shards(self) -> list[int]:
        return [s for s, _ in self.ranges]

    def range_of(self, shard: int) -> Range:
        for s, r in self.ranges:
            if s == shard:
                return r
        raise KeyError(shard)

    def position(self, shard: int) -> int:
        return self.shards.index(shard)

    def rows(self) -> list[tuple[int, str, str]]:
        width = self.bits // 4
        return [(s, f"{r.lo:0{width}x}", f"{r.hi:0{width + 1}x}") for s, r in self.ranges]

    def split(self, shard: int, key: int, new_shard: int) -> "RangeTable":
        out = []
        for s, r in self.ranges:
            if s == shard:
                left, right = Range(r.lo, key), Range(key, r.hi)
                out += [(s, left), (new_shard, right)]
            else:
                out.append((s, r))
        return RangeTable(tuple(out), self.bits)

    def merge(self, a: int, b: int) -> "RangeTable":
        out = []
        ra, rb = self.range_of(a), self.range_of(b)
        merged = merge_ranges(ra, rb)
        for s, r in self.ranges:
            if s == a:
                out.append((a, merged))
            elif s != b:
                out.append((s, r))
        return RangeTable(tuple(out), self.bits)


def init_ranges(n_shards: int, bits: int = KEY_BITS) -> RangeTable:
    if n_shards < 1:
        raise DomainError("need at least one shard")
    space = 1 << bits
    q, rem = divmod(space, n_shards)
    ranges, lo = [], 0
    for i in range(n_shards):
        hi = lo + q + (1 if i < rem else 0)
        ranges.append((i, Range(lo, hi)))
        lo = hi
    return RangeTable(tuple(ranges), bits)


def find_shard(key: int, table: RangeTable) -> int:
    i = bisect.bisect_right(table._los, key) - 1
    if i < 0 or key >= 1 << table.bits:
        raise DomainError(f"key {key:#x} outside the key space")
    return table.ranges[i][0]


def account_shard(account: str, table: RangeTable) -> int:
    return find_shard(hash_key(account) >> (KEY_BITS - table.bits), table)


@dataclass
class ShardAssignment:
    node_map: dict[int, set[Hashable]]
    tx_map: dict[int, list[Transaction]]
    data_map: dict[int, list[Any]]


def distribute(nodes: Iterable[Hashable], txs: Sequence[Transaction],
               data: Sequence[Any], table: RangeTable) -> ShardAssignment:
    """Range-based distribution of nodes, transactions and paired data.

    Nodes land in the shard owning the hash of their id; each transaction and
    its paired data item land together in the shard owning the hash of the
    transaction.
    """
    if data and len(data) != len(txs):
        raise DomainError("data items must pair 1:1 with transactions")
    shift = KEY_BITS - table.bits
    out = ShardAssignment({s: set() for s in table.shards},
                          {s: [] for s in table.shards},
                          {s: [] for s in table.shards})
    for n in nodes:
        out.node_map[find_shard(hash_key(str(n)) >> shift, table)].add(n)
    queue = list(zip(txs, data)) if data else [(tx, None) for tx in txs]
    for tx, d in queue:
        sid = find_shard(hash_key(tx.encode()) >> shift, table)
        out.tx_map[sid].append(tx)
        if d is not None:
            out.data_map[sid].append(d)
    return out


def skew_ratio(row_counts: Sequence[int]) -> Fraction:
    if not row_counts:
        raise DomainError("skew of zero shards")
    total = sum(row_counts)
    if total <= 0:
        raise DomainError("skew ratio undefined for zero total rows")
    return Fraction(max(row_counts) * len(row_counts), total)


def split_range(rng: Range, occupied: Sequence[int]) -> tuple[Range, Range] | None:
    """Split at the load median of the occupied keys.

    ``occupied`` is a multiset: a key listed k times carries k units of load.
    The split key is the upper median element, so both halves keep load.
    Returns ``None`` when fewer than two occupied keys make a split meaningless.
    """
    keys = sorted(occupied)
    if len(keys) < 2:
        return None
    if keys[0] < rng.lo or keys[-1] >= rng.hi:
        raise DomainError("occupied key outside the range being split")
    k = keys[len(keys) // 2]
    if k == keys[0]:
        i = bisect.bisect_right(keys, k)
        if i == len(keys):
            return None
        k = keys[i]
    return Range(rng.lo, k), Range(k, rng.hi)


def merge_ranges(a: Range, b: Range) -> Range:
    if a.hi != b.lo:
        raise DomainError(f"ranges [{a.lo},{a.hi}) and [{b.lo},{b.hi}) are not adjacent")
    return Range(a.lo, b.hi)
