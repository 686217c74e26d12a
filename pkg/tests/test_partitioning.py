from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rbsim.core import KEY_BITS, DomainError, make_tx
from rbsim.partitioning import (
    Range,
    RangeTable,
    distribute,
    find_shard,
    init_ranges,
    merge_ranges,
    skew_ratio,
    split_range,
)

BITS = 16


def _linear(key, table):
    return next(s for s, r in table.ranges if r.lo <= key < r.hi)


@given(st.integers(1, 40), st.integers(0, (1 << BITS) - 1))
def test_find_shard_matches_linear_scan(n, key):
    table = init_ranges(n, BITS)
    assert find_shard(key, table) == _linear(key, table)


@given(st.integers(1, 64))
def test_init_ranges_cover_and_balance(n):
    table = init_ranges(n, BITS)
    widths = [r.width for _, r in table.ranges]
    assert sum(widths) == 1 << BITS
    assert max(widths) - min(widths) <= 1


def test_full_key_space_default():
    table = init_ranges(3)
    assert table.ranges[-1][1].hi == 1 << KEY_BITS
    assert find_shard((1 << KEY_BITS) - 1, table) == 2
    with pytest.raises(DomainError):
        find_shard(1 << KEY_BITS, table)


def test_table_rejects_gaps_and_duplicates():
    with pytest.raises(DomainError):
        RangeTable(((0, Range(0, 10)), (1, Range(11, 1 << BITS))), BITS)
    with pytest.raises(DomainError):
        RangeTable(((0, Range(0, 10)), (0, Range(10, 1 << BITS))), BITS)
    with pytest.raises(DomainError):
        Range(5, 5)


@given(st.integers(2, 10), st.data())
def test_split_then_merge_restores_table(n, data):
    table = init_ranges(n, BITS)
    shard = data.draw(st.sampled_from(table.shards))
    r = table.range_of(shard)
    key = data.draw(st.integers(r.lo + 1, r.hi - 1))
    split = table.split(shard, key, 99)
    assert len(split.ranges) == n + 1
    assert split.merge(shard, 99) == table


def test_skew_ratio_exact():
    assert skew_ratio([10, 10, 10]) == 1
    assert skew_ratio([30, 0, 0]) == 3
    assert skew_ratio([4, 2]) == Fraction(4, 3)
    with pytest.raises(DomainError):
        skew_ratio([0, 0])


@given(st.lists(st.integers(100, 199), min_size=2, max_size=60))
def test_split_range_keeps_load_on_both_sides(keys):
    out = split_range(Range(100, 200), keys)
    if len(set(keys)) < 2:
        assert out is None
        return
    left, right = out
    assert left.hi == right.lo and left.lo == 100 and right.hi == 200
    assert any(k in left for k in keys) and any(k in right for k in keys)


def test_merge_ranges_requires_adjacency():
    assert merge_ranges(Range(0, 5), Range(5, 9)) == Range(0, 9)
    with pytest.raises(DomainError):
        merge_ranges(Range(0, 5), Range(6, 9))


def test_distribute_places_every_item_once():
    table = init_ranges(4)
    txs = [make_tx(i, f"a{i}", f"b{i}", 1, 0, 0, 0) for i in range(50)]
    data = [f"d{i}" for i in range(50)]
    out = distribute(range(20), txs, data, table)
    assert sum(len(v) for v in out.node_map.values()) == 20
    assert sorted(t.id for v in out.tx_map.values() for t in v) == list(range(50))
    for s in table.shards:
        assert [f"d{t.id}" for t in out.tx_map[s]] == out.data_map[s]
