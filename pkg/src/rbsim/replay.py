"""Re-execute a trace's finalized blocks against plain account balances.

This is a second, independent executor: it knows nothing about shard state,
locks or Merkle trees, only the ledger effects each finalized entry implies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .core import InvariantViolation
from .sim import read_trace


@dataclass
class Replay:
    balances: dict[str, int] = field(default_factory=dict)
    burned: int = 0
    finalized: list[int] = field(default_factory=list)
    blocks: int = 0
    recorded: dict[str, int] | None = None
    recorded_burned: int | None = None
    genesis_total: int = 0

    def matches(self) -> bool:
        return self.recorded is not None and self.recorded == self.balances \
            and self.recorded_burned == self.burned


def replay_rows(rows: Iterable[tuple]) -> Replay:
    out = Replay()
    txs: dict[int, list] = {}
    recorded: dict[str, int] = {}
    recorded_burned = 0
    saw_final = False
    for _tick, _node, kind, _digest, detail in rows:
        if kind == "genesis":
            out.balances = dict(detail["balances"])
            out.genesis_total = sum(out.balances.values())
        elif kind == "block":
            out.blocks += 1
            shard = detail["s"]
            for tid, ok in detail["x"]:
                t = txs.get(tid)
                if t is None:
                    raise InvariantViolation(f"decision for unknown tx {tid}")
                _id, sender, receiver, amount, fee, src, dst = t
                if not ok:
                    continue
                if shard == src:
                    out.balances[sender] -= amount + fee
                    out.burned += fee
                else:
                    out.balances[receiver] += amount
                    out.finalized.append(tid)
            for t in detail["t"]:
                tid, sender, receiver, amount, fee, src, dst = t
                if src == dst:
                    out.balances[sender] -= amount + fee
                    out.balances[receiver] += amount
                    out.burned += fee
                    out.finalized.append(tid)
                else:
                    txs[tid] = t
        elif kind == "final":
            saw_final = True
            recorded.update(detail["balances"])
            recorded_burned += detail["burned"]
    for a, b in out.balances.items():
        if b < 0:
            raise InvariantViolation(f"replayed balance of {a} went negative")
    if saw_final:
        out.recorded, out.recorded_burned = recorded, recorded_burned
    return out


def replay_file(path) -> Replay:
    return replay_rows(read_trace(path))
