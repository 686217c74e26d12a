"""Transaction workloads: Poisson arrivals over a uniform or Zipf account population."""
from __future__ import annotations

import bisect
import itertools
import random
from dataclasses import dataclass

from .config import ScenarioConfig
from .core import hash_key
from .partitioning import RangeTable, account_shard


@dataclass(frozen=True, slots=True)
class TxRequest:
    """A client request; shard routing happens when it reaches the network."""

    id: int
    sender: str
    receiver: str
    amount: int
    fee: int
    at: int
    cross: bool


def account_names(n: int) -> list[str]:
    return [f"acct{i}" for i in range(n)]


def zipf_weights(n: int, s: float) -> list[float]:
    return [1.0 / (i + 1) ** s for i in range(n)] if s > 0 else [1.0] * n


class AccountSampler:
    """Draws accounts by weight, optionally restricted to one shard's accounts."""

    def __init__(self, accounts: list[str], weights: list[float], table: RangeTable):
        self.accounts = accounts
        self.weights = weights
        self.shard_of = {a: account_shard(a, table) for a in accounts}
        self.groups: dict[int, list[int]] = {s: [] for s in table.shards}
        for i, a in enumerate(accounts):
            self.groups[self.shard_of[a]].append(i)
        self.cum = list(itertools.accumulate(weights))
        self.group_cum = {s: list(itertools.accumulate(weights[i] for i in idx))
                          for s, idx in self.groups.items()}

    def draw(self, rng: random.Random) -> int:
        u = rng.random() * self.cum[-1]
        return min(bisect.bisect_right(self.cum, u), len(self.cum) - 1)

    def draw_in(self, rng: random.Random, shard: int) -> int | None:
        cum = self.group_cum[shard]
        if not cum:
            return None
        u = rng.random() * cum[-1]
        return self.groups[shard][min(bisect.bisect_right(cum, u), len(cum) - 1)]

    def draw_outside(self, rng: random.Random, shard: int) -> int | None:
        others = [s for s in sorted(self.groups) if s != shard and self.group_cum[s]]
        if not others:
            return None
        totals = list(itertools.accumulate(self.group_cum[s][-1] for s in others))
        u = rng.random() * totals[-1]
        s = others[min(bisect.bisect_right(totals, u), len(others) - 1)]
        return self.draw_in(rng, s)


def generate_workload(config: ScenarioConfig, rng: random.Random, table: RangeTable,
                      start_id: int = 0) -> list[TxRequest]:
    """Poisson arrivals at ``tx_rate`` per tick over ``[0, duration)``.

    Senders follow the configured popularity law, ranked by account index
    or, with ``hot_range``, by key so that popular accounts cluster. A transfer is cross-shard
    with probability ``cross_fraction`` (measured against the genesis table);
    its receiver is then drawn from the other shards, otherwise from the
    sender's shard.
    """
    if config.tx_rate <= 0:
        return []
    accounts = account_names(config.n_accounts)
    weights = zipf_weights(len(accounts), config.zipf)
    if config.hot_range:
        # popularity follows key order, so the hot accounts share a key range
        by_key = sorted(range(len(accounts)), key=lambda i: hash_key(accounts[i]))
        ranked = [0.0] * len(accounts)
        for rank, i in enumerate(by_key):
            ranked[i] = weights[rank]
        weights = ranked
    sampler = AccountSampler(accounts, weights, table)
    out = []
    t = 0.0
    next_id = start_id
    while True:
        t += rng.expovariate(config.tx_rate)
        if t >= config.duration:
            break
        si = sampler.draw(rng)
        sender = accounts[si]
        home = sampler.shard_of[sender]
        cross = rng.random() < config.cross_fraction
        ri = None
        for _ in range(8):
            ri = sampler.draw_outside(rng, home) if cross else sampler.draw_in(rng, home)
            if ri != si:
                break
        if ri is None or ri == si:
            continue
        amount = rng.randint(1, config.amount_max)
        fee = rng.randint(0, config.fee_max)
        out.append(TxRequest(next_id, sender, accounts[ri], amount, fee, int(t), cross))
        next_id += 1
    return out
