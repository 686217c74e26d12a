"""Commit-reveal randomness beacon and beacon-driven committee rotation."""
from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .consensus import ConfigError, ReputationTracker, ValidatorSet
from .core import DOMAIN_COMMIT, DomainError, Prf, enc_int, sha256d
from .sim import NetworkModel, Simulator

VALUE_BITS = 64
NONCE_BITS = 128


class AggMode(enum.Enum):
    XOR = "xor"
    AVERAGE = "average"


class RoundPhase(enum.Enum):
    COMMITTING = "committing"
    REVEALING = "revealing"
    COMPLETE = "complete"


class BeaconFailure(RuntimeError):
    """No participant produced a valid reveal; the round must be retried."""


def commit(value: int, nonce: int) -> bytes:
    if not 0 <= value < 1 << VALUE_BITS or not 0 <= nonce < 1 << NONCE_BITS:
        raise DomainError("value or nonce out of range")
    return sha256d(DOMAIN_COMMIT, enc_int(value, 8) + enc_int(nonce, 16))


def verify_reveal(commitment: bytes, value: int, nonce: int) -> bool:
    try:
        return commit(value, nonce) == commitment
    except DomainError:
        return False


def aggregate(values: Sequence[int], mode: AggMode = AggMode.XOR) -> int:
    if not values:
        raise DomainError("aggregate over zero contributors")
    if mode is AggMode.XOR:
        out = 0
        for v in values:
            out ^= v
        return out
    return sum(values) // len(values)


@dataclass(frozen=True)
class Randomness:
    value: int
    contributors: tuple[int, ...] = ()
    excluded: tuple[int, ...] = ()
    round_id: int = 0

    @staticmethod
    def from_seed(seed: int) -> "Randomness":
        """A genesis value that did not come out of a beacon round."""
        h = hashlib.sha256(b"genesis" + enc_int(seed & (2**64 - 1), 8)).digest()
        return Randomness(int.from_bytes(h[:8], "big"))


@dataclass
class CommitRevealRound:
    round_id: int
    mode: AggMode = AggMode.XOR
    commitments: dict[int, bytes] = field(default_factory=dict)
    reveals: dict[int, tuple[int, int]] = field(default_factory=dict)
    phase: RoundPhase = RoundPhase.COMMITTING
    rejected: list[int] = field(default_factory=list)

    def add_commit(self, pid: int, c: bytes) -> bool:
        if self.phase is not RoundPhase.COMMITTING or pid in self.commitments:
            return False
        self.commitments[pid] = c
        return True

    def open_reveals(self) -> None:
        if self.phase is not RoundPhase.COMMITTING:
            raise DomainError(f"cannot open reveals from {self.phase.value}")
        self.phase = RoundPhase.REVEALING

    def add_reveal(self, pid: int, value: int, nonce: int) -> bool:
        if self.phase is not RoundPhase.REVEALING or pid in self.reveals:
            return False
        c = self.commitments.get(pid)
        if c is None or not verify_reveal(c, value, nonce):
            self.rejected.append(pid)
            return False
        self.reveals[pid] = (value, nonce)
        return True

    def complete(self) -> Randomness:
        if self.phase is not RoundPhase.REVEALING:
            raise DomainError(f"cannot complete from {self.phase.value}")
        self.phase = RoundPhase.COMPLETE
        contributors = tuple(sorted(self.reveals))
        excluded = tuple(sorted(set(self.commitments) - set(self.reveals)))
        if not contributors:
            raise BeaconFailure(f"round {self.round_id}: no valid reveals")
        value = aggregate([self.reveals[p][0] for p in contributors], self.mode)
        return Randomness(value, contributors, excluded, self.round_id)


# -- participant strategies --------------------------------------------------

class Honest:
    def reveal(self, own: int, seen: Mapping[int, int], mode: AggMode) -> bool:
        return True


class Withhold:
    def reveal(self, own: int, seen: Mapping[int, int], mode: AggMode) -> bool:
        return False


@dataclass
class LastRevealer:
    """Waits for every other reveal, then reveals only if that lands the
    output inside ``target``."""

    target: Callable[[int], bool]

    def reveal(self, own: int, seen: Mapping[int, int], mode: AggMode) -> bool:
        others = [seen[p] for p in sorted(seen)]
        if not others:
            return True
        return self.target(aggregate(others + [own], mode))

    waits = True


HONEST = Honest()


def run_round(participants: Iterable[int], strategies: Mapping[int, object] | None = None,
              rng: random.Random | None = None, *, mode: AggMode = AggMode.XOR,
              network: NetworkModel | None = None, round_id: int = 0,
              trackers: Mapping[int, ReputationTracker] | None = None,
              transcript: list | None = None) -> Randomness:
    """Run one commit and one reveal phase over the simulated network.

    Participants send commitments and reveals to a collector. Each phase lasts
    twice the network's latency bound; anything arriving later counts as
    withheld. Non-revealers are left out of the aggregate and, when
    ``trackers`` is given, lose trust.
    """
    pids = sorted(set(participants))
    if not pids:
        raise DomainError("beacon round without participants")
    strategies = strategies or {}
    rng = rng or random.Random(0)
    net = network or NetworkModel()
    bound = net.latency.bound
    phase_len = 2 * bound
    rnd = CommitRevealRound(round_id, mode)
    secrets = {p: (rng.getrandbits(VALUE_BITS), rng.getrandbits(NONCE_BITS)) for p in pids}
    sim = Simulator()
    collector = "beacon"
    commit_end = phase_len
    reveal_end = commit_end + phase_len
    seen: dict[int, int] = {}

    for p in pids:
        sim.schedule(net.latency.sample(rng), collector, ("commit", p))
    sim.schedule(commit_end, collector, ("open",))
    sim.schedule(reveal_end, collector, ("close",))

    def handler(now, target, payload):
        kind = payload[0]
        if kind == "commit":
            p = payload[1]
            if now <= commit_end:
                rnd.add_commit(p, commit(*secrets[p]))
        elif kind == "open":
            rnd.open_reveals()
            for p in sorted(rnd.commitments):
                strat = strategies.get(p, HONEST)
                if getattr(strat, "waits", False):
                    sim.schedule(now + bound, p, ("wait",))
                else:
                    sim.schedule(now, p, ("decide",))
        elif kind == "wait":
            # re-queue so every reveal landing on this tick is seen first
            sim.schedule(now, target, ("decide",))
        elif kind == "decide":
            p = target
            strat = strategies.get(p, HONEST)
            if strat.reveal(secrets[p][0], dict(seen), mode):
                sim.schedule(now + net.latency.sample(rng), collector, ("reveal", p))
        elif kind == "reveal":
            p = payload[1]
            if now <= reveal_end and rnd.add_reveal(p, *secrets[p]):
                seen[p] = secrets[p][0]
        elif kind == "close":
            pass

    sim.run(handler)
    result = rnd.complete()
    if trackers is not None:
        for p in result.excluded:
            t = trackers.get(p)
            if t is not None:
                t.penalty = min(1.0, t.penalty + ReputationTracker.REVEAL_PENALTY)
    if transcript is not None:
        transcript.append({
            "round": round_id,
            "commitments": {str(p): rnd.commitments[p].hex() for p in sorted(rnd.commitments)},
            "contributors": list(result.contributors),
            "excluded": list(result.excluded),
            "value": result.value,
        })
    return result


# -- committee rotation ------------------------------------------------------

def _beacon_key(seed, shard: int) -> bytes:
    value = getattr(seed, "value", seed)
    return hashlib.sha256(enc_int(int(value), 8) + enc_int(shard, 4)).digest()


def random_beacon(prev: ValidatorSet | Sequence[int], shard: int, seed,
                  committee_size: int = 0, v_min: int = 4,
                  epoch: int | None = None) -> ValidatorSet:
    """Pick a shard's next committee from a candidate pool.

    A PRF keyed by hash(seed, shard) drives a Fisher-Yates shuffle of the
    pool (sorted first, so the caller's ordering does not matter) and the
    first ``max(v_min, committee_size)`` candidates form the committee.
    """
    pool = sorted(prev.members if isinstance(prev, ValidatorSet) else prev)
    if len(pool) < v_min:
        raise ConfigError(f"shard {shard}: {len(pool)} candidates, need at least {v_min}")
    take = min(len(pool), max(v_min, committee_size))
    chosen = Prf(_beacon_key(seed, shard)).shuffle(pool)[:take]
    if epoch is None:
        epoch = prev.epoch + 1 if isinstance(prev, ValidatorSet) else 0
    scores = dict(prev.scores) if isinstance(prev, ValidatorSet) else {}
    return ValidatorSet(shard, tuple(chosen), epoch,
                        {v: scores[v] for v in chosen if v in scores})


def assign_committees(pool: Sequence[int], shards: Sequence[int], seed, committee_size: int,
                      v_min: int = 4, epoch: int = 0) -> dict[int, ValidatorSet]:
    """Disjoint committees for every shard, drawn shard by shard in id order."""
    remaining = sorted(pool)
    out = {}
    for s in sorted(shards):
        vs = random_beacon(remaining, s, seed, committee_size, v_min, epoch)
        out[s] = vs
        taken = set(vs.members)
        remaining = [v for v in remaining if v not in taken]
    return out
