"""Bounded schedule exploration of one IBFT height with a Byzantine member.

By default the scheduler delivers pending messages in FIFO order and lets a
timer expire only once no message is in flight. A schedule may deviate from that order at most ``max_delays`` times
by picking any other pending item, and every schedule within the bound is
enumerated depth-first. Each leaf is checked for conflicting finalizations.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .consensus import (
    Commit,
    CommitteeContext,
    IbftReplica,
    Phase,
    Prepare,
    PrePrepare,
    RoundChange,
)
from .core import Block

SHARD = 0
EPOCH = 0
HEIGHT = 1


class Adversary(enum.Enum):
    SILENT = "silent"
    EQUIVOCATE = "equivocate"


def make_block(round_: int, proposer: int, variant: int = 0) -> Block:
    return Block(SHARD, HEIGHT, b"\x00" * 32, (), bytes([round_, proposer, variant]) * 8 +
                 b"\x00" * 8, proposer, 128, timestamp=round_ * 1000 + variant)


@dataclass
class Outcome:
    schedules: int = 0
    steps: int = 0
    violations: list = field(default_factory=list)
    finalized_leaves: int = 0
    truncated: int = 0


@dataclass(frozen=True)
class _Timer:
    node: int
    round: int


class Explorer:
    """Enumerates delay-bounded schedules for an n-member committee.

    The Byzantine member is either silent or an equivocator. As round-0
    leader the equivocator proposes one block to ``first_half`` of the honest
    members and a twin to the rest, and votes for every proposal it hears of, with conflicting
    votes sent to different peers.
    """

    def __init__(self, n: int = 4, adversary: Adversary = Adversary.EQUIVOCATE,
                 max_delays: int = 2, max_round: int = 2, max_depth: int = 120,
                 lock_on_prepare: bool = True, base_timeout: int = 8,
                 byz: int | None = None, first_half: frozenset[int] | None = None):
        self.members = tuple(range(n))
        self.byz = self.members[(HEIGHT + 0) % n] if byz is None else byz
        self.adversary = adversary
        self.max_delays = max_delays
        self.max_round = max_round
        self.max_depth = max_depth
        self.blocks: dict[bytes, Block] = {}
        self.ctx = CommitteeContext(SHARD, EPOCH, self.members, base_timeout,
                                    lookup=self.blocks.get, lock_on_prepare=lock_on_prepare)
        self.honest = tuple(m for m in self.members if m != self.byz)
        if first_half is None:
            first_half = frozenset(self.honest[:len(self.honest) // 2])
        self.first_half = first_half

    def _block(self, blk: Block) -> Block:
        self.blocks[blk.digest] = blk
        return blk

    # -- initial configuration -------------------------------------------

    def initial(self) -> tuple[dict[int, IbftReplica], tuple]:
        reps = {}
        for m in self.honest:
            r = IbftReplica(m, self.ctx, HEIGHT)
            r.arm(0)
            reps[m] = r
        pending: list = []
        if self.adversary is Adversary.EQUIVOCATE:
            a = self._block(make_block(0, self.byz, 0))
            b = self._block(make_block(0, self.byz, 1))
            for i, m in enumerate(self.honest):
                blk = a if m in self.first_half else b
                votes = [(m, PrePrepare(SHARD, EPOCH, HEIGHT, 0, self.byz, blk)),
                         (m, Prepare(SHARD, EPOCH, HEIGHT, 0, self.byz, blk.digest)),
                         (m, Commit(SHARD, EPOCH, HEIGHT, 0, self.byz, blk.digest))]
                pending[i * 3:i * 3] = votes
        pending += [_Timer(m, 0) for m in self.honest]
        return reps, tuple(pending)

    # -- the adversary reacting to what it hears ---------------------------

    def _byz_react(self, msg, sent: frozenset) -> tuple[list, frozenset]:
        if self.adversary is not Adversary.EQUIVOCATE or msg.sender == self.byz:
            return [], sent
        out = []
        if isinstance(msg, PrePrepare):
            d = msg.block.digest
            for kind in (Prepare, Commit):
                vote = kind(SHARD, EPOCH, HEIGHT, msg.round, self.byz, d)
                out += [(m, vote) for m in self.honest]
        elif isinstance(msg, RoundChange):
            rc = RoundChange(SHARD, EPOCH, HEIGHT, msg.round, self.byz)
            out += [(m, rc) for m in self.honest]
            if self.ctx.leader(HEIGHT, msg.round) == self.byz:
                blk = self._block(make_block(msg.round, self.byz, 2))
                pp = PrePrepare(SHARD, EPOCH, HEIGHT, msg.round, self.byz, blk)
                out += [(m, pp) for m in self.honest]
        fresh = [item for item in out if item not in sent]
        return fresh, sent | frozenset(fresh)

    # -- transitions ---------------------------------------------------------

    def _step(self, reps, pending, sent, i):
        item = pending[i]
        rest = pending[:i] + pending[i + 1:]
        if isinstance(item, _Timer):
            rep = reps[item.node]
            if rep.round != item.round or rep.state.phase is Phase.COMMITTED \
                    or item.round >= self.max_round:
                return reps, rest, sent
            new = rep.clone()
            out, _ = new.on_timeout(new.state.deadline)
            extra = [_Timer(item.node, new.round)]
        else:
            dst, msg = item
            if dst == self.byz:
                fresh, sent = self._byz_react(msg, sent)
                return reps, rest + tuple(fresh), sent
            new = reps[dst].clone()
            before = new.round
            out, _ = new.handle(msg, 0)
            extra = [_Timer(dst, new.round)] if new.round != before else []
        out = list(out)
        self._maybe_propose(new, out)
        reps = dict(reps)
        reps[new.node] = new
        sends = []
        for _, msg in out:
            sends += [(m, msg) for m in self.members if m != new.node]
        return reps, rest + tuple(sends) + tuple(extra), sent

    def _maybe_propose(self, rep: IbftReplica, out: list) -> None:
        req = rep.proposal_request()
        if req is None:
            return
        rnd, just, forced = req
        blk = forced if forced is not None else self._block(make_block(rnd, rep.node))
        more, _ = rep.propose(blk, 0, just)
        out += more

    def _check(self, reps) -> list[str]:
        digests = {r.finalized[HEIGHT].digest for r in reps.values() if HEIGHT in r.finalized}
        return [f"conflicting finalizations: {sorted(d.hex()[:12] for d in digests)}"] \
            if len(digests) > 1 else []

    def run(self, limit: int | None = None) -> Outcome:
        out = Outcome()
        reps, pending = self.initial()
        for m in self.honest:
            extra = []
            self._maybe_propose(reps[m], extra)
            for _, msg in extra:
                pending += tuple((p, msg) for p in self.members if p != m)
        stack = [(reps, pending, frozenset(), 0, 0)]
        while stack:
            reps, pending, sent, delays, depth = stack.pop()
            out.steps += 1
            bad = self._check(reps)
            if bad:
                out.violations.append(bad[0])
                out.schedules += 1
                continue
            if not pending or depth >= self.max_depth:
                out.schedules += 1
                out.truncated += bool(pending)
                out.finalized_leaves += any(HEIGHT in r.finalized for r in reps.values())
                if limit is not None and out.schedules >= limit:
                    break
                continue
            first = next((i for i, p in enumerate(pending) if not isinstance(p, _Timer)), 0)
            choices = [first]
            if delays < self.max_delays:
                seen = {pending[first]}
                for i in range(len(pending)):
                    if pending[i] not in seen:
                        seen.add(pending[i])
                        choices.append(i)
            for i in reversed(choices):
                nr, np_, ns = self._step(reps, pending, sent, i)
                stack.append((nr, np_, ns, delays + (i != first), depth + 1))
        return out


def merge(outcomes) -> Outcome:
    total = Outcome()
    for o in outcomes:
        total.schedules += o.schedules
        total.steps += o.steps
        total.violations += o.violations
        total.finalized_leaves += o.finalized_leaves
        total.truncated += o.truncated
    return total


def explore(n: int = 4, adversary: Adversary | str = Adversary.EQUIVOCATE, max_delays: int = 2,
            lock_on_prepare: bool = True, limit: int | None = None, **kw) -> Outcome:
    return Explorer(n, Adversary(adversary), max_delays, lock_on_prepare=lock_on_prepare,
                    **kw).run(limit)


def explore_all(n: int = 4, adversary: Adversary | str = Adversary.EQUIVOCATE,
                max_delays: int = 2, lock_on_prepare: bool = True, **kw) -> Outcome:
    """Sweep the adversary's placement: every Byzantine position when silent,
    every way of handing one honest member the twin proposal when equivocating."""
    adversary = Adversary(adversary)
    runs = []
    if adversary is Adversary.SILENT:
        for byz in range(n):
            runs.append(explore(n, adversary, max_delays, lock_on_prepare, byz=byz, **kw))
    else:
        leader = HEIGHT % n
        honest = [m for m in range(n) if m != leader]
        for m in honest:
            runs.append(explore(n, adversary, max_delays, lock_on_prepare,
                                first_half=frozenset([m]), **kw))
    return merge(runs)
