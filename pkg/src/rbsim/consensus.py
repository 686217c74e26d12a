"""Per-shard IBFT, quorum arithmetic, reputation scores and weighted selection."""
from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

from .core import Block, DomainError, Prf, encode

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def fault_bound(n: int) -> int:
    if n < 1:
        raise DomainError("committee size must be positive")
    return (n - 1) // 3


def quorum_threshold(n: int) -> int:
    """T_q = n - floor((n-1)/3); for n = 3f+1 this is 2f+1."""
    return n - fault_bound(n)


# -- reputation --------------------------------------------------------------

def reputation(performance: float, trust: float, w1: float = 0.5, w2: float = 0.5) -> float:
    if abs(Fraction(w1) + Fraction(w2) - 1) > Fraction(1, 10**12):
        raise ConfigError(f"reputation weights must sum to 1, got {w1} + {w2}")
    for name, v in (("performance", performance), ("trust", trust), ("w1", w1), ("w2", w2)):
        if not 0 <= v <= 1:
            raise DomainError(f"{name}={v} outside [0, 1]")
    return w1 * performance + w2 * trust


@dataclass(frozen=True, slots=True)
class ReputationScore:
    performance: float = 1.0
    trust: float = 1.0
    w1: float = 0.5
    w2: float = 0.5

    @property
    def value(self) -> float:
        return reputation(self.performance, self.trust, self.w1, self.w2)


class ReputationTracker:
    """Running performance/trust bookkeeping for one validator."""

    WINDOW = 100
    REVEAL_PENALTY = 0.1

    def __init__(self):
        self.rounds: deque[bool] = deque(maxlen=self.WINDOW)
        self.messages = 0
        self.faults = 0
        self.penalty = 0.0

    def participated(self, on_time: bool) -> None:
        self.rounds.append(on_time)

    def score(self, w1: float = 0.5, w2: float = 0.5) -> ReputationScore:
        perf = sum(self.rounds) / len(self.rounds) if self.rounds else 1.0
        valid = 1.0 - self.faults / self.messages if self.messages else 1.0
        trust = max(0.0, valid - self.penalty)
        return ReputationScore(perf, trust, w1, w2)


@dataclass
class ValidatorSet:
    shard: int
    members: tuple[int, ...]
    epoch: int = 0
    scores: dict[int, ReputationScore] = field(default_factory=dict)

    def leader(self, height: int, round_: int) -> int:
        return self.members[(height + round_) % len(self.members)]

    def __len__(self) -> int:
        return len(self.members)


def _seed_bytes(seed) -> bytes:
    value = getattr(seed, "value", seed)
    return encode((int(value), 8))


def weighted_select(candidates: ValidatorSet | Sequence[tuple[int, float]], k: int,
                    seed) -> list[int]:
    """Draw ``k`` distinct validators, each draw proportional to reputation."""
    if isinstance(candidates, ValidatorSet):
        pool = [(v, candidates.scores.get(v, ReputationScore()).value)
                for v in candidates.members]
    else:
        pool = [(v, float(w)) for v, w in candidates]
    if k > len(pool):
        raise DomainError(f"cannot select {k} of {len(pool)} candidates")
    if k == len(pool):
        return [v for v, _ in pool]
    prf = Prf(b"weighted-select" + _seed_bytes(seed))
    if sum(w for _, w in pool) <= 0:
        log.warning("all candidate scores are zero; falling back to uniform selection")
        pool = [(v, 1.0) for v, _ in pool]
    chosen = []
    for _ in range(k):
        total = sum(w for _, w in pool)
        if total <= 0:
            i = prf.randbelow(len(pool))
        else:
            u = prf.random() * total
            acc, i = 0.0, len(pool) - 1
            for j, (_, w) in enumerate(pool):
                acc += w
                if u < acc:
                    i = j
                    break
        chosen.append(pool.pop(i)[0])
    return chosen


def validate_block(votes: Iterable, tq: int) -> bool:
    """Quorum check over votes for one (digest, height, round)."""
    votes = list(votes)
    keys = {(v.digest, v.height, v.round) for v in votes}
    if len(keys) > 1:
        raise DomainError("vote set mixes different blocks or rounds")
    return len({v.sender for v in votes}) >= tq


# -- IBFT messages -----------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Prepare:
    shard: int
    epoch: int
    height: int
    round: int
    sender: int
    digest: bytes


@dataclass(frozen=True, slots=True)
class Commit:
    shard: int
    epoch: int
    height: int
    round: int
    sender: int
    digest: bytes


@dataclass(frozen=True, slots=True)
class RoundChange:
    shard: int
    epoch: int
    height: int
    round: int
    sender: int
    prepared_round: int = -1
    prepared_block: Block | None = None
    certificate: tuple[Prepare, ...] = ()


@dataclass(frozen=True, slots=True)
class PrePrepare:
    shard: int
    epoch: int
    height: int
    round: int
    sender: int
    block: Block
    justification: tuple[RoundChange, ...] = ()


Vote = Prepare | Commit
Message = PrePrepare | Prepare | Commit | RoundChange


class Phase(enum.Enum):
    IDLE = "idle"
    PRE_PREPARED = "pre-prepared"
    PREPARED = "prepared"
    COMMITTED = "committed"


@dataclass
class ConsensusState:
    shard: int
    height: int
    round: int = 0
    phase: Phase = Phase.IDLE
    proposal: Block | None = None
    prepares: dict[bytes, dict[int, Prepare]] = field(default_factory=dict)
    commits: dict[bytes, set[int]] = field(default_factory=dict)
    deadline: int | None = None

    def copy(self) -> "ConsensusState":
        return ConsensusState(self.shard, self.height, self.round, self.phase, self.proposal,
                              {d: dict(v) for d, v in self.prepares.items()},
                              {d: set(v) for d, v in self.commits.items()}, self.deadline)


@dataclass
class CommitteeContext:
    """What a replica knows about its committee for one epoch."""

    shard: int
    epoch: int
    members: tuple[int, ...]
    base_timeout: int
    validate: Callable[[Block], bool] = lambda b: True
    lookup: Callable[[bytes], Block | None] = lambda d: None
    lock_on_prepare: bool = True
    r_max: int = 8

    def __post_init__(self):
        self.n = len(self.members)
        self.f = fault_bound(self.n)
        self.tq = quorum_threshold(self.n)
        self.member_set = frozenset(self.members)

    def leader(self, height: int, round_: int) -> int:
        return self.members[(height + round_) % self.n]

    def timeout(self, round_: int) -> int:
        return self.base_timeout << round_


FUTURE_CAP = 4096


class IbftReplica:
    """One validator's IBFT state machine for one shard and epoch.

    ``handle`` consumes a message and returns ``(outbound, finalized)``; the
    replica's own broadcasts are looped back internally, so ``outbound`` lists
    only what must cross the network. Outbound entries are ``(dest, msg)`` with
    ``dest=None`` meaning every other committee member.
    """

    def __init__(self, node: int, ctx: CommitteeContext, height: int = 1):
        self.node = node
        self.ctx = ctx
        self.state = ConsensusState(ctx.shard, height)
        self.prepared_round = -1
        self.prepared_block: Block | None = None
        self.prepared_cert: tuple[Prepare, ...] = ()
        self.rc: dict[int, dict[int, RoundChange]] = {}
        self.future_rounds: dict[int, list] = {}
        self.future_heights: dict[int, list] = {}
        self.proposed: set[int] = set()
        self.voted: dict[tuple[str, int], bytes] = {}
        self.failed_rounds = 0
        self.faults: list[tuple[int, str]] = []
        self.finalized: dict[int, Block] = {}

    def clone(self) -> "IbftReplica":
        new = IbftReplica.__new__(IbftReplica)
        new.node = self.node
        new.ctx = self.ctx
        new.state = self.state.copy()
        new.prepared_round = self.prepared_round
        new.prepared_block = self.prepared_block
        new.prepared_cert = self.prepared_cert
        new.rc = {r: dict(v) for r, v in self.rc.items()}
        new.future_rounds = {r: list(v) for r, v in self.future_rounds.items()}
        new.future_heights = {h: list(v) for h, v in self.future_heights.items()}
        new.proposed = set(self.proposed)
        new.voted = dict(self.voted)
        new.failed_rounds = self.failed_rounds
        new.faults = list(self.faults)
        new.finalized = dict(self.finalized)
        return new

    # -- public API ------------------------------------------------------

    @property
    def height(self) -> int:
        return self.state.height

    @property
    def round(self) -> int:
        return self.state.round

    def is_leader(self) -> bool:
        return self.ctx.leader(self.state.height, self.state.round) == self.node

    def arm(self, start: int) -> int:
        """Start the round-0 timer for the current height; returns the deadline."""
        if self.state.deadline is None:
            self.state.deadline = start + self.ctx.timeout(self.state.round)
        return self.state.deadline

    def handle(self, msg: Message, now: int) -> tuple[list, Block | None]:
        out: list = []
        inbox = [msg]
        finalized = None
        while inbox:
            fin = self._process(inbox.pop(0), now, out, inbox)
            if fin is not None:
                finalized = fin
        return out, finalized

    def proposal_request(self) -> tuple[int, tuple[RoundChange, ...], Block | None] | None:
        """If this replica must propose now, say for which round and with what."""
        s = self.state
        if s.phase is Phase.COMMITTED or not self.is_leader() or s.round in self.proposed:
            return None
        if s.round == 0:
            return 0, (), None
        rcs = self.rc.get(s.round, {})
        if len(rcs) < self.ctx.tq:
            return None
        just = tuple(rcs[k] for k in sorted(rcs))
        best = self._best_prepared(just) if self.ctx.lock_on_prepare else None
        return s.round, just, best.prepared_block if best else None

    def propose(self, block: Block, now: int,
                justification: tuple[RoundChange, ...] = ()) -> tuple[list, Block | None]:
        s = self.state
        self.proposed.add(s.round)
        msg = PrePrepare(s.shard, self.ctx.epoch, s.height, s.round, self.node, block,
                         justification)
        return self._broadcast_and_loop(msg, now)

    def on_timeout(self, now: int) -> tuple[list, bool]:
        """Round change after a missed deadline; returns (outbound, escalate)."""
        s = self.state
        if s.phase is Phase.COMMITTED or s.deadline is None or now < s.deadline:
            return [], False
        self.failed_rounds += 1
        out: list = []
        inbox: list = []
        self._enter_round(s.round + 1, now, out, inbox)
        while inbox:
            self._process(inbox.pop(0), now, out, inbox)
        return out, self.failed_rounds >= self.ctx.r_max

    def advance(self, now: int) -> tuple[list, Block | None]:
        """Move past a committed height and replay messages buffered for the next."""
        s = self.state
        if s.phase is not Phase.COMMITTED:
            raise DomainError("advance() before the height committed")
        h = s.height + 1
        self.state = ConsensusState(s.shard, h)
        self.prepared_round, self.prepared_block, self.prepared_cert = -1, None, ()
        self.rc = {}
        self.future_rounds = {}
        self.proposed = set()
        self.voted = {}
        self.failed_rounds = 0
        buffered = self.future_heights.pop(h, [])
        for old in [k for k in self.future_heights if k < h]:
            del self.future_heights[old]
        out: list = []
        finalized = None
        inbox = list(buffered)
        while inbox:
            fin = self._process(inbox.pop(0), now, out, inbox)
            if fin is not None:
                finalized = fin
        return out, finalized

    def check_invariants(self) -> None:
        s, tq = self.state, self.ctx.tq
        if s.phase in (Phase.PREPARED,) and len(s.prepares.get(s.proposal.digest, {})) < tq:
            raise AssertionError("prepared without a prepare quorum")
        if s.phase is Phase.COMMITTED:
            blk = self.finalized[s.height]
            if len(s.commits.get(blk.digest, ())) < tq:
                raise AssertionError("committed without a commit quorum")

    # -- internals -------------------------------------------------------

    def _broadcast_and_loop(self, msg, now):
        out = [(None, msg)]
        inbox = [msg]
        finalized = None
        while inbox:
            fin = self._process(inbox.pop(0), now, out, inbox)
            if fin is not None:
                finalized = fin
        return out, finalized

    def _broadcast(self, msg, out, inbox):
        out.append((None, msg))
        inbox.append(msg)

    def _fault(self, sender: int, reason: str) -> None:
        self.faults.append((sender, reason))

    def _process(self, m, now, out, inbox) -> Block | None:
        s, ctx = self.state, self.ctx
        if m.sender not in ctx.member_set or m.epoch != ctx.epoch:
            return None
        if m.height < s.height:
            return None
        if m.height > s.height:
            buf = self.future_heights.setdefault(m.height, [])
            if len(buf) < FUTURE_CAP:
                buf.append(m)
            return None
        if s.phase is Phase.COMMITTED:
            return None
        if isinstance(m, RoundChange):
            return self._on_round_change(m, now, out, inbox)
        if m.round < s.round:
            return None
        if m.round > s.round:
            buf = self.future_rounds.setdefault(m.round, [])
            if len(buf) < FUTURE_CAP:
                buf.append(m)
            return None
        if isinstance(m, PrePrepare):
            return self._on_preprepare(m, now, out, inbox)
        if isinstance(m, Prepare):
            return self._on_prepare(m, out, inbox)
        return self._on_commit(m)

    def _first_vote(self, kind: str, m) -> bool:
        key = (kind, m.round, m.sender)
        seen = self.voted.get(key)
        if seen is None:
            self.voted[key] = m.digest
            return True
        if seen != m.digest:
            self._fault(m.sender, f"equivocating {kind}")
        return False

    def _valid_cert(self, rc: RoundChange) -> bool:
        if rc.prepared_round < 0 or rc.prepared_block is None:
            return False
        d = rc.prepared_block.digest
        signers = {p.sender for p in rc.certificate
                   if p.digest == d and p.height == rc.height
                   and p.round == rc.prepared_round and p.sender in self.ctx.member_set}
        return len(signers) >= self.ctx.tq

    def _best_prepared(self, just: Sequence[RoundChange]) -> RoundChange | None:
        best = None
        for rc in just:
            if self._valid_cert(rc) and (best is None or rc.prepared_round > best.prepared_round):
                best = rc
        return best

    def _justified(self, m: PrePrepare) -> bool:
        if m.round == 0 or not self.ctx.lock_on_prepare:
            return True
        rcs = {}
        for rc in m.justification:
            if rc.height == m.height and rc.round == m.round and rc.sender in self.ctx.member_set:
                rcs.setdefault(rc.sender, rc)
        if len(rcs) < self.ctx.tq:
            return False
        best = self._best_prepared(list(rcs.values()))
        return best is None or best.prepared_block.digest == m.block.digest

    def _on_preprepare(self, m: PrePrepare, now, out, inbox):
        s, ctx = self.state, self.ctx
        if m.sender != ctx.leader(s.height, s.round):
            self._fault(m.sender, "proposal from non-leader")
            return None
        if s.proposal is not None:
            if s.proposal.digest != m.block.digest:
                self._fault(m.sender, "equivocating proposal")
            return None
        if m.block.height != s.height or not self._justified(m):
            self._fault(m.sender, "unjustified proposal")
            return None
        if not ctx.validate(m.block):
            self._fault(m.sender, "invalid proposal")
            return None
        s.proposal = m.block
        s.phase = Phase.PRE_PREPARED
        self._broadcast(Prepare(s.shard, ctx.epoch, s.height, s.round, self.node,
                                m.block.digest), out, inbox)
        return self._check_prepared(out, inbox) or self._check_committed()

    def _on_prepare(self, m: Prepare, out, inbox):
        if not self._first_vote("prepare", m):
            return None
        self.state.prepares.setdefault(m.digest, {})[m.sender] = m
        return self._check_prepared(out, inbox)

    def _check_prepared(self, out, inbox):
        s, ctx = self.state, self.ctx
        if s.phase is not Phase.PRE_PREPARED:
            return None
        votes = s.prepares.get(s.proposal.digest, {})
        if len(votes) < ctx.tq:
            return None
        s.phase = Phase.PREPARED
        self.prepared_round = s.round
        self.prepared_block = s.proposal
        self.prepared_cert = tuple(votes[k] for k in sorted(votes))
        self._broadcast(Commit(s.shard, ctx.epoch, s.height, s.round, self.node,
                               s.proposal.digest), out, inbox)
        return None

    def _on_commit(self, m: Commit):
        if not self._first_vote("commit", m):
            return None
        self.state.commits.setdefault(m.digest, set()).add(m.sender)
        return self._check_committed()

    def _check_committed(self):
        s, ctx = self.state, self.ctx
        for d, signers in s.commits.items():
            if len(signers) < ctx.tq:
                continue
            blk = s.proposal if s.proposal is not None and s.proposal.digest == d else ctx.lookup(d)
            if blk is None or not ctx.validate(blk):
                continue
            s.phase = Phase.COMMITTED
            s.deadline = None
            self.finalized[s.height] = blk
            self.failed_rounds = 0
            return blk
        return None

    def _on_round_change(self, m: RoundChange, now, out, inbox):
        s, ctx = self.state, self.ctx
        if m.round < s.round:
            return None
        rcs = self.rc.setdefault(m.round, {})
        if m.sender in rcs:
            return None
        rcs[m.sender] = m
        if m.round > s.round and len(rcs) >= ctx.f + 1:
            self._enter_round(m.round, now, out, inbox)
        return None

    def _enter_round(self, r: int, now: int, out, inbox) -> None:
        s, ctx = self.state, self.ctx
        s.round = r
        s.phase = Phase.IDLE
        s.proposal = None
        s.prepares = {}
        s.commits = {}
        s.deadline = now + ctx.timeout(r)
        for old in [k for k in self.rc if k < r]:
            del self.rc[old]
        self._broadcast(RoundChange(s.shard, ctx.epoch, s.height, r, self.node,
                                    self.prepared_round, self.prepared_block,
                                    self.prepared_cert), out, inbox)
        inbox.extend(self.future_rounds.pop(r, []))
        for old in [k for k in self.future_rounds if k < r]:
            del self.future_rounds[old]


def ibft_step(replica: IbftReplica, msg: Message, now: int):
    """Functional form of :meth:`IbftReplica.handle`; the input is left untouched."""
    new = replica.clone()
    out, finalized = new.handle(msg, now)
    return new, out, finalized


def on_timeout(replica: IbftReplica, now: int):
    new = replica.clone()
    out, escalate = new.on_timeout(now)
    return new, out, escalate
