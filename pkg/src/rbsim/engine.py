"""The node runtime: per-shard committees running IBFT over the simulated
network, mempools, cross-shard message flow, fault injection and epochs."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import logging
from dataclasses import dataclass

from .config import ScenarioConfig
from .consensus import (
    CommitteeContext,
    IbftReplica,
    Phase,
    PrePrepare,
    ReputationTracker,
    RoundChange,
    ValidatorSet,
    weighted_select,
)
from .core import (
    COMMIT_RECORD_BYTES,
    DOMAIN_BLOCK,
    Block,
    DomainError,
    InvariantViolation,
    ShardState,
    Transaction,
    TxKind,
    block_size,
    hash_key,
    make_tx,
    sha256d,
)
from .cross_shard import (
    Aborted,
    Ack,
    Acquired,
    BlockRejected,
    ExecConfig,
    ProofMessage,
    RoutingError,
    Vote,
    check_proof,
    dest_abort,
    dest_commit,
    execute_block,
    expire_locks,
    lock_for_transfer,
    proof_of_lock,
    retry_schedule,
    source_abort,
    source_commit,
    stage_credit,
)
from .epoch import (
    EpochConfig,
    NetworkState,
    plan_reconfiguration,
    rebucket,
    transition_epoch,
)
from .partitioning import RangeTable, account_shard, distribute, init_ranges, skew_ratio
from .randomness import (
    AggMode,
    BeaconFailure,
    Randomness,
    Withhold,
    assign_committees,
    run_round,
)
from .sim import Simulator, Streams, Trace
from .workload import TxRequest, account_names, generate_workload

log = logging.getLogger(__name__)


class Behavior(enum.Enum):
    HONEST = "honest"
    SILENT = "silent"
    EQUIVOCATE = "equivocate"
    INVALID = "invalid"
    STALLER = "staller"
    REVEAL_WITHHOLDER = "reveal_withholder"
    DOS_FLOODER = "dos_flooder"


@dataclass(frozen=True)
class NodeBehavior:
    kind: Behavior = Behavior.HONEST
    rate: float = 0.0

    @property
    def follows_consensus(self) -> bool:
        return self.kind in (Behavior.HONEST, Behavior.REVEAL_WITHHOLDER, Behavior.DOS_FLOODER)


HONEST = NodeBehavior()
SPAM_FUNDS = 10**9


class RateLimiter:
    """Per-sender admission limit with penalty windows.

    A sender over ``limit`` submissions in a ``window`` is refused for
    ``penalty`` ticks; with ``adaptive`` the penalty doubles per offense.
    """

    def __init__(self, limit: int, window: int, penalty: int, adaptive: bool):
        self.limit, self.window, self.penalty, self.adaptive = limit, window, penalty, adaptive
        self.state: dict[str, list[int]] = {}

    def admit(self, sender: str, now: int) -> bool:
        st = self.state.setdefault(sender, [now, 0, 0, 0])  # start, count, blocked, offenses
        if now < st[2]:
            return False
        if now - st[0] >= self.window:
            st[0], st[1] = now, 0
        st[1] += 1
        if st[1] > self.limit:
            st[3] += 1
            mult = 1 << (st[3] - 1) if self.adaptive else 1
            st[2] = now + self.penalty * mult
            st[0], st[1] = st[2], 0
            return False
        return True


@dataclass
class PoolEntry:
    tx: Transaction
    seq: int
    attempt: int = 0
    not_before: int = 0
    spam: bool = False


@dataclass
class CreditEntry:
    msg: ProofMessage
    seq: int
    attempt: int = 0
    not_before: int = 0


@dataclass
class TxRecord:
    id: int
    kind: str
    submitted: int
    spam: bool = False
    locked_at: int | None = None
    final_at: int | None = None
    aborted: str = ""
    retries: int = 0


class ShardRuntime:
    def __init__(self, engine: "Engine", state: ShardState, committee: ValidatorSet, epoch: int):
        self.engine = engine
        self.shard = state.shard
        self.state = state
        self.committee = committee
        self.members = committee.members
        cfg = engine.cfg
        self.ctx = CommitteeContext(self.shard, epoch, self.members, cfg.tau,
                                    validate=self.validate, lookup=engine.blocks.get,
                                    r_max=cfg.r_max)
        self.replicas: dict[int, IbftReplica] = {}
        for n in self.members:
            if engine.behavior(n).kind is not Behavior.SILENT:
                self.replicas[n] = IbftReplica(n, self.ctx, state.height + 1)
        self.mempool: dict[int, PoolEntry] = {}
        self.credits: dict[int, CreditEntry] = {}
        self.decisions: dict[int, tuple[bool, int]] = {}
        self.decided: dict[int, bool] = {}
        self.seen_heights: dict[tuple[int, str], int] = {}
        self.valid: dict[bytes, bool] = {}
        self.exec_cache: dict[bytes, tuple[ShardState, list]] = {}
        self.idle: dict[int, int] = {}
        self.timer_at: dict[int, int] = {}
        self.twins: dict[bytes, Block] = {}
        self.load = 0
        self.histogram: list[int] = []

    def has_work(self, now: int) -> bool:
        if self.mempool or self.credits or self.decisions:
            return True
        return any(not r.pinned and r.expires_at <= now for r in self.state.lock_table.values())

    def validate(self, blk: Block) -> bool:
        ok = self.valid.get(blk.digest)
        if ok is None:
            ok = self._check(blk)
            self.valid[blk.digest] = ok
        return ok

    def _check(self, blk: Block) -> bool:
        cfg = self.engine.cfg
        if blk.shard != self.shard or blk.size_bytes > cfg.block_limit:
            return False
        if blk.size_bytes != block_size(len(blk.txs), len(blk.commits), cfg.header_bytes,
                                        cfg.tx_bytes):
            return False
        st = self.state
        if blk.height <= st.height:
            return st.chain[blk.height].digest == blk.digest
        if blk.height != st.height + 1 or blk.parent_hash != st.head.digest:
            return False
        if blk.timestamp < st.head.timestamp + cfg.t_block:
            return False
        if blk.digest in self.exec_cache:
            return True
        scratch = st.copy()
        try:
            effects = execute_block(scratch, blk, self.engine.exec_cfg)
        except (BlockRejected, DomainError, RoutingError, KeyError):
            return False
        self.exec_cache[blk.digest] = (scratch, effects)
        return True


@dataclass
class RunResult:
    config: ScenarioConfig
    records: dict[int, TxRecord]
    shards: dict[int, ShardState]
    table: RangeTable
    genesis_total: int
    trace: Trace
    end_tick: int
    events: int
    messages: dict[str, int]
    blocks: int
    rounds: list[int]
    epochs: list[dict]
    escalations: int
    faults: int
    rate_limited: int
    genesis_node_map: dict[int, int]
    committees: dict[int, tuple[int, ...]]
    quiescent: bool

    def live_locks(self) -> int:
        return sum(len(s.lock_table) for s in self.shards.values())

    def total_value(self) -> int:
        return sum(s.total() + s.burned + s.transfer_out - s.transfer_in
                   for s in self.shards.values())

    def balances(self) -> dict[str, int]:
        out = {}
        for s in sorted(self.shards):
            out.update(self.shards[s].balances)
        return out

    def burned(self) -> int:
        return sum(s.burned for s in self.shards.values())


class Engine:
    """One scenario instance; owns everything it mutates."""

    def __init__(self, cfg: ScenarioConfig, *, behaviors: dict[int, NodeBehavior] | None = None,
                 requests: list[TxRequest] | None = None, balances: dict[str, int] | None = None,
                 keep_trace: bool | None = None):
        self.cfg = cfg
        self.streams = Streams(cfg.seed)
        self.net = cfg.network()
        self.net_rng = self.streams.fork("network")
        self.retry_rng = self.streams.fork("retry")
        self.sim = Simulator()
        self.trace = Trace(keep=cfg.trace if keep_trace is None else keep_trace)
        self.exec_cfg = ExecConfig(cfg.lock_ttl, cfg.locking, self._root_ok)
        self.epoch_cfg = EpochConfig(cfg.epoch_length, cfg.w_hi or None, cfg.w_lo or None,
                                     cfg.v_min, cfg.committee_size)
        self.blocks: dict[bytes, Block] = {}
        self.records: dict[int, TxRecord] = {}
        self.messages: dict[str, int] = {}
        self.seq = 0
        self.epoch = 0
        self.barrier = False
        self.in_flight = 0
        self.escalations = 0
        self.rate_limited = 0
        self.epoch_rows: list[dict] = []
        self.rounds: list[int] = []
        self.pool = tuple(range(cfg.n_nodes))
        self.trackers = {n: ReputationTracker() for n in self.pool}
        self._behaviors = behaviors if behaviors is not None else self._draw_behaviors()
        self.table = init_ranges(cfg.n_shards)
        accounts = account_names(cfg.n_accounts)
        if balances is None:
            balances = {a: cfg.initial_balance for a in accounts}
        balances = dict(balances)
        self.spam_accounts = self._fund_flooder(balances)
        self.requests = requests if requests is not None else generate_workload(
            cfg, self.streams.fork("workload"), self.table)
        per_shard: dict[int, dict[str, int]] = {s: {} for s in self.table.shards}
        for a in sorted(balances):
            per_shard[account_shard(a, self.table)][a] = balances[a]
        self.genesis_total = sum(balances.values())
        self.seed = Randomness.from_seed(cfg.seed)
        committees = assign_committees(self.pool, self.table.shards, self.seed, cfg.committee,
                                       cfg.v_min, 0)
        self.genesis_node_map = {s: len(v) for s, v in
                                 distribute(self.pool, [], [], self.table).node_map.items()}
        self.shards: dict[int, ShardRuntime] = {}
        self.node_shard: dict[int, int] = {}
        for s in self.table.shards:
            st = ShardState(s, self.table.range_of(s), per_shard[s])
            self._install(st, committees[s])
        self.trace.add(0, "-", "genesis", self.seed.value.to_bytes(8, "big").hex(),
                       {"balances": {a: balances[a] for a in sorted(balances)},
                        "committees": {str(s): list(committees[s].members)
                                       for s in sorted(committees)}})
        self.limiter = None
        if cfg.dos_defense != "none":
            self.limiter = RateLimiter(cfg.rl_limit, cfg.rl_window, cfg.rl_penalty,
                                       cfg.dos_defense == "adaptive")

    # -- setup -----------------------------------------------------------

    def behavior(self, node: int) -> NodeBehavior:
        return self._behaviors.get(node, HONEST)

    def _draw_behaviors(self) -> dict[int, NodeBehavior]:
        cfg = self.cfg
        out: dict[int, NodeBehavior] = {}
        m = round(cfg.malicious_fraction * cfg.n_nodes)
        if m:
            rng = self.streams.fork("malicious")
            bad = sorted(rng.sample(list(self.pool), m))
            mix = cfg.mix()
            total = sum(w for _, w in mix)
            quotas, acc = [], 0.0
            for name, w in mix:
                acc += w / total * m
                quotas.append((name, round(acc)))
            i = 0
            for name, upto in quotas:
                while i < upto:
                    out[bad[i]] = NodeBehavior(Behavior(name))
                    i += 1
        if cfg.dos_rate > 0:
            flooder = max(self.pool)
            out[flooder] = NodeBehavior(Behavior.DOS_FLOODER, cfg.dos_rate)
        return out

    def _fund_flooder(self, balances: dict[str, int]) -> list[str]:
        """Give the flooder ``dos_senders`` funded identities inside the target shard."""
        cfg = self.cfg
        if cfg.dos_rate <= 0:
            return []
        shard = self.table.shards[cfg.dos_target % len(self.table.shards)]
        names: list[str] = []
        i = 0
        while len(names) < cfg.dos_senders:
            name = f"flood{i}"
            if account_shard(name, self.table) == shard:
                names.append(name)
                balances[name] = SPAM_FUNDS
            i += 1
        return names

    def _install(self, st: ShardState, committee: ValidatorSet) -> ShardRuntime:
        rt = ShardRuntime(self, st, committee, self.epoch)
        self.shards[st.shard] = rt
        for n in committee.members:
            self.node_shard[n] = st.shard
        return rt

    def _root_ok(self, shard: int, height: int, root: bytes) -> bool:
        rt = self.shards.get(shard)
        if rt is None or not 0 <= height < len(rt.state.chain):
            return False
        return rt.state.chain[height].state_root == root

    # -- driver ----------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        for req in self.requests:
            self.sim.schedule(req.at, "client", ("submit", req))
        for rt in self._runtimes():
            for n in sorted(rt.replicas):
                self._begin_height(rt, rt.replicas[n], 0)
                self._settle(rt, rt.replicas[n], 0)
        for n in sorted(self._behaviors):
            b = self._behaviors[n]
            if b.kind is Behavior.DOS_FLOODER and b.rate > 0:
                self.sim.schedule(0, n, ("spam", 0))
        if cfg.epoch_length > 0:
            k = 1
            while k * cfg.epoch_length <= cfg.duration:
                at = k * cfg.epoch_length
                self.sim.schedule(max(0, at - cfg.lock_ttl - cfg.t_block), "engine", ("barrier",))
                self.sim.schedule(at, "engine", ("epoch", k))
                k += 1
        until = cfg.duration + cfg.drain_limit if cfg.drain else cfg.duration
        self.sim.run(self._dispatch, until=until)
        quiescent = len(self.sim) == 0
        end = self.sim.now
        for rt in self._runtimes():
            self.trace.add(end, rt.shard, "final", "",
                           {"balances": {a: rt.state.balances[a] for a in rt.state.accounts},
                            "burned": rt.state.burned, "height": rt.state.height})
        faults = 0
        for rt in self._runtimes():
            for rep in rt.replicas.values():
                faults += len(rep.faults)
        return RunResult(cfg, self.records, {s: rt.state for s, rt in self.shards.items()},
                         self.table, self.genesis_total, self.trace, end, self.sim.executed,
                         dict(sorted(self.messages.items())),
                         len(self.rounds), list(self.rounds),
                         self.epoch_rows, self.escalations, faults, self.rate_limited,
                         self.genesis_node_map,
                         {s: rt.members for s, rt in sorted(self.shards.items())}, quiescent)

    def _runtimes(self) -> list[ShardRuntime]:
        return [self.shards[s] for s in sorted(self.shards)]

    def _dispatch(self, now: int, target, payload) -> None:
        kind = payload[0]
        if kind == "msg":
            self._on_msg(now, target, payload)
        elif kind == "xmsg":
            self._on_xmsg(now, target[1], payload)
        elif kind == "propose":
            self._on_propose(now, target, payload)
        elif kind == "timeout":
            self._on_timeout(now, target, payload)
        elif kind == "submit":
            self._on_submit(now, payload[1])
        elif kind == "wake":
            if payload[1] == self.epoch:
                rt = self.shards.get(target[1])
                if rt is not None:
                    self._wake(rt, now)
        elif kind == "spam":
            self._on_spam(now, target, payload[1])
        elif kind == "barrier":
            self.barrier = True
        elif kind == "epoch":
            self._on_epoch(now, payload[1])

    # -- consensus plumbing --------------------------------------------------

    def _replica(self, node: int, epoch: int, shard: int) -> tuple[ShardRuntime, IbftReplica] | None:
        if epoch != self.epoch or self.node_shard.get(node) != shard:
            return None
        rt = self.shards.get(shard)
        if rt is None:
            return None
        rep = rt.replicas.get(node)
        return (rt, rep) if rep is not None else None

    def _on_msg(self, now, node, payload) -> None:
        _, epoch, m = payload
        found = self._replica(node, epoch, m.shard)
        if found is None:
            return
        rt, rep = found
        out, _ = rep.handle(m, now)
        self._send(rt, node, out)
        self._settle(rt, rep, now)

    def _on_timeout(self, now, node, payload) -> None:
        _, epoch, shard, height, rnd = payload
        found = self._replica(node, epoch, shard)
        if found is None:
            return
        rt, rep = found
        if rep.height != height or rep.round != rnd or rep.state.deadline != now:
            return
        out, escalate = rep.on_timeout(now)
        self.trace.add(now, node, "round_change", "", {"s": shard, "h": height, "r": rep.round})
        if escalate and rep.failed_rounds == self.cfg.r_max:
            self.escalations += 1
            self.trace.add(now, node, "escalate", "", {"s": shard, "h": height})
        self._send(rt, node, out)
        self._settle(rt, rep, now)

    def _on_propose(self, now, node, payload) -> None:
        _, epoch, shard, height, rnd = payload
        found = self._replica(node, epoch, shard)
        if found is None:
            return
        rt, rep = found
        if rep.height == height and rep.round == rnd:
            self._try_propose(rt, rep, now)
            self._settle(rt, rep, now)

    def _try_propose(self, rt: ShardRuntime, rep: IbftReplica, now: int) -> None:
        req = rep.proposal_request()
        if req is None:
            return
        rnd, just, forced = req
        block = forced if forced is not None else self._form(rt, now, rep.node)
        b = self.behavior(rep.node).kind
        if b is Behavior.INVALID:
            block = dataclasses.replace(block, size_bytes=self.cfg.block_limit + 1)
        elif b is Behavior.EQUIVOCATE:
            twin = dataclasses.replace(block, timestamp=block.timestamp + 1)
            self.blocks[twin.digest] = twin
            rt.twins[block.digest] = twin
        self.blocks[block.digest] = block
        self.trace.add(now, rep.node, "propose", block.short(),
                       {"s": rt.shard, "h": block.height, "r": rnd, "n": len(block.txs)})
        out, _ = rep.propose(block, now, just)
        self._send(rt, rep.node, out)

    def _settle(self, rt: ShardRuntime, rep: IbftReplica, now: int) -> None:
        """Finalize and advance as far as possible, then fix up timers."""
        while rep.state.phase is Phase.COMMITTED:
            blk = rep.finalized[rep.height]
            if self.behavior(rep.node).follows_consensus:
                self._on_finalized(rt, rep, blk, now)
            out, _ = rep.advance(now)
            self._send(rt, rep.node, out)
            if rep.state.phase is not Phase.COMMITTED:
                self._begin_height(rt, rep, now)
        if rep.round > 0 and rep.ctx.leader(rep.height, rep.round) == rep.node:
            self._try_propose(rt, rep, now)
            if rep.state.phase is Phase.COMMITTED:
                return self._settle(rt, rep, now)
        d = rep.state.deadline
        if d is not None and rt.timer_at.get(rep.node) != d:
            rt.timer_at[rep.node] = d
            self.sim.schedule(d, rep.node, ("timeout", self.epoch, rt.shard, rep.height, rep.round))

    def _begin_height(self, rt: ShardRuntime, rep: IbftReplica, now: int) -> None:
        """Start the next height when there is work or a peer already started,
        so a committee never splits into running and idle halves."""
        running = any(r is not rep and r.height == rep.height and r.state.deadline is not None
                      for r in rt.replicas.values())
        if not (running or rt.has_work(now)):
            rt.idle[rep.node] = rep.height
            return
        rt.idle.pop(rep.node, None)
        self._start(rt, rep, now)
        for node in sorted(rt.idle):
            if rt.idle[node] == rep.height:
                del rt.idle[node]
                peer = rt.replicas[node]
                if peer.state.phase is not Phase.COMMITTED and peer.state.deadline is None:
                    self._start(rt, peer, now)
                    self._settle(rt, peer, now)

    def _start(self, rt: ShardRuntime, rep: IbftReplica, now: int) -> None:
        start = max(now, rt.state.head.timestamp + self.cfg.t_block)
        rep.arm(start)
        if rep.ctx.leader(rep.height, 0) == rep.node:
            self.sim.schedule(start, rep.node, ("propose", self.epoch, rt.shard, rep.height, 0))

    def _wake(self, rt: ShardRuntime, now: int) -> None:
        if not rt.idle or not rt.has_work(now):
            return
        idle, rt.idle = rt.idle, {}
        for node in sorted(idle):
            rep = rt.replicas[node]
            if rep.height == idle[node] and rep.state.phase is not Phase.COMMITTED \
                    and rep.state.deadline is None:
                self._start(rt, rep, now)
                self._settle(rt, rep, now)

    def _send(self, rt: ShardRuntime, node: int, out: list) -> None:
        if not out:
            return
        b = self.behavior(node).kind
        peers = [m for m in rt.members if m != node]
        extra = self.cfg.tau - 1 if b is Behavior.STALLER else 0
        for _, msg in out:
            name = type(msg).__name__
            self.messages[name] = self.messages.get(name, 0) + len(peers)
            if b is Behavior.EQUIVOCATE and not isinstance(msg, RoundChange):
                half = len(peers) // 2
                alt = self._twin_msg(rt, msg)
                for i, p in enumerate(peers):
                    self._deliver(node, p, alt if i >= half else msg, extra)
            else:
                for p in peers:
                    self._deliver(node, p, msg, extra)

    def _twin_msg(self, rt: ShardRuntime, msg):
        if isinstance(msg, PrePrepare):
            twin = rt.twins.get(msg.block.digest)
            return dataclasses.replace(msg, block=twin) if twin is not None else msg
        fake = sha256d(DOMAIN_BLOCK, msg.digest + b"equivocation")
        twin = rt.twins.get(msg.digest)
        return dataclasses.replace(msg, digest=twin.digest if twin is not None else fake)

    def _deliver(self, src: int, dst: int, msg, extra: int = 0) -> None:
        net = self.net
        if net.drop_rate and self.net_rng.random() < net.drop_rate:
            return
        if net.severed(src, dst):
            return
        lat = net.latency.sample(self.net_rng) + extra
        self.sim.schedule(self.sim.now + lat, dst, ("msg", self.epoch, msg))

    # -- block formation -------------------------------------------------

    def _form(self, rt: ShardRuntime, ts: int, proposer: int) -> Block:
        cfg = self.cfg
        limit = cfg.block_limit
        scratch = rt.state.copy()
        expire_locks(scratch, ts)
        size = cfg.header_bytes
        records: list[tuple[int, bool]] = []
        credit_txs: list[Transaction] = []
        receipts: list[ProofMessage] = []
        txs: list[Transaction] = []
        full = False
        for tid, (ok, _) in sorted(rt.decisions.items(), key=lambda kv: kv[1][1]):
            if size + COMMIT_RECORD_BYTES > limit:
                full = True
                break
            out, inc = scratch.outgoing.get(tid), scratch.incoming.get(tid)
            if out is not None and out.status == "locked":
                (source_commit if ok else source_abort)(scratch, tid)
            elif inc is not None and inc.status == "staged":
                (dest_commit if ok else dest_abort)(scratch, tid)
            else:
                if out is not None or inc is not None:
                    del rt.decisions[tid]
                continue
            records.append((tid, ok))
            size += COMMIT_RECORD_BYTES
        if not full:
            for tid, ce in sorted(rt.credits.items(), key=lambda kv: kv[1].seq):
                if ce.not_before > ts:
                    continue
                if size + cfg.tx_bytes > limit:
                    full = True
                    break
                res = stage_credit(scratch, ce.msg.tx, ts, ttl=cfg.lock_ttl, mode=cfg.locking)
                if isinstance(res, Acquired):
                    credit_txs.append(ce.msg.tx)
                    receipts.append(ce.msg)
                    size += cfg.tx_bytes
                else:
                    self._backoff_credit(rt, ce, ts)
        if not full:
            for e in sorted(rt.mempool.values(), key=lambda e: (-e.tx.fee, e.tx.id)):
                if e.not_before > ts:
                    continue
                if size + cfg.tx_bytes > limit:
                    break
                tx = e.tx
                if tx.kind is TxKind.INTRA:
                    if scratch.try_apply_intra(tx):
                        txs.append(tx)
                        size += cfg.tx_bytes
                    elif not (scratch.is_locked(tx.sender) or scratch.is_locked(tx.receiver)):
                        self._abort(rt, e, "insufficient", ts)
                    continue
                if self.barrier:
                    continue
                res = lock_for_transfer(scratch, tx, ts, ttl=cfg.lock_ttl, mode=cfg.locking)
                if isinstance(res, Acquired):
                    txs.append(tx)
                    size += cfg.tx_bytes
                elif isinstance(res, Aborted):
                    self._abort(rt, e, res.reason, ts)
                else:
                    self._backoff_tx(rt, e, ts)
        parent = rt.state.head
        prov = Block(rt.shard, parent.height + 1, parent.digest, tuple(credit_txs + txs),
                     b"", proposer, size, ts, tuple(records), tuple(receipts))
        final = rt.state.copy()
        try:
            effects = execute_block(final, prov, self.exec_cfg, check_root=False)
        except BlockRejected as e:
            raise InvariantViolation(f"leader formed an inapplicable block: {e}") from e
        block = dataclasses.replace(prov, state_root=final.root)
        rt.exec_cache[block.digest] = (final, effects)
        rt.valid[block.digest] = True
        return block

    def _backoff_tx(self, rt: ShardRuntime, e: PoolEntry, ts: int) -> None:
        e.attempt += 1
        rec = self.records.get(e.tx.id)
        if rec is not None:
            rec.retries = e.attempt
        d = retry_schedule(e.attempt, e.tx.fee, self.retry_rng, base=self.cfg.backoff_base,
                           fee_weight=self.cfg.fee_weight, max_attempts=self.cfg.max_attempts)
        if d is None:
            self._abort(rt, e, "lock_conflict", ts)
        else:
            e.not_before = ts + d

    def _backoff_credit(self, rt: ShardRuntime, ce: CreditEntry, ts: int) -> None:
        ce.attempt += 1
        tx = ce.msg.tx
        d = retry_schedule(ce.attempt, tx.fee, self.retry_rng, base=self.cfg.backoff_base,
                           fee_weight=self.cfg.fee_weight, max_attempts=self.cfg.max_attempts)
        if d is None:
            del rt.credits[tx.id]
            self._xsend(rt.shard, tx.source_shard, ("ack", Ack(tx.id, Vote.REJECTED, "Conflict")))
        else:
            ce.not_before = ts + d

    def _abort(self, rt: ShardRuntime, e: PoolEntry, reason: str, now: int) -> None:
        rt.mempool.pop(e.tx.id, None)
        rec = self.records.get(e.tx.id)
        if rec is not None and not rec.aborted and rec.final_at is None:
            rec.aborted = reason
        self.trace.add(now, rt.shard, "tx_abort", "", {"id": e.tx.id, "why": reason})

    # -- finalization ----------------------------------------------------

    def _on_finalized(self, rt: ShardRuntime, rep: IbftReplica, blk: Block, now: int) -> None:
        st = rt.state
        if blk.height <= st.height:
            if st.chain[blk.height].digest != blk.digest:
                raise InvariantViolation(
                    f"shard {rt.shard} height {blk.height}: conflicting finalized blocks")
            return
        if blk.height != st.height + 1 or blk.parent_hash != st.head.digest:
            raise InvariantViolation(f"shard {rt.shard}: finalized block does not extend the chain")
        if blk.digest not in rt.exec_cache and not rt._check(blk):
            raise InvariantViolation(f"shard {rt.shard}: finalized an invalid block")
        new_state, effects = rt.exec_cache[blk.digest]
        new_state.chain.append(blk)
        rt.state = new_state
        rt.exec_cache.clear()
        rt.valid.clear()
        self.rounds.append(rep.round)
        for p in rt.members:
            self.trackers[p].participated(p in rep.state.commits.get(blk.digest, ()))
        for tx in blk.txs:
            rt.mempool.pop(tx.id, None)
            rt.credits.pop(tx.id, None)
        for tid, _ in blk.commits:
            rt.decisions.pop(tid, None)
        self.trace.add(now, rt.shard, "block", blk.short(), {
            "s": rt.shard, "h": blk.height, "ts": blk.timestamp, "r": rep.round,
            "x": [[t, ok] for t, ok in blk.commits],
            "t": [[t.id, t.sender, t.receiver, t.amount, t.fee, t.source_shard, t.dest_shard]
                  for t in blk.txs],
        })
        for eff in effects:
            self._effect(rt, blk, eff, now)

    def _effect(self, rt: ShardRuntime, blk: Block, eff: tuple, now: int) -> None:
        kind, tx = eff[0], eff[1]
        key = hash_key
        if kind == "intra":
            rt.load += 1
            rt.histogram.append(key(tx.sender))
            self._finalize_tx(tx, now)
        elif kind == "locked":
            rt.load += 2
            rt.histogram += [key(tx.sender)] * 2
            rec = self.records.get(tx.id)
            if rec is not None:
                rec.locked_at = now
            msg = proof_of_lock(rt.state, tx)
            self._xsend(rt.shard, tx.dest_shard, ("proof", msg))
            self.sim.schedule(max(now, blk.timestamp + self.cfg.lock_ttl), ("shard", rt.shard),
                              ("wake", self.epoch))
        elif kind == "staged":
            rt.load += 2
            rt.histogram += [key(tx.receiver)] * 2
            extra = 0
            if self._injected(tx.id, "expiry", self.cfg.inject_expiry):
                extra = self.cfg.lock_ttl + self.cfg.t_block
            self._xsend(rt.shard, tx.source_shard, ("ack", Ack(tx.id, Vote.VALIDATED)), extra)
            if tx.id in rt.decided:
                self._queue_decision(rt, tx.id, rt.decided[tx.id])
        elif kind == "src_decided":
            ok = eff[2]
            self._xsend(rt.shard, tx.dest_shard, ("decision", tx.id, ok))
            if not ok:
                self._mark_abort(tx.id, "rejected", now)
        elif kind == "expired":
            self._xsend(rt.shard, tx.dest_shard, ("decision", tx.id, False))
            self._mark_abort(tx.id, "timeout", now)
        elif kind == "dst_decided":
            if eff[2]:
                self._finalize_tx(tx, now)

    def _finalize_tx(self, tx: Transaction, now: int) -> None:
        rec = self.records.get(tx.id)
        if rec is not None:
            if rec.final_at is not None or rec.aborted:
                raise InvariantViolation(f"tx {tx.id} settled twice")
            rec.final_at = now

    def _mark_abort(self, tid: int, reason: str, now: int) -> None:
        rec = self.records.get(tid)
        if rec is not None and not rec.aborted:
            rec.aborted = reason

    def _injected(self, tid: int, what: str, rate: float) -> bool:
        if rate <= 0:
            return False
        h = hashlib.sha256(f"{self.cfg.seed}|{what}|{tid}".encode()).digest()
        return int.from_bytes(h[:8], "big") / 2**64 < rate

    # -- cross-shard messages ----------------------------------------------

    def _xsend(self, src: int, dst: int, body: tuple, extra: int = 0) -> None:
        lat = self.net.latency.sample(self.net_rng) + extra
        self.in_flight += 1
        self.messages["CrossShard"] = self.messages.get("CrossShard", 0) + 1
        self.sim.schedule(self.sim.now + lat, ("shard", dst), ("xmsg", self.epoch) + body)

    def _on_xmsg(self, now: int, shard: int, payload: tuple) -> None:
        self.in_flight -= 1
        _, epoch, kind = payload[:3]
        if epoch != self.epoch:
            raise InvariantViolation("cross-shard message crossed an epoch boundary")
        rt = self.shards[shard]
        if kind == "proof":
            msg: ProofMessage = payload[3]
            tx = msg.tx
            key = (tx.source_shard, tx.sender)
            reason = ""
            if msg.source_height < rt.seen_heights.get(key, -1):
                reason = "StaleProof"
            else:
                rt.seen_heights[key] = msg.source_height
                reason = check_proof(msg, self._root_ok)
            if not reason and self._injected(tx.id, "reject", self.cfg.inject_reject):
                reason = "Forced"
            if reason or tx.id in rt.decided:
                self._xsend(shard, tx.source_shard, ("ack", Ack(tx.id, Vote.REJECTED, reason)))
                return
            self.seq += 1
            rt.credits[tx.id] = CreditEntry(msg, self.seq, 0, now)
            self._wake(rt, now)
        elif kind == "ack":
            ack: Ack = payload[3]
            out = rt.state.outgoing.get(ack.tx_id)
            if out is None or out.status != "locked" or ack.tx_id in rt.decisions:
                return
            self._queue_decision(rt, ack.tx_id, ack.ok)
        elif kind == "decision":
            tid, ok = payload[3], payload[4]
            rt.decided[tid] = ok
            if tid in rt.credits:
                del rt.credits[tid]
                return
            inc = rt.state.incoming.get(tid)
            if inc is not None and inc.status == "staged":
                self._queue_decision(rt, tid, ok)

    def _queue_decision(self, rt: ShardRuntime, tid: int, ok: bool) -> None:
        if tid in rt.decisions:
            return
        self.seq += 1
        rt.decisions[tid] = (ok, self.seq)
        self._wake(rt, self.sim.now)

    # -- clients -----------------------------------------------------------

    def _route(self, req: TxRequest, tid: int | None = None, at: int | None = None) -> Transaction:
        s = account_shard(req.sender, self.table)
        d = account_shard(req.receiver, self.table)
        return make_tx(req.id if tid is None else tid, req.sender, req.receiver, req.amount,
                       req.fee, s, d, req.at if at is None else at)

    def _admit(self, tx: Transaction, now: int, spam: bool = False) -> bool:
        if self.limiter is not None and not self.limiter.admit(tx.sender, now):
            self.rate_limited += 1
            return False
        rt = self.shards[tx.source_shard]
        self.seq += 1
        rt.mempool[tx.id] = PoolEntry(tx, self.seq, spam=spam)
        self.records[tx.id] = TxRecord(tx.id, tx.kind.name.lower(), tx.submitted_at, spam)
        self._wake(rt, now)
        return True

    def _on_submit(self, now: int, req: TxRequest) -> None:
        self._admit(self._route(req), now)

    def _on_spam(self, now: int, node: int, k: int) -> None:
        """One flooding tick: ``rate`` junk transfers per tick (or one every
        ``1 / rate`` ticks) aimed at the target shard."""
        b = self.behavior(node)
        if now >= self.cfg.duration or b.rate <= 0:
            return
        names = self.spam_accounts
        fee = self.cfg.fee_max + 1
        burst = max(1, int(b.rate))
        for j in range(burst):
            i = (k + j) % len(names)
            sender, receiver = names[i], names[(i + 1) % len(names)]
            s, d = account_shard(sender, self.table), account_shard(receiver, self.table)
            tid = (1 << 40) + (node << 28) + k + j
            self._admit(make_tx(tid, sender, receiver, 1, fee, s, d, now), now, spam=True)
        gap = max(1, round(1 / b.rate)) if b.rate < 1 else 1
        self.sim.schedule(now + gap, node, ("spam", k + burst))

    # -- epochs ------------------------------------------------------------

    def _busy(self) -> bool:
        if self.in_flight:
            return True
        for rt in self.shards.values():
            if rt.credits or rt.decisions or rt.state.lock_table:
                return True
            if any(o.status == "locked" for o in rt.state.outgoing.values()):
                return True
            if any(i.status == "staged" for i in rt.state.incoming.values()):
                return True
        return False

    def _on_epoch(self, now: int, k: int) -> None:
        if self._busy():
            self.sim.schedule(now + self.cfg.t_block, "engine", ("epoch", k))
            return
        cfg = self.cfg
        workloads = {s: rt.load for s, rt in self.shards.items()}
        hist = {s: rt.histogram for s, rt in self.shards.items()}
        plan = plan_reconfiguration(workloads, self.table, self.epoch_cfg, hist,
                                    max_shards=cfg.n_nodes // max(cfg.v_min, cfg.committee_size))
        try:
            seed = self._beacon(now)
        except BeaconFailure:
            self.sim.schedule(now + 4 * self.net.latency.bound, "engine", ("epoch", k))
            return
        net = NetworkState(self.epoch, self.table, {s: rt.state for s, rt in self.shards.items()},
                           {s: rt.committee for s, rt in self.shards.items()}, self.pool)
        new, applied = transition_epoch(net, plan, seed, self.epoch_cfg)
        pending = [e for rt in self._runtimes() for e in
                   sorted(rt.mempool.values(), key=lambda e: e.seq)]
        before = {s: workloads[s] for s in sorted(workloads)}
        hist_all = [x for s in sorted(hist) for x in hist[s]]
        self.epoch += 1
        self.seed = seed
        self.table = new.table
        self.shards, self.node_shard = {}, {}
        self.barrier = False
        for s in new.table.shards:
            self._install(new.shards[s], new.committees[s])
        for e in pending:
            tx = e.tx
            s = account_shard(tx.sender, self.table)
            d = account_shard(tx.receiver, self.table)
            moved = make_tx(tx.id, tx.sender, tx.receiver, tx.amount, tx.fee, s, d,
                            tx.submitted_at)
            self.shards[s].mempool[tx.id] = PoolEntry(moved, e.seq, spam=e.spam)
            rec = self.records.get(tx.id)
            if rec is not None:
                rec.kind = moved.kind.name.lower()
        after_rebucket = rebucket(hist_all, self.table) if hist_all else {}
        row = {
            "epoch": self.epoch - 1, "tick": now,
            "workload": {str(s): w for s, w in before.items()},
            "sigma_before": float(skew_ratio(list(before.values()))) if sum(before.values()) else 0.0,
            "sigma_rebucketed": (float(skew_ratio(list(after_rebucket.values())))
                                 if after_rebucket else 0.0),
            "actions": applied.describe(),
            "ranges": [list(r) for r in self.table.rows()],
            "committees": {str(s): hashlib.sha256(repr(new.committees[s].members).encode())
                           .hexdigest()[:16] for s in sorted(new.committees)},
            "beacon": seed.value,
        }
        self.epoch_rows.append(row)
        self.trace.add(now, "-", "epoch", "", row)
        for rt in self._runtimes():
            for n in sorted(rt.replicas):
                self._begin_height(rt, rt.replicas[n], now)
                self._settle(rt, rt.replicas[n], now)

    def _beacon(self, now: int) -> Randomness:
        cfg = self.cfg
        scores = [(n, self.trackers[n].score(cfg.w1, cfg.w2).value) for n in self.pool]
        k = min(cfg.beacon_participants, len(scores))
        parts = weighted_select(scores, k, self.seed)
        strategies = {}
        for p in parts:
            if self.behavior(p).kind in (Behavior.REVEAL_WITHHOLDER, Behavior.SILENT):
                strategies[p] = Withhold()
        mode = AggMode.XOR if cfg.beacon_mode == "xor" else AggMode.AVERAGE
        transcript: list = []
        out = run_round(parts, strategies, self.streams.fork(f"beacon-{self.epoch}"), mode=mode,
                        network=self.net, round_id=self.epoch + 1, trackers=self.trackers,
                        transcript=transcript)
        self.trace.add(now, "-", "beacon", "", transcript[0])
        return out


def run_engine(cfg: ScenarioConfig, **kw) -> RunResult:
    return Engine(cfg, **kw).run()
