"""Cross-shard transfers: account locks, proof-of-lock, validation, decision
and rollback, retry backoff and lock expiry, plus the deterministic block
executor that applies all of it inside consensus-ordered blocks."""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .core import (
    SHARD_LOCK,
    Block,
    DomainError,
    Incoming,
    InvariantViolation,
    LockRecord,
    MerkleProof,
    Outgoing,
    ShardState,
    Transaction,
    TxKind,
    decode_leaf,
    encode,
    merkle_verify,
)

LOCK_TTL = 200
BACKOFF_BASE = 4
MAX_ATTEMPTS = 6
FEE_WEIGHT = 1.0
FEE_SCALE = 10
MAX_DELAY = 256

FINE = "fine"
FULL = "full"


class RoutingError(InvariantViolation):
    """An operation touched an account the shard does not own."""


class XPhase(enum.Enum):
    LOCKING = "locking"
    VALIDATING = "validating"
    COMMITTING = "committing"
    FINALIZED = "finalized"
    ABORTED = "aborted"


class Vote(enum.Enum):
    VALIDATED = "validated"
    REJECTED = "rejected"


@dataclass(frozen=True)
class Acquired:
    locks: tuple[LockRecord, ...]


@dataclass(frozen=True)
class Conflict:
    holder: int


@dataclass(frozen=True)
class Aborted:
    reason: str


@dataclass(frozen=True)
class Ack:
    tx_id: int
    vote: Vote
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.vote is Vote.VALIDATED


@dataclass(frozen=True)
class ProofMessage:
    """(T, P_T, root): a transfer plus a proof that its sender's leaf, lock
    flag set, sits under a finalized source root."""

    tx: Transaction
    proof: MerkleProof
    root: bytes
    leaf: bytes
    source_height: int = 0

    def encode(self) -> bytes:
        return encode(self.tx.encode(), self.proof.encode(), self.root, self.leaf,
                      (self.source_height, 8))


@dataclass
class CrossShardTx:
    tx: Transaction
    phase: XPhase = XPhase.LOCKING
    proof: ProofMessage | None = None
    acks: dict[int, Vote] = field(default_factory=dict)
    attempt: int = 0
    batch_id: int | None = None
    stamps: dict[str, int] = field(default_factory=dict)


# -- locks -------------------------------------------------------------------

def _holder_conflict(state: ShardState, keys: Sequence[str], tx_id: int) -> int | None:
    for k in keys:
        rec = state.lock_table.get(k)
        if rec is not None and rec.holder != tx_id:
            return rec.holder
    return None


def acquire_locks(state: ShardState, accounts: Iterable[str], tx_id: int, now: int, *,
                  ttl: int = LOCK_TTL, mode: str = FINE, pinned: bool = False
                  ) -> Acquired | Conflict:
    """All-or-nothing lock acquisition; ``mode=FULL`` also takes the shard lock."""
    accounts = sorted(set(accounts))
    for a in accounts:
        if not state.owns(a):
            raise RoutingError(f"shard {state.shard} does not own account {a!r}")
    keys = accounts + ([SHARD_LOCK] if mode == FULL else [])
    holder = _holder_conflict(state, keys, tx_id)
    if holder is not None:
        return Conflict(holder)
    made = []
    for k in keys:
        rec = LockRecord(k, tx_id, now, now + ttl, mode, pinned)
        state.lock_table[k] = rec
        made.append(rec)
        if k != SHARD_LOCK:
            state.touch(k)
    return Acquired(tuple(made))


def release_locks(state: ShardState, tx_id: int) -> list[LockRecord]:
    out = [rec for k, rec in state.lock_table.items() if rec.holder == tx_id]
    for rec in out:
        del state.lock_table[rec.account]
        if rec.account != SHARD_LOCK:
            state.touch(rec.account)
    return out


def expire_locks(state: ShardState, now: int) -> list[LockRecord]:
    """Drop every unpinned lock with ``expires_at <= now``.

    Source-side transfers holding an expired lock are aborted and all of
    their remaining locks released.
    """
    dead = [rec for rec in state.lock_table.values()
            if not rec.pinned and rec.expires_at <= now]
    if not dead:
        return []
    released = []
    for tid in sorted({rec.holder for rec in dead}):
        released += release_locks(state, tid)
        out = state.outgoing.get(tid)
        if out is not None and out.status == "locked":
            out.status = "aborted"
    return released


# -- phase 1: lock and prove -------------------------------------------------

def lock_for_transfer(state: ShardState, tx: Transaction, now: int, *, ttl: int = LOCK_TTL,
                      mode: str = FINE) -> Acquired | Conflict | Aborted:
    if tx.kind is not TxKind.CROSS or tx.source_shard != state.shard:
        raise RoutingError(f"tx {tx.id} is not an outgoing transfer of shard {state.shard}")
    if not state.owns(tx.sender):
        raise RoutingError(f"shard {state.shard} does not own sender {tx.sender!r}")
    if state.balances[tx.sender] < tx.amount + tx.fee:
        return Aborted("insufficient")
    res = acquire_locks(state, [tx.sender], tx.id, now, ttl=ttl, mode=mode)
    if isinstance(res, Acquired):
        state.outgoing[tx.id] = Outgoing(tx, "locked")
    return res


def proof_of_lock(state: ShardState, tx: Transaction) -> ProofMessage:
    i = state.index[tx.sender]
    return ProofMessage(tx, state.tree.prove(i), state.root, state.leaf(tx.sender), state.height)


def initiate(tx: Transaction, state: ShardState, now: int, *, ttl: int = LOCK_TTL,
             mode: str = FINE) -> ProofMessage | Conflict | Aborted:
    """Lock the sender and return the proof-of-lock message for the destination."""
    res = lock_for_transfer(state, tx, now, ttl=ttl, mode=mode)
    if not isinstance(res, Acquired):
        return res
    return proof_of_lock(state, tx)


# -- phase 2: validate at the destination -------------------------------------

def check_proof(msg: ProofMessage, root_ok: Callable[[int, int, bytes], bool] | None = None
                ) -> str:
    """Empty string when the proof-of-lock holds, else a rejection reason."""
    tx = msg.tx
    if not merkle_verify(msg.proof, msg.leaf, msg.root):
        return "BadProof"
    if root_ok is not None and not root_ok(tx.source_shard, msg.source_height, msg.root):
        return "BadProof"
    try:
        account, balance, locked = decode_leaf(msg.leaf)
    except (DomainError, UnicodeDecodeError):
        return "BadProof"
    if account != tx.sender or not locked:
        return "NotLocked"
    if balance < tx.amount + tx.fee:
        return "Insufficient"
    return ""


def stage_credit(state: ShardState, tx: Transaction, now: int, *, ttl: int = LOCK_TTL,
                 mode: str = FINE) -> Acquired | Conflict:
    """Pin the receiver lock and hold the credit aside until the decision."""
    if not state.owns(tx.receiver):
        raise RoutingError(f"shard {state.shard} does not own receiver {tx.receiver!r}")
    res = acquire_locks(state, [tx.receiver], tx.id, now, ttl=ttl, mode=mode, pinned=True)
    if isinstance(res, Acquired):
        state.incoming[tx.id] = Incoming(tx, "staged")
    return res


def validate_and_execute(msg: ProofMessage, state: ShardState, now: int, *,
                         ttl: int = LOCK_TTL, mode: str = FINE,
                         root_ok: Callable[[int, int, bytes], bool] | None = None,
                         seen_heights: dict[tuple[int, str], int] | None = None) -> Ack:
    """Destination half of the validation phase, as one step."""
    tx = msg.tx
    if seen_heights is not None:
        key = (tx.source_shard, tx.sender)
        if msg.source_height < seen_heights.get(key, -1):
            return Ack(tx.id, Vote.REJECTED, "StaleProof")
        seen_heights[key] = msg.source_height
    reason = check_proof(msg, root_ok)
    if reason:
        return Ack(tx.id, Vote.REJECTED, reason)
    res = stage_credit(state, tx, now, ttl=ttl, mode=mode)
    if isinstance(res, Conflict):
        return Ack(tx.id, Vote.REJECTED, "Conflict")
    return Ack(tx.id, Vote.VALIDATED)


def decide(votes: Iterable[bool]) -> bool:
    """Commit iff every shard validated: C(T) is the product of the votes."""
    out = True
    for v in votes:
        out = out and bool(v)
    return out


# -- phase 3: decision --------------------------------------------------------

def source_commit(state: ShardState, tx_id: int) -> None:
    out = state.outgoing.get(tx_id)
    if out is None or out.status != "locked":
        raise DomainError(f"tx {tx_id}: no locked outgoing transfer to commit")
    tx = out.tx
    cost = tx.amount + tx.fee
    if state.balances[tx.sender] < cost:
        raise InvariantViolation(f"tx {tx_id}: locked sender cannot cover {cost}")
    state.balances[tx.sender] -= cost
    state.burned += tx.fee
    state.transfer_out += tx.amount
    release_locks(state, tx_id)
    state.touch(tx.sender)
    out.status = "committed"


def source_abort(state: ShardState, tx_id: int) -> None:
    release_locks(state, tx_id)
    out = state.outgoing.get(tx_id)
    if out is not None and out.status == "locked":
        out.status = "aborted"


def dest_commit(state: ShardState, tx_id: int) -> None:
    inc = state.incoming.get(tx_id)
    if inc is None or inc.status != "staged":
        raise DomainError(f"tx {tx_id}: no staged credit to apply")
    tx = inc.tx
    state.balances[tx.receiver] += tx.amount
    state.transfer_in += tx.amount
    release_locks(state, tx_id)
    state.touch(tx.receiver)
    inc.status = "credited"


def dest_abort(state: ShardState, tx_id: int) -> None:
    release_locks(state, tx_id)
    inc = state.incoming.get(tx_id)
    if inc is not None and inc.status == "staged":
        inc.status = "aborted"


def finalize(ctx: CrossShardTx, acks: Mapping[int, Vote | Ack], source: ShardState,
             dest: ShardState) -> XPhase:
    """Apply or roll back both legs given every shard's vote."""
    if ctx.phase is not XPhase.COMMITTING:
        raise DomainError(f"finalize from phase {ctx.phase.value}")
    tx = ctx.tx
    needed = (tx.source_shard, tx.dest_shard)
    votes = [getattr(acks.get(s), "vote", acks.get(s)) is Vote.VALIDATED for s in needed]
    ctx.acks = {s: (Vote.VALIDATED if ok else Vote.REJECTED) for s, ok in zip(needed, votes)}
    if decide(votes):
        source_commit(source, tx.id)
        dest_commit(dest, tx.id)
        ctx.phase = XPhase.FINALIZED
    else:
        source_abort(source, tx.id)
        dest_abort(dest, tx.id)
        ctx.phase = XPhase.ABORTED
    return ctx.phase


def retry_schedule(attempt: int, fee: int = 0, rng: random.Random | None = None, *,
                   base: int = BACKOFF_BASE, fee_weight: float = FEE_WEIGHT,
                   fee_scale: int = FEE_SCALE, max_delay: int = MAX_DELAY,
                   max_attempts: int = MAX_ATTEMPTS) -> int | None:
    """Backoff delay in ticks, or ``None`` once the attempts are used up.

    Jitter is drawn from [0.5, 1.5) when ``rng`` is given and is 1 otherwise.
    The fee is normalized against ``fee_scale`` and capped at 1.
    """
    if attempt < 1:
        raise DomainError("attempt counts from 1")
    if attempt > max_attempts:
        return None
    jitter = 1.0 if rng is None else 0.5 + rng.random()
    norm = min(1.0, fee / fee_scale) if fee_scale > 0 else 0.0
    delay = base * (1 << (attempt - 1)) * jitter / (1 + fee_weight * norm)
    return max(1, min(max_delay, round(delay)))


# -- block execution ---------------------------------------------------------

@dataclass
class ExecConfig:
    ttl: int = LOCK_TTL
    mode: str = FINE
    root_ok: Callable[[int, int, bytes], bool] | None = None


class BlockRejected(Exception):
    pass


def execute_block(state: ShardState, block: Block, cfg: ExecConfig,
                  check_root: bool = True) -> list[tuple]:
    """Apply one block's entries to ``state`` in order and list their effects.

    Entries: decision records first (source commit/abort or destination
    credit/rollback), then transactions: intra-shard transfers, outgoing
    locks, and incoming credits backed by a receipt. Any entry that does not
    apply makes the whole block invalid. A proposer forming a block passes
    ``check_root=False`` and adopts the resulting root.
    """
    ts = block.timestamp
    effects: list[tuple] = []
    for rec in expire_locks(state, ts):
        if rec.account != SHARD_LOCK and rec.holder in state.outgoing \
                and state.outgoing[rec.holder].tx.sender == rec.account:
            effects.append(("expired", state.outgoing[rec.holder].tx))
    for tid, ok in block.commits:
        if tid in state.outgoing:
            out = state.outgoing[tid]
            if out.status != "locked":
                raise BlockRejected(f"decision for settled tx {tid}")
            (source_commit if ok else source_abort)(state, tid)
            effects.append(("src_decided", out.tx, ok))
        elif tid in state.incoming:
            inc = state.incoming[tid]
            if inc.status != "staged":
                raise BlockRejected(f"decision for settled credit {tid}")
            (dest_commit if ok else dest_abort)(state, tid)
            effects.append(("dst_decided", inc.tx, ok))
        else:
            raise BlockRejected(f"decision for unknown tx {tid}")
    receipts = {r.tx.id: r for r in block.receipts}
    for tx in block.txs:
        if tx.kind is TxKind.INTRA:
            if tx.source_shard != state.shard or not state.try_apply_intra(tx):
                raise BlockRejected(f"intra tx {tx.id} does not apply")
            effects.append(("intra", tx))
        elif tx.source_shard == state.shard:
            if tx.id in state.outgoing:
                raise BlockRejected(f"tx {tx.id} locked twice")
            res = lock_for_transfer(state, tx, ts, ttl=cfg.ttl, mode=cfg.mode)
            if not isinstance(res, Acquired):
                raise BlockRejected(f"lock for tx {tx.id} failed: {res}")
            effects.append(("locked", tx))
        elif tx.dest_shard == state.shard:
            r = receipts.get(tx.id)
            if r is None or r.tx != tx or check_proof(r, cfg.root_ok):
                raise BlockRejected(f"credit {tx.id} lacks a valid receipt")
            if tx.id in state.incoming:
                raise BlockRejected(f"credit {tx.id} staged twice")
            res = stage_credit(state, tx, ts, ttl=cfg.ttl, mode=cfg.mode)
            if not isinstance(res, Acquired):
                raise BlockRejected(f"credit {tx.id} lock failed")
            effects.append(("staged", tx))
        else:
            raise RoutingError(f"tx {tx.id} does not touch shard {state.shard}")
    for a in (tx.sender for tx in block.txs if tx.source_shard == state.shard):
        if state.balances[a] < 0:
            raise InvariantViolation(f"negative balance for {a}")
    if check_root and state.root != block.state_root:
        raise BlockRejected("state root mismatch")
    return effects


def live_locks(states: Iterable[ShardState]) -> int:
    return sum(len(s.lock_table) for s in states)
