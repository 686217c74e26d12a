"""Ledger primitives: keys, transactions, blocks, per-shard state and Merkle trees.

Every hash in the package goes through :func:`sha256d` with a one-byte domain
prefix so that leaves, interior nodes, keys and commitments can never collide
across domains.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, NewType, Sequence

DOMAIN_LEAF = b"\x00"
DOMAIN_NODE = b"\x01"
DOMAIN_KEY = b"\x02"
DOMAIN_COMMIT = b"\x03"
DOMAIN_BLOCK = b"\x04"
DOMAIN_PRF = b"\x05"

KEY_BITS = 256
KEY_SPACE = 1 << KEY_BITS

TX_BYTES = 256
HEADER_BYTES = 128
COMMIT_RECORD_BYTES = 32

ZERO_HASH = bytes(32)

Key256 = NewType("Key256", int)


class DomainError(ValueError):
    """An operation was called outside its domain."""


class InvariantViolation(RuntimeError):
    """A protocol or ledger invariant was broken; fatal for a run."""


def sha256d(domain: bytes, data: bytes) -> bytes:
    return hashlib.sha256(domain + data).digest()


# -- canonical encoding ------------------------------------------------------

def enc_int(value: int, width: int) -> bytes:
    return int(value).to_bytes(width, "big")


def enc_bytes(data: bytes | str) -> bytes:
    if isinstance(data, str):
        data = data.encode()
    return len(data).to_bytes(4, "big") + data


def encode(*fields: bytes | str | tuple[int, int]) -> bytes:
    """Length-prefixed concatenation; ints are passed as ``(value, width)``."""
    out = bytearray()
    for f in fields:
        if isinstance(f, tuple):
            out += enc_int(*f)
        else:
            out += enc_bytes(f)
    return bytes(out)


def hash_key(data: bytes | str) -> Key256:
    """Map an identifier onto the 256-bit key space."""
    if isinstance(data, str):
        data = data.encode()
    if not data:
        raise DomainError("hash_key needs a non-empty input")
    return Key256(int.from_bytes(sha256d(DOMAIN_KEY, data), "big"))


# -- transactions and blocks -------------------------------------------------

class TxKind(enum.IntEnum):
    INTRA = 0
    CROSS = 1


@dataclass(frozen=True, slots=True)
class Transaction:
    id: int
    sender: str
    receiver: str
    amount: int
    fee: int
    kind: TxKind
    source_shard: int
    dest_shard: int
    submitted_at: int = 0

    def __post_init__(self):
        if self.amount < 0 or self.fee < 0:
            raise DomainError("amount and fee must be non-negative")
        if (self.kind is TxKind.INTRA) != (self.source_shard == self.dest_shard):
            raise DomainError(f"tx {self.id}: kind does not match shard pair")

    def encode(self) -> bytes:
        return encode(
            (self.id, 8), self.sender, self.receiver, (self.amount, 16),
            (self.fee, 16), (int(self.kind), 1), (self.source_shard, 4),
            (self.dest_shard, 4), (self.submitted_at, 8),
        )

    @property
    def hash(self) -> bytes:
        return sha256d(DOMAIN_LEAF, self.encode())


def make_tx(tx_id: int, sender: str, receiver: str, amount: int, fee: int,
            source_shard: int, dest_shard: int, submitted_at: int = 0) -> Transaction:
    kind = TxKind.INTRA if source_shard == dest_shard else TxKind.CROSS
    return Transaction(tx_id, sender, receiver, amount, fee, kind,
                       source_shard, dest_shard, submitted_at)


@dataclass(frozen=True, slots=True)
class Block:
    shard: int
    height: int
    parent_hash: bytes
    txs: tuple[Transaction, ...]
    state_root: bytes
    proposer: int
    size_bytes: int
    timestamp: int = 0
    # batched commit records: (tx id, commit?) for cross-shard decisions
    commits: tuple[tuple[int, bool], ...] = ()
    # proof-of-lock messages backing cross-shard credits in ``txs``
    receipts: tuple = ()
    digest: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [t.id for t in self.txs]
        if len(set(ids)) != len(ids):
            raise DomainError("duplicate transaction id in block")
        body = b"".join(t.hash for t in self.txs)
        body += b"".join(enc_int(i, 8) + (b"\x01" if ok else b"\x00") for i, ok in self.commits)
        body += b"".join(r.encode() for r in self.receipts)
        header = encode(
            (self.shard, 4), (self.height, 8), self.parent_hash, self.state_root,
            (self.proposer + 1, 4), (self.size_bytes, 8), (self.timestamp, 8),
            hashlib.sha256(body).digest(),
        )
        object.__setattr__(self, "digest", sha256d(DOMAIN_BLOCK, header))

    def short(self) -> str:
        return self.digest.hex()[:12]


def block_size(n_txs: int, n_commits: int = 0, header_bytes: int = HEADER_BYTES,
               tx_bytes: int = TX_BYTES) -> int:
    return header_bytes + n_txs * tx_bytes + n_commits * COMMIT_RECORD_BYTES


def verify_chain(chain: Sequence[Block]) -> bool:
    for parent, child in zip(chain, chain[1:]):
        if child.height != parent.height + 1 or child.parent_hash != parent.digest:
            return False
    return True


# -- Merkle trees ------------------------------------------------------------

def leaf_hash(data: bytes) -> bytes:
    return sha256d(DOMAIN_LEAF, data)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256d(DOMAIN_NODE, left + right)


def _levels(hashes: list[bytes]) -> list[list[bytes]]:
    levels = [hashes]
    while len(levels[-1]) > 1:
        cur = levels[-1]
        if len(cur) % 2:
            cur = cur + [cur[-1]]
        levels.append([node_hash(cur[i], cur[i + 1]) for i in range(0, len(cur), 2)])
    return levels


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        raise DomainError("merkle_root of an empty leaf list")
    return _levels([leaf_hash(x) for x in leaves])[-1][0]


LEFT, RIGHT = "L", "R"


@dataclass(frozen=True, slots=True)
class MerkleProof:
    leaf_index: int
    # (sibling hash, side of the sibling relative to the running node)
    siblings: tuple[tuple[bytes, str], ...]

    def encode(self) -> bytes:
        return encode((self.leaf_index, 8), *(h + s.encode() for h, s in self.siblings))


def _prove(levels: list[list[bytes]], index: int) -> MerkleProof:
    sibs = []
    i = index
    for level in levels[:-1]:
        j = i ^ 1
        sib = level[j] if j < len(level) else level[i]
        sibs.append((sib, LEFT if j < i else RIGHT))
        i //= 2
    return MerkleProof(index, tuple(sibs))


def merkle_prove(leaves: Sequence[bytes], index: int) -> MerkleProof:
    if not 0 <= index < len(leaves):
        raise DomainError(f"leaf index {index} out of range for {len(leaves)} leaves")
    return _prove(_levels([leaf_hash(x) for x in leaves]), index)


def merkle_verify(proof: MerkleProof, leaf: bytes, root: bytes) -> bool:
    node = leaf_hash(leaf)
    for sib, side in proof.siblings:
        if side == LEFT:
            node = node_hash(sib, node)
        elif side == RIGHT:
            node = node_hash(node, sib)
        else:
            return False
    return node == root


class MerkleTree:
    """Merkle tree over a fixed leaf count with O(log n) leaf updates."""

    def __init__(self, leaves: Sequence[bytes]):
        if not leaves:
            raise DomainError("MerkleTree needs at least one leaf")
        self.levels = _levels([leaf_hash(x) for x in leaves])

    def copy(self) -> "MerkleTree":
        new = MerkleTree.__new__(MerkleTree)
        new.levels = [list(level) for level in self.levels]
        return new

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    def __len__(self) -> int:
        return len(self.levels[0])

    def update(self, index: int, leaf: bytes) -> None:
        self.levels[0][index] = leaf_hash(leaf)
        i = index
        for depth in range(len(self.levels) - 1):
            level = self.levels[depth]
            left = i - (i % 2)
            a = level[left]
            b = level[left + 1] if left + 1 < len(level) else a
            i //= 2
            self.levels[depth + 1][i] = node_hash(a, b)

    def prove(self, index: int) -> MerkleProof:
        if not 0 <= index < len(self):
            raise DomainError(f"leaf index {index} out of range")
        return _prove(self.levels, index)


# -- per-shard ledger state --------------------------------------------------

@dataclass(frozen=True, slots=True)
class LockRecord:
    account: str
    holder: int
    acquired_at: int
    expires_at: int
    mode: str = "fine"          # "fine" | "full"
    # participant locks taken after a Validated vote wait for the source
    # decision and are never released by the TTL sweep
    pinned: bool = False

    def __post_init__(self):
        if self.expires_at <= self.acquired_at:
            raise DomainError("lock must expire after it is acquired")


SHARD_LOCK = "*"   # lock-table key used by the full-shard locking mode


def leaf_encoding(account: str, balance: int, locked: bool) -> bytes:
    return encode(account, (balance, 16), (1 if locked else 0, 1))


def decode_leaf(data: bytes) -> tuple[str, int, bool]:
    n = int.from_bytes(data[:4], "big")
    account = data[4:4 + n].decode()
    rest = data[4 + n:]
    if len(rest) != 17:
        raise DomainError("malformed leaf encoding")
    return account, int.from_bytes(rest[:16], "big"), rest[16] == 1


@dataclass
class Outgoing:
    tx: Transaction
    status: str = "locked"          # locked | committed | aborted


@dataclass
class Incoming:
    tx: Transaction
    status: str = "staged"          # staged | credited | aborted


class ShardState:
    """Balances, locks and the Merkle tree of one shard.

    Accounts are fixed between reconfigurations; the leaf order is ascending by
    account key. Cross-shard transfers leave the shard through ``transfer_out``
    and arrive through ``transfer_in`` so that global conservation reads
    ``sum(balances) + burned + sum(transfer_out) - sum(transfer_in) == genesis``.
    """

    def __init__(self, shard: int, range_, balances: dict[str, int],
                 chain: list[Block] | None = None):
        self.shard = shard
        self.range = range_
        order = sorted(balances, key=lambda a: (hash_key(a), a))
        self.accounts: list[str] = order
        self.index: dict[str, int] = {a: i for i, a in enumerate(order)}
        self.balances: dict[str, int] = {a: balances[a] for a in order}
        self.lock_table: dict[str, LockRecord] = {}
        self.outgoing: dict[int, Outgoing] = {}
        self.incoming: dict[int, Incoming] = {}
        self.burned = 0
        self.transfer_out = 0
        self.transfer_in = 0
        self.tree = MerkleTree(self.merkle_leaves() or [b""])
        self.chain: list[Block] = chain if chain is not None else []
        if not self.chain:
            self.chain.append(Block(shard, 0, ZERO_HASH, (), self.root, -1, HEADER_BYTES))

    # copies share the chain list; only the canonical copy appends to it
    def copy(self) -> "ShardState":
        new = ShardState.__new__(ShardState)
        new.shard = self.shard
        new.range = self.range
        new.accounts = self.accounts
        new.index = self.index
        new.balances = dict(self.balances)
        new.lock_table = dict(self.lock_table)
        new.outgoing = {k: Outgoing(v.tx, v.status) for k, v in self.outgoing.items()}
        new.incoming = {k: Incoming(v.tx, v.status) for k, v in self.incoming.items()}
        new.burned = self.burned
        new.transfer_out = self.transfer_out
        new.transfer_in = self.transfer_in
        new.tree = self.tree.copy()
        new.chain = self.chain
        return new

    @property
    def head(self) -> Block:
        return self.chain[-1]

    @property
    def height(self) -> int:
        return self.chain[-1].height

    @property
    def root(self) -> bytes:
        return self.tree.root

    def is_locked(self, account: str) -> bool:
        return account in self.lock_table

    def leaf(self, account: str) -> bytes:
        return leaf_encoding(account, self.balances[account], account in self.lock_table)

    def merkle_leaves(self) -> list[bytes]:
        return [self.leaf(a) for a in self.accounts]

    def touch(self, account: str) -> None:
        self.tree.update(self.index[account], self.leaf(account))

    def owns(self, account: str) -> bool:
        return account in self.index

    def total(self) -> int:
        return sum(self.balances.values())

    def try_apply_intra(self, tx: Transaction) -> bool:
        s, r = tx.sender, tx.receiver
        if not (self.owns(s) and self.owns(r)):
            return False
        if s in self.lock_table or r in self.lock_table:
            return False
        if self.balances[s] < tx.amount + tx.fee:
            return False
        self.balances[s] -= tx.amount + tx.fee
        self.balances[r] += tx.amount
        self.burned += tx.fee
        self.touch(s)
        if r != s:
            self.touch(r)
        return True


def form_block(pending: Iterable[Transaction], limit_bytes: int, parent: Block,
               proposer: int, *, state: ShardState | None = None, timestamp: int = 0,
               header_bytes: int = HEADER_BYTES, tx_bytes: int = TX_BYTES,
               admit: Callable[[Transaction], bool] | None = None) -> Block:
    """Pack pending transactions greedily by (fee desc, id asc) under ``limit_bytes``.

    Packing stops at the first transaction that would overflow the block.
    With ``state`` given, transactions are applied to a scratch copy and those
    that do not apply are skipped; the block's state root is the scratch root.
    """
    scratch = state.copy() if state is not None else None
    chosen: list[Transaction] = []
    size = header_bytes
    for tx in sorted(pending, key=lambda t: (-t.fee, t.id)):
        if size + tx_bytes > limit_bytes:
            break
        if admit is not None and not admit(tx):
            continue
        if scratch is not None and not scratch.try_apply_intra(tx):
            continue
        chosen.append(tx)
        size += tx_bytes
    root = scratch.root if scratch is not None else parent.state_root
    return Block(parent.shard, parent.height + 1, parent.digest, tuple(chosen), root,
                 proposer, size, timestamp)


class Prf:
    """Counter-mode PRF over SHA-256, keyed by arbitrary bytes."""

    def __init__(self, key: bytes):
        self.key = hashlib.sha256(DOMAIN_PRF + key).digest()
        self.counter = 0
        self._buf = b""

    def _block(self) -> bytes:
        out = sha256d(DOMAIN_PRF, self.key + self.counter.to_bytes(8, "big"))
        self.counter += 1
        return out

    def bits(self, k: int) -> int:
        nbytes = (k + 7) // 8
        while len(self._buf) < nbytes:
            self._buf += self._block()
        chunk, self._buf = self._buf[:nbytes], self._buf[nbytes:]
        return int.from_bytes(chunk, "big") >> (nbytes * 8 - k)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise DomainError("randbelow needs n > 0")
        k = n.bit_length()
        while True:
            r = self.bits(k)
            if r < n:
                return r

    def random(self) -> float:
        return self.bits(53) / (1 << 53)

    def shuffle(self, items: list) -> list:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items
