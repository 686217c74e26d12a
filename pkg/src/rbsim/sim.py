"""Deterministic discrete-event kernel, network model and trace log."""
from __future__ import annotations

import gzip
import hashlib
import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterator


class SchedulingError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True, order=True)
class SimEvent:
    at: int
    seq: int
    target: Hashable = field(compare=False)
    payload: Any = field(compare=False)


class Simulator:
    """Virtual clock plus an (at, seq)-ordered event queue."""

    def __init__(self, start: int = 0):
        self.now = start
        self._queue: list[tuple[int, int, Hashable, Any]] = []
        self._seq = 0
        self.executed = 0

    def __len__(self) -> int:
        return len(self._queue)

    def schedule(self, at: int, target: Hashable, payload: Any) -> SimEvent:
        if at < self.now:
            raise SchedulingError(f"event at {at} scheduled in the past (clock {self.now})")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (at, seq, target, payload))
        return SimEvent(at, seq, target, payload)

    def peek_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def pop(self) -> SimEvent:
        at, seq, target, payload = heapq.heappop(self._queue)
        self.now = at
        self.executed += 1
        return SimEvent(at, seq, target, payload)

    def run(self, handler: Callable[[int, Hashable, Any], None], until: int | None = None,
            stop: Callable[[], bool] | None = None) -> int:
        """Drain events through ``handler(now, target, payload)``.

        Stops at quiescence, before the first event later than ``until``, or
        as soon as ``stop()`` returns true. Returns the number of events run.
        """
        q = self._queue
        n = 0
        while q:
            if until is not None and q[0][0] > until:
                self.now = until
                break
            at, _, target, payload = heapq.heappop(q)
            self.now = at
            handler(at, target, payload)
            n += 1
            if stop is not None and stop():
                break
        self.executed += n
        return n


# -- PRF streams -------------------------------------------------------------

def derive_seed(seed: int, label: str) -> int:
    h = hashlib.sha256(seed.to_bytes(8, "big", signed=False) + b"|" + label.encode())
    return int.from_bytes(h.digest()[:8], "big")


class Streams:
    """Forks one scenario seed into independent, label-addressed RNG streams."""

    def __init__(self, seed: int):
        self.seed = seed & (2**64 - 1)

    def fork(self, label: str) -> random.Random:
        return random.Random(derive_seed(self.seed, label))


# -- network -----------------------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    value: int

    def sample(self, rng: random.Random) -> int:
        return self.value

    @property
    def mean(self) -> float:
        return float(self.value)

    @property
    def bound(self) -> int:
        return self.value


@dataclass(frozen=True)
class Uniform:
    lo: int
    hi: int

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise ValueError(f"bad uniform latency [{self.lo}, {self.hi}]")

    def sample(self, rng: random.Random) -> int:
        return rng.randint(self.lo, self.hi)

    @property
    def mean(self) -> float:
        return (self.lo + self.hi) / 2

    @property
    def bound(self) -> int:
        return self.hi


def parse_latency(spec: str) -> Fixed | Uniform:
    """``"fixed:10"`` or ``"uniform:5:15"``."""
    parts = spec.split(":")
    if parts[0] == "fixed" and len(parts) == 2:
        return Fixed(int(parts[1]))
    if parts[0] == "uniform" and len(parts) == 3:
        return Uniform(int(parts[1]), int(parts[2]))
    raise ValueError(f"unknown latency spec {spec!r}")


@dataclass(frozen=True)
class NetworkModel:
    latency: Fixed | Uniform = Uniform(5, 15)
    drop_rate: float = 0.0
    partition: frozenset[frozenset[int]] = frozenset()

    def severed(self, a: int, b: int) -> bool:
        return bool(self.partition) and frozenset((a, b)) in self.partition


def deliver(sim: Simulator, msg: Any, src: int, dst: int, model: NetworkModel,
            rng: random.Random, latency: int | None = None) -> SimEvent | None:
    """Schedule ``msg`` at ``dst`` after a sampled latency, or drop it."""
    if model.drop_rate and rng.random() < model.drop_rate:
        return None
    if model.severed(src, dst):
        return None
    delay = model.latency.sample(rng) if latency is None else latency
    return sim.schedule(sim.now + delay, dst, msg)


# -- trace -------------------------------------------------------------------

class Trace:
    """Append-only (tick, node, kind, digest, detail) rows with a running digest."""

    TAIL = 200

    def __init__(self, keep: bool = False):
        self.keep = keep
        self.rows: list[tuple[int, Any, str, str, str]] = []
        # the most recent rows survive even when ``keep`` is off, for diagnostics
        self.tail: deque[str] = deque(maxlen=self.TAIL)
        self._h = hashlib.sha256()
        self.count = 0

    def add(self, tick: int, node: Any, kind: str, digest: str = "", detail: Any = None) -> None:
        d = "" if detail is None else json.dumps(detail, sort_keys=True, separators=(",", ":"))
        line = f"{tick}\t{node}\t{kind}\t{digest}\t{d}\n"
        self._h.update(line.encode())
        self.count += 1
        self.tail.append(line)
        if self.keep:
            self.rows.append((tick, node, kind, digest, d))

    def digest(self) -> str:
        return self._h.hexdigest()

    def lines(self) -> Iterator[str]:
        for row in self.rows:
            yield "\t".join(str(x) for x in row) + "\n"

    def write(self, path) -> None:
        path = str(path)
        data = "".join(self.lines()).encode()
        if path.endswith(".gz"):
            # mtime and name pinned so identical traces compress to identical bytes
            with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(data)
        else:
            with open(path, "wb") as fh:
                fh.write(data)


def read_trace(path) -> list[tuple[int, str, str, str, Any]]:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    rows = []
    with opener(path, "rt") as fh:
        for line in fh:
            tick, node, kind, digest, detail = line.rstrip("\n").split("\t")
            rows.append((int(tick), node, kind, digest, json.loads(detail) if detail else None))
    return rows
