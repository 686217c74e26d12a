"""Drive one IBFT committee over a fixed-latency network for tests."""
from dataclasses import dataclass, field

from rbsim.consensus import CommitteeContext, IbftReplica
from rbsim.core import HEADER_BYTES, ZERO_HASH, Block
from rbsim.sim import Simulator


@dataclass
class CommitteeRun:
    finalized: dict[int, dict[int, bytes]] = field(default_factory=dict)   # node -> height -> digest
    rounds: dict[int, int] = field(default_factory=dict)                  # height -> max round used
    timeouts: list[tuple[int, int]] = field(default_factory=list)         # (round entered, timer length)


def run_committee(n: int, silent: set[int], heights: int, *, base_timeout: int = 8,
                  latency: int = 1, until: int = 100_000) -> CommitteeRun:
    members = tuple(range(n))
    ctx = CommitteeContext(0, 0, members, base_timeout)
    reps = {i: IbftReplica(i, ctx) for i in members if i not in silent}
    sim = Simulator()
    out = CommitteeRun()

    def block(height, proposer):
        return Block(0, height, ZERO_HASH, (), ZERO_HASH, proposer, HEADER_BYTES)

    def send(src, msgs, now):
        for dest, msg in msgs:
            for d in (members if dest is None else (dest,)):
                if d != src and d in reps:
                    sim.schedule(now + latency, d, ("msg", msg))

    def arm(rep, now):
        sim.schedule(rep.state.deadline, rep.node, ("timer", rep.height, rep.round))

    def after(rep, fin, now):
        # propose if leader, advance past committed heights, keep timers armed
        while True:
            if fin is not None:
                out.finalized.setdefault(rep.node, {})[rep.height] = fin.digest
                out.rounds[rep.height] = max(out.rounds.get(rep.height, 0), rep.round)
                if rep.height >= heights:
                    return
                msgs, fin = rep.advance(now)
                send(rep.node, msgs, now)
                rep.arm(now)
                arm(rep, now)
                continue
            req = rep.proposal_request()
            if req is None:
                return
            r, just, locked = req
            msgs, fin = rep.propose(locked or block(rep.height, rep.node), now, just)
            send(rep.node, msgs, now)

    def handler(now, node, payload):
        rep = reps[node]
        if payload[0] == "msg":
            h, r = rep.height, rep.round
            msgs, fin = rep.handle(payload[1], now)
            send(node, msgs, now)
            if rep.round != r and rep.height == h:
                out.timeouts.append((rep.round, rep.state.deadline - now))
                arm(rep, now)
            after(rep, fin, now)
        else:
            _, h, r = payload
            if rep.height != h or rep.round != r or rep.height in out.finalized.get(node, {}):
                return
            msgs, _ = rep.on_timeout(now)
            out.timeouts.append((rep.round, rep.state.deadline - now))
            send(node, msgs, now)
            arm(rep, now)
            after(rep, None, now)

    for rep in reps.values():
        rep.arm(0)
        arm(rep, 0)
        after(rep, None, 0)
    sim.run(handler, until=until)
    return out
