"""Block dissemination between peers: membership, push/pull gossip, leader election.

The classes here are transport-agnostic: handlers return lists of
``(destination, message)`` pairs for the host to send.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Optional

from .core import Block, EvovError


class NoLeader(EvovError):
    pass


@dataclass
class GossipParams:
    fanout: int = 7
    period: float = 0.25  # seconds between gossip rounds
    alive_fanout: int = 3
    alive_digest: int = 16  # view entries piggy-backed on each alive message
    silence_window: float = 2.0
    pull_fanout: int = 1
    pull_max_blocks: int = 32
    push_enabled: bool = True
    pull_enabled: bool = True


# messages ------------------------------------------------------------------


@dataclass(frozen=True)
class Alive:
    sender: str
    entries: tuple[tuple[str, str, int, int], ...]  # (peer, org, incarnation, counter)


@dataclass(frozen=True)
class PushBlock:
    channel: str
    block: Block


@dataclass(frozen=True)
class PullDigest:
    channel: str
    height: int  # next sequence number the sender is missing
    reply: bool = False


@dataclass(frozen=True)
class PullRequest:
    channel: str
    start: int
    end: int


@dataclass(frozen=True)
class PullResponse:
    channel: str
    blocks: tuple[Block, ...]


# membership ----------------------------------------------------------------


@dataclass
class _Member:
    org: str
    incarnation: int
    counter: int
    last_heard: float


class MembershipView:
    def __init__(self, self_id: str, org: str, incarnation: int = 0):
        self.self_id = self_id
        self.alive: dict[str, _Member] = {self_id: _Member(org, incarnation, 0, 0.0)}

    def members(self) -> list[str]:
        return sorted(self.alive)

    def org_of(self, peer: str) -> Optional[str]:
        m = self.alive.get(peer)
        return m.org if m else None

    def heard(self, peer: str, org: str, incarnation: int, counter: int, now: float) -> None:
        m = self.alive.get(peer)
        if m is None:
            if peer != self.self_id:
                self.alive[peer] = _Member(org, incarnation, counter, now)
        elif incarnation > m.incarnation or (incarnation == m.incarnation and counter > m.counter):
            if peer != self.self_id:
                self.alive[peer] = _Member(org, incarnation, counter, now)

    def expire(self, now: float, window: float) -> list[str]:
        gone = [p for p, m in self.alive.items() if p != self.self_id and now - m.last_heard > window]
        for p in gone:
            del self.alive[p]
        return gone

    def beat(self, now: float) -> _Member:
        me = self.alive[self.self_id]
        me.counter += 1
        me.last_heard = now
        return me


def membership_tick(view: MembershipView, now: float, roster: list[str], params: GossipParams,
                    rng: random.Random) -> list[tuple[str, Alive]]:
    """Expire silent peers and produce this round's alive messages."""
    view.expire(now, params.silence_window)
    me = view.beat(now)
    others = [p for p in view.alive if p != view.self_id]
    sample = rng.sample(others, min(len(others), params.alive_digest))
    entries = [(view.self_id, me.org, me.incarnation, me.counter)]
    entries += [(p, view.alive[p].org, view.alive[p].incarnation, view.alive[p].counter) for p in sample]
    msg = Alive(view.self_id, tuple(entries))
    targets = [p for p in roster if p != view.self_id]
    return [(t, msg) for t in rng.sample(targets, min(len(targets), params.alive_fanout))]


def elect_leader(view: MembershipView, org: str) -> str:
    """Lowest live peer id of ``org`` in the view."""
    cands = [p for p, m in view.alive.items() if m.org == org]
    if not cands:
        raise NoLeader(org)
    return min(cands)


# block buffer ----------------------------------------------------------------


class BlockBuffer:
    """Out-of-order blocks of one channel, released strictly in sequence."""

    def __init__(self, next_seq: int, last_hash: bytes):
        self.next_seq = next_seq
        self.last_hash = last_hash
        self.pending: dict[int, Block] = {}

    def has(self, seq: int) -> bool:
        return seq < self.next_seq or seq in self.pending

    def add(self, block: Block) -> bool:
        if self.has(block.seq):
            return False
        self.pending[block.seq] = block
        return True

    def take_ready(self) -> list[Block]:
        out = []
        while self.next_seq in self.pending:
            b = self.pending.pop(self.next_seq)
            if b.prev_hash != self.last_hash:
                break  # does not chain; drop and wait for a good copy
            out.append(b)
            self.last_hash = b.hash
            self.next_seq += 1
        return out


# gossip component ------------------------------------------------------------


class Gossip:
    """Gossip state of one peer on one channel."""

    def __init__(self, self_id: str, org: str, channel: str, roster: dict[str, str],
                 params: GossipParams, rng: random.Random, *, next_seq: int, last_hash: bytes,
                 verify_block: Callable[[Block], bool], get_block: Callable[[int], Optional[Block]],
                 incarnation: int = 0, now: float = 0.0):
        self.id = self_id
        self.org = org
        self.channel = channel
        self.roster = roster  # peer id -> org
        self._targets = sorted(roster)
        self.params = params
        self.rng = rng
        self.view = MembershipView(self_id, org, incarnation)
        for p, o in roster.items():
            self.view.heard(p, o, -1, 0, now)
        self.buffer = BlockBuffer(next_seq, last_hash)
        self.verify_block = verify_block
        self.get_block = get_block
        self.stats = {"push_sent": 0, "pull_blocks_sent": 0, "digests_sent": 0, "dropped_bad": 0}

    @property
    def height(self) -> int:
        return self.buffer.next_seq

    def leader(self) -> str:
        return elect_leader(self.view, self.org)

    def is_leader(self) -> bool:
        return self.leader() == self.id

    def _live_neighbors(self, exclude=()) -> list[str]:
        return [p for p in self.view.alive if p != self.id and p not in exclude]

    # -- periodic ---------------------------------------------------------

    def tick(self, now: float) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = list(membership_tick(self.view, now, self._targets,
                                                             self.params, self.rng))
        if self.params.pull_enabled:
            out += self.pull_round()
        return out

    def pull_round(self) -> list[tuple[str, object]]:
        nbrs = self._live_neighbors()
        k = min(len(nbrs), self.params.pull_fanout)
        msg = PullDigest(self.channel, self.height)
        self.stats["digests_sent"] += k
        return [(p, msg) for p in self.rng.sample(nbrs, k)]

    # -- blocks -----------------------------------------------------------

    def accept(self, block: Block, src: Optional[str] = None) -> list[tuple[str, object]]:
        """Take a block from the orderer or a neighbour; returns push messages."""
        if self.buffer.has(block.seq):
            return []  # forward-once
        if not self.verify_block(block):
            self.stats["dropped_bad"] += 1
            return []
        self.buffer.add(block)
        if not self.params.push_enabled:
            return []
        return self.push_round(block, exclude=(src,) if src else ())

    def push_round(self, block: Block, exclude=()) -> list[tuple[str, object]]:
        nbrs = self._live_neighbors(exclude)
        targets = self.rng.sample(nbrs, min(len(nbrs), self.params.fanout))
        self.stats["push_sent"] += len(targets)
        msg = PushBlock(self.channel, block)
        return [(t, msg) for t in targets]

    def take_ready(self) -> list[Block]:
        return self.buffer.take_ready()

    # -- handlers ---------------------------------------------------------

    def on_alive(self, msg: Alive, now: float) -> None:
        for peer, org, inc, ctr in msg.entries:
            if peer in self.roster:
                self.view.heard(peer, org, inc, ctr, now)

    def on_push(self, src: str, msg: PushBlock) -> list[tuple[str, object]]:
        return self.accept(msg.block, src)

    def on_pull_digest(self, src: str, msg: PullDigest) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = []
        if msg.height > self.height:
            out.append((src, PullRequest(self.channel, self.height, msg.height)))
        elif not msg.reply:
            out.append((src, PullDigest(self.channel, self.height, reply=True)))
            self.stats["digests_sent"] += 1
        return out

    def on_pull_request(self, src: str, msg: PullRequest) -> list[tuple[str, object]]:
        blocks = []
        end = min(msg.end, msg.start + self.params.pull_max_blocks)
        for s in range(msg.start, end):
            b = self.get_block(s)
            if b is None:
                break
            blocks.append(b)
        if not blocks:
            return []
        self.stats["pull_blocks_sent"] += len(blocks)
        return [(src, PullResponse(self.channel, tuple(blocks)))]

    def on_pull_response(self, src: str, msg: PullResponse) -> list[tuple[str, object]]:
        for b in msg.blocks:
            if not self.buffer.has(b.seq) and self.verify_block(b):
                self.buffer.add(b)
        return []
