"""Round-synchronous gossip driver.

Every message sent in round r is handled at the start of round r + 1, so
"rounds" count gossip hops independently of link latency.  Only gossip runs
here; blocks are signed by a single orderer and injected at the org leaders.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from ..core import ZERO_HASH, Block, time_to_cut
from ..gossip import Alive, Gossip, GossipParams, NoLeader, PullDigest, PullRequest, PullResponse, PushBlock
from ..msp import MspDirectory, Role
from ..order import OrderingNode
from ..validate import check_block_signature


@dataclass
class GossipRun:
    rounds_to_full: dict[int, Optional[int]]  # block seq -> rounds until every live peer held it
    heights: dict[str, int]
    chains: dict[str, list[bytes]]  # peer -> block hashes handed off in order
    blocks_pushed: int
    blocks_pulled: int
    digests: int
    leaders: dict[str, str] = field(default_factory=dict)

    @property
    def max_rounds(self) -> Optional[int]:
        vals = list(self.rounds_to_full.values())
        return None if any(v is None for v in vals) else max(vals, default=0)


def _chain(n_blocks: int, seed: int):
    rng = random.Random(f"{seed}:gossip-keys")
    msp = MspDirectory()
    osn = OrderingNode(msp.generate_identity("osn0", "OrdererOrg", Role.ORDERER, rng))
    genesis = osn.sign_block(Block(0, ZERO_HASH, (time_to_cut(0),)))
    blocks, prev = [], genesis
    for s in range(1, n_blocks + 1):
        b = osn.sign_block(Block(s, prev.hash, (time_to_cut(s, f"b{s}"),)))
        blocks.append(b)
        prev = b
    return msp, genesis, blocks


def run_gossip(n_peers: int = 100, orgs: int = 1, fanout: int = 7, n_blocks: int = 10, seed: int = 0,
               push: bool = True, pull: bool = True, inject_every: int = 2, max_rounds: int = 200,
               crash: Optional[tuple[str, int, int]] = None, silence_rounds: int = 4,
               settle_rounds: int = 0) -> GossipRun:
    """Simulate ``n_blocks`` blocks spreading over ``n_peers`` peers.

    ``crash=(peer, down_round, up_round)`` takes a peer offline for that span.
    """
    msp, genesis, blocks = _chain(n_blocks, seed)
    ids = [f"p{i:03d}" for i in range(n_peers)]
    roster = {p: f"Org{i * orgs // n_peers}" for i, p in enumerate(ids)}
    params = GossipParams(fanout=fanout, period=1.0, silence_window=float(silence_rounds),
                          push_enabled=push, pull_enabled=pull)

    def verify(b: Block) -> bool:
        return b.seq > 0 and check_block_signature(b, msp)

    handed: dict[str, list[bytes]] = {p: [] for p in ids}
    nodes: dict[str, Gossip] = {}

    def make(p: str, inc: int, now: float) -> Gossip:
        return Gossip(p, roster[p], "ch", roster, params, random.Random(f"{seed}:{p}:{inc}"),
                      next_seq=1 + len(handed[p]), last_hash=handed[p][-1] if handed[p] else genesis.hash,
                      verify_block=verify, get_block=lambda s, p=p: _lookup(s, p), incarnation=inc, now=now)

    by_hash = {b.hash: b for b in blocks}

    def _lookup(seq: int, p: str) -> Optional[Block]:
        h = handed[p]
        if 1 <= seq <= len(h):
            return by_hash[h[seq - 1]]
        g = nodes[p]
        return g.buffer.pending.get(seq)

    for p in ids:
        nodes[p] = make(p, 0, 0.0)
    up = {p: True for p in ids}
    inc = {p: 0 for p in ids}
    inbox: list[tuple[str, str, object]] = []
    first_full: dict[int, Optional[int]] = {b.seq: None for b in blocks}
    injected_at: dict[int, int] = {}
    pushed = pulled = digests = 0
    last_inject = (n_blocks - 1) * inject_every

    for rnd in range(max_rounds):
        if crash:
            who, down, back = crash
            if rnd == down:
                up[who] = False
            if rnd == back:
                up[who] = True
                inc[who] += 1
                nodes[who] = make(who, inc[who], float(rnd))
        outbox: list[tuple[str, str, object]] = []
        for src, dst, msg in inbox:
            if not up[dst] or not up[src]:
                continue
            g = nodes[dst]
            if isinstance(msg, Alive):
                g.on_alive(msg, float(rnd))
            elif isinstance(msg, PushBlock):
                outbox += [(dst, d, m) for d, m in g.on_push(src, msg)]
            elif isinstance(msg, PullDigest):
                outbox += [(dst, d, m) for d, m in g.on_pull_digest(src, msg)]
            elif isinstance(msg, PullRequest):
                outbox += [(dst, d, m) for d, m in g.on_pull_request(src, msg)]
            elif isinstance(msg, PullResponse):
                pulled += len(msg.blocks)
                g.on_pull_response(src, msg)
        # each org leader streams every cut block it does not hold yet
        if rnd % inject_every == 0 and rnd // inject_every < n_blocks:
            injected_at[blocks[rnd // inject_every].seq] = rnd
        cut = len(injected_at)
        for p in ids:
            if not up[p]:
                continue
            try:
                leader = nodes[p].is_leader()
            except NoLeader:
                leader = False
            if leader:
                for b in blocks[:cut]:
                    if not nodes[p].buffer.has(b.seq):
                        outbox += [(p, d, m) for d, m in nodes[p].accept(b)]
        for p in ids:
            if up[p]:
                outbox += [(p, d, m) for d, m in nodes[p].tick(float(rnd))]
                for b in nodes[p].take_ready():
                    handed[p].append(b.hash)
        pushed += sum(1 for _, _, m in outbox if isinstance(m, PushBlock))
        digests += sum(1 for _, _, m in outbox if isinstance(m, PullDigest))
        inbox = outbox
        live = [p for p in ids if up[p]]
        for s, r0 in injected_at.items():
            if first_full[s] is None and all(nodes[p].buffer.has(s) for p in live):
                first_full[s] = rnd - r0 + 1
        if rnd >= last_inject + settle_rounds and all(v is not None for v in first_full.values()) \
                and all(len(handed[p]) == n_blocks for p in live):
            break

    leaders = {}
    for p in ids:
        try:
            leaders[p] = nodes[p].leader()
        except NoLeader:
            pass
    return GossipRun(first_full, {p: len(handed[p]) + 1 for p in ids}, handed, pushed, pulled, digests, leaders)
