"""Simulated network: peers, ordering nodes and fabcoin clients on one event loop."""

from __future__ import annotations

import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

from ..chaincode import ChaincodeRegistry
from ..core import Block, Proposal, Transaction, TxType
from ..endorse import (
    Endorser,
    PolicyUnsatisfied,
    ProposalResponse,
    Status,
    build_proposal,
    collect_and_assemble,
)
from ..fabcoin import CHAINCODE_ID as FABCOIN, VSCC_ID as FABCOIN_VSCC, CoinState, FabcoinRequest, Wallet, new_keypair
from ..gossip import Alive, Gossip, GossipParams, NoLeader, PullDigest, PullRequest, PullResponse, PushBlock
from ..ledger import Ledger, MemoryStorage
from ..msp import MspDirectory, Role, SigningIdentity
from ..order import ChannelConfig, OrderingNode, TotalOrderLog, bootstrap_channel
from ..policy import minimal_sets
from ..validate import check_block_signature, revalidator, rw_check_block, validate_block, vscc_check_block
from . import chain
from .live import LiveClock, SocketTransport
from .metrics import TxRecord
from .scenario import Scenario
from .sim import US, LinkModel, Partition, Simulator, Transport, us

log = logging.getLogger(__name__)

DELIVER_BATCH = 32
DELIVER_RETRY = 0.25
DELIVER_TIMEOUT = 0.75
ENDORSE_TIMEOUT = 0.2
MAX_ATTEMPTS = 30


# messages --------------------------------------------------------------------


@dataclass(frozen=True)
class ProposalMsg:
    proposal: Proposal


@dataclass(frozen=True)
class ProposalReply:
    tx_id: bytes
    response: Optional[ProposalResponse]
    error: str = ""


@dataclass(frozen=True)
class BroadcastMsg:
    tx: Transaction


@dataclass(frozen=True)
class DeliverRequest:
    channel: str
    start: int


@dataclass(frozen=True)
class DeliverBlocks:
    channel: str
    blocks: tuple[Block, ...]


@dataclass(frozen=True)
class CommitEvent:
    tx_id: bytes
    valid: bool


@dataclass(frozen=True)
class StatusQuery:
    tx_id: bytes


@dataclass(frozen=True)
class StatusReply:
    tx_id: bytes
    committed: bool
    valid: bool = False


# ordering node ---------------------------------------------------------------


class OsnNode:
    def __init__(self, net: "Network", signer: SigningIdentity):
        self.net = net
        self.signer = signer
        self.id = signer.id
        self.alive = True
        self.epoch = 0
        self.waiters: dict[str, int] = {}
        self._boot()

    def _boot(self) -> None:
        net = self.net
        self.node = OrderingNode(self.signer, call_later=self._call_later)
        self.node.bootstrap_channel(net.cfg, net.log, net.genesis)
        self.waiters = {}

    def _call_later(self, delay: float, fn) -> None:
        epoch = self.epoch
        self.net.sim.after(us(delay), lambda: self.alive and self.epoch == epoch and fn())

    def on_log_append(self, _idx: int) -> None:
        epoch = self.epoch
        self.net.sim.after(self.net.sc.costs.broker, lambda: self.alive and self.epoch == epoch and self.consume())

    def consume(self) -> None:
        if self.node.catch_up(self.net.channel) and self.waiters:
            waiting, self.waiters = self.waiters, {}
            for peer, start in waiting.items():
                self._serve(peer, start)

    def _serve(self, peer: str, start: int) -> None:
        ch = self.net.channel
        height = self.node.height(ch)
        blocks = tuple(self.node.deliver(ch, s) for s in range(start, min(height, start + DELIVER_BATCH)))
        if not blocks:
            self.waiters[peer] = start
        self.net.transport.send(self.id, peer, DeliverBlocks(ch, blocks))

    def handle(self, src: str, msg: Any) -> None:
        if isinstance(msg, BroadcastMsg):
            try:
                self.node.broadcast(self.net.channel, msg.tx, src)
            except Exception as e:  # rejected submissions are the client's problem
                log.debug("broadcast from %s rejected: %s", src, e)
        elif isinstance(msg, DeliverRequest):
            try:
                self.node.deliver(msg.channel, 0, src)
            except Exception:
                return
            self._serve(src, msg.start)

    def crash(self) -> None:
        self.alive = False
        self.epoch += 1

    def restart(self) -> None:
        self.alive = True
        self.epoch += 1
        self._boot()
        self.consume()

    def blocks(self) -> list[Block]:
        ch = self.node.channels[self.net.channel]
        return [ch.blocks[s] for s in sorted(ch.blocks)]


# peer ------------------------------------------------------------------------


class PeerNode:
    def __init__(self, net: "Network", signer: SigningIdentity, endorser: bool, org_index: int):
        self.net = net
        self.signer = signer
        self.id = signer.id
        self.org = signer.identity.org
        self.is_endorser = endorser
        self.org_index = org_index
        self.storage = MemoryStorage()  # survives crashes
        self.alive = True
        self.epoch = 0
        self.incarnation = 0
        self.subscribers: set[str] = set()
        self.entropy = random.Random(f"{net.sc.seed}:entropy:{self.id}")
        self.gossip_rng = random.Random(f"{net.sc.seed}:gossip:{self.id}")
        self.stats = {"validated": 0, "tampered_sent": 0}
        self._boot(fresh=True)

    # -- lifecycle --------------------------------------------------------

    def _boot(self, fresh: bool) -> None:
        net = self.net
        self.ledger = Ledger(self.storage)
        if fresh:
            self.ledger.commit_block(net.genesis, [True])
        else:
            self.ledger.recover(revalidator(net.ctx, self.ledger))
        registry = ChaincodeRegistry()
        for defn in chain.definitions(net.cfg, self.entropy, with_handlers=True).values():
            registry.install(defn, net.channel)
        self.endorser = Endorser(self.signer, net.msp, registry, lambda _ch: self.ledger.snapshot(),
                                 deadline=None)
        p = net.sc.gossip
        params = GossipParams(fanout=p.fanout, period=p.period, silence_window=p.silence_window,
                              alive_fanout=p.alive_fanout, pull_fanout=p.pull_fanout,
                              push_enabled=p.push, pull_enabled=p.pull)
        self.gossip = Gossip(self.id, self.org, net.channel, net.peer_orgs, params, self.gossip_rng,
                             next_seq=self.ledger.height, last_hash=self.ledger.last_hash,
                             verify_block=self._verify_block, get_block=self._get_block,
                             incarnation=self.incarnation, now=net.sim.now / US)
        self.vqueue: deque[Block] = deque()
        self.handed: dict[int, Block] = {}
        self.busy = False
        self.deliver_osn = self.org_index % len(net.osns)
        self.deliver_active = False
        self.last_ack = 0
        self.last_request = -US
        self._schedule_tick()

    def crash(self) -> None:
        self.alive = False
        self.epoch += 1

    def restart(self) -> None:
        self.alive = True
        self.epoch += 1
        self.incarnation += 1
        self._boot(fresh=False)

    def _later(self, delay_us: int, fn) -> None:
        epoch = self.epoch
        self.net.sim.after(delay_us, lambda: self.alive and self.epoch == epoch and fn())

    def _send(self, dst: str, msg: Any) -> None:
        self.net.transport.send(self.id, dst, msg)

    def _send_all(self, msgs) -> None:
        tamper = self.net.sc.faults.tamper_rate
        for dst, m in msgs:
            if tamper and isinstance(m, PushBlock) and self.gossip_rng.random() < tamper:
                b = m.block
                m = PushBlock(m.channel, Block(b.seq, bytes(32), b.txs, None, b.orderer_id, b.orderer_sig))
                self.stats["tampered_sent"] += 1
            self._send(dst, m)

    # -- gossip plumbing -----------------------------------------------------

    def _verify_block(self, b: Block) -> bool:
        return b.seq > 0 and check_block_signature(b, self.net.msp)

    def _get_block(self, seq: int) -> Optional[Block]:
        if seq < self.ledger.height:
            b = self.ledger.get_block(seq)
            return Block(b.seq, b.prev_hash, b.txs, None, b.orderer_id, b.orderer_sig)
        return self.handed.get(seq)

    def _schedule_tick(self) -> None:
        self._later(us(self.net.sc.gossip.period), self._tick)

    def _tick(self) -> None:
        now = self.net.sim.now
        self._send_all(self.gossip.tick(now / US))
        try:
            leader = self.gossip.is_leader()
        except NoLeader:
            leader = False
        if leader:
            if not self.deliver_active:
                self.deliver_active = True
                self.last_ack = now
                self._request_blocks()
            elif now - self.last_ack > us(DELIVER_TIMEOUT):
                self.deliver_osn = (self.deliver_osn + 1) % len(self.net.osns)
                self.last_ack = now
                self._request_blocks()
            elif now - self.last_request > us(DELIVER_RETRY):
                self._request_blocks()
        else:
            self.deliver_active = False
        self._drain_buffer()
        self._schedule_tick()

    def _request_blocks(self) -> None:
        self.last_request = self.net.sim.now
        osn = self.net.osns[self.deliver_osn].id
        self._send(osn, DeliverRequest(self.net.channel, self.gossip.height))

    def _drain_buffer(self) -> None:
        for b in self.gossip.take_ready():
            self.handed[b.seq] = b
            self.vqueue.append(b)
        self._pump()

    # -- validation pipeline ---------------------------------------------------

    def _costs(self, b: Block) -> tuple[int, int, int]:
        c = self.net.sc.costs
        sigs = keys = 0
        for tx in b.txs:
            if tx.type != TxType.NORMAL:
                continue
            sigs += 1 + len(tx.endorsements)
            if tx.proposal.chaincode_id == FABCOIN:
                sigs += 1
            keys += len(tx.rwset.reads) + len(tx.rwset.range_reads) + len(tx.rwset.writes)
        vscc = c.vscc_fixed + -(-sigs * c.sig_verify // c.vscc_cores)
        rw = c.rw_per_tx * len(b.txs) + c.rw_per_key * keys
        ledger = c.ledger_fixed + c.ledger_per_kb * len(b.encoded) // 1024
        return vscc, rw, ledger

    def _pump(self) -> None:
        if self.busy or not self.vqueue:
            return
        self.busy = True
        b = self.vqueue[0]
        start = self.net.sim.now
        if self.net.live:
            self._later(0, lambda: self._finish(b, start, 0, 0, 0))
            return
        vscc, rw, ledger = self._costs(b)
        self._later(vscc + rw + ledger, lambda: self._finish(b, start, vscc, rw, ledger))

    def _finish(self, b: Block, start: int, vscc: int, rw: int, ledger: int) -> None:
        if self.net.live:
            verdict, (vscc, rw, ledger) = self._validate_timed(b)
        else:
            verdict = validate_block(b, self.net.ctx, self.ledger)
            self.ledger.commit_block(b, verdict.valid)
        self.vqueue.popleft()
        self.handed.pop(b.seq, None)
        self.busy = False
        self.stats["validated"] += 1
        now = self.net.sim.now
        if self.net.live:
            start = now - vscc - rw - ledger
        self.net.on_commit(self, b, verdict, start, (vscc, rw, ledger), now)
        for i, tx in enumerate(b.txs):
            if tx.type != TxType.NORMAL or tx.proposal.client_id not in self.subscribers:
                continue
            _, loc, valid = self.ledger.get_tx(tx.tx_id)
            self._send(tx.proposal.client_id, CommitEvent(tx.tx_id, valid))
        self._pump()

    def _validate_timed(self, b: Block):
        """Validate and commit, measuring each stage in wall-clock microseconds."""
        clock = self.net.sim
        t0 = clock.now
        if b.seq != self.ledger.height or b.prev_hash != self.ledger.last_hash:
            validate_block(b, self.net.ctx, self.ledger)  # raises the same errors as the simulated path
        state = self.ledger.snapshot()
        vs = vscc_check_block(b, self.net.ctx, state)
        t1 = clock.now
        verdict = rw_check_block(b, vs, state, self.ledger.has_tx)
        t2 = clock.now
        self.ledger.commit_block(b, verdict.valid)
        t3 = clock.now
        return verdict, (t1 - t0, t2 - t1, t3 - t2)

    # -- message handling -------------------------------------------------------

    def handle(self, src: str, msg: Any) -> None:
        now = self.net.sim.now / US
        g = self.gossip
        if isinstance(msg, Alive):
            g.on_alive(msg, now)
            return
        if isinstance(msg, PushBlock):
            self._send_all(g.on_push(src, msg))
        elif isinstance(msg, PullDigest):
            self._send_all(g.on_pull_digest(src, msg))
        elif isinstance(msg, PullRequest):
            self._send_all(g.on_pull_request(src, msg))
        elif isinstance(msg, PullResponse):
            g.on_pull_response(src, msg)
        elif isinstance(msg, DeliverBlocks):
            self.last_ack = self.net.sim.now
            for b in msg.blocks:
                self._send_all(g.accept(b))
            if msg.blocks and self.deliver_active:
                self._request_blocks()
        elif isinstance(msg, ProposalMsg):
            self._later(self.net.sc.costs.endorse, lambda: self._endorse(src, msg.proposal))
            return
        elif isinstance(msg, StatusQuery):
            if self.ledger.has_tx(msg.tx_id):
                _, _, valid = self.ledger.get_tx(msg.tx_id)
                self._send(src, StatusReply(msg.tx_id, True, valid))
            else:
                self._send(src, StatusReply(msg.tx_id, False))
            return
        self._drain_buffer()

    def _endorse(self, src: str, p: Proposal) -> None:
        try:
            resp = self.endorser.endorse(p)
            self._send(src, ProposalReply(p.tx_id, resp))
        except Exception as e:
            self._send(src, ProposalReply(p.tx_id, None, f"{type(e).__name__}: {e}"))


# client ----------------------------------------------------------------------


@dataclass
class Attempt:
    proposal: Proposal
    job: "Job"
    targets: list[str] = field(default_factory=list)
    responses: dict[str, ProposalResponse] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    set_index: int = 0
    tx: Optional[Transaction] = None
    t_submit: int = 0
    tries: int = 0
    osn: int = 0
    resolved: bool = False
    valid: bool = False
    token: int = 0


@dataclass
class Job:
    kind: str  # mint | spend | nondet
    index: int
    coin: Optional[str] = None
    pair: bool = False
    attempts: list[Attempt] = field(default_factory=list)
    retries: int = 0


class ClientNode:
    def __init__(self, net: "Network", signer: SigningIdentity, index: int, jobs: dict[str, int]):
        self.net = net
        self.signer = signer
        self.id = signer.id
        self.org = signer.identity.org
        self.index = index
        self.rng = random.Random(f"{net.sc.seed}:client:{self.id}")
        self.wallet = Wallet(signer, net.channel, cb_keys=dict(net.cb_keys))
        self.owner = self.wallet.new_key(self.rng)
        self.jobs = {k: deque(Job(k, i) for i in range(n)) for k, n in jobs.items()}
        self.phase: Optional[str] = None
        self.running = 0
        self.inflight: dict[bytes, Attempt] = {}
        self.busy_coins: set[str] = set()
        self.osn_cursor = index
        self.done_phases: set[str] = set()
        self.stats = {"committed_valid": 0, "committed_invalid": 0, "endorse_failed": 0,
                      "gave_up": 0, "rebroadcasts": 0, "pairs": 0, "pair_valid": [0, 0, 0],
                      "forced": 0}

    # -- phases -------------------------------------------------------------

    def start_phase(self, phase: str) -> None:
        self.phase = phase
        for _ in range(self.net.sc.workload.threads):
            self._next_job()
        self._check_phase_done()

    def _check_phase_done(self) -> None:
        if self.phase and not self.jobs.get(self.phase) and self.running == 0 \
                and self.phase not in self.done_phases:
            self.done_phases.add(self.phase)
            self.net.client_phase_done(self, self.phase)

    def _next_job(self) -> None:
        q = self.jobs.get(self.phase)
        if not q:
            return
        job = q.popleft()
        self.running += 1
        self._start(job)

    def _finish_job(self, job: Job) -> None:
        self.running -= 1
        if job.coin:
            self.busy_coins.discard(job.coin)
        self._next_job()
        self._check_phase_done()

    # -- building proposals --------------------------------------------------

    def _start(self, job: Job) -> None:
        w = self.net.sc.workload
        if job.kind == "mint":
            props = [self.wallet.mint([CoinState(w.amount, self.owner, w.label)], rng=self.rng)]
        elif job.kind == "spend":
            free = [k for k in self.wallet.coins if k not in self.busy_coins]
            if not free:
                if not self.busy_coins:
                    self.stats["gave_up"] += 1
                    self._finish_job(job)
                else:
                    # every busy coin resolves within bounded attempts
                    self._later(us(0.01), lambda: self._start(job))
                return
            job.coin = free[0]
            self.busy_coins.add(job.coin)
            amount = self.wallet.coins[job.coin].amount
            job.pair = self.rng.random() < w.double_spend
            props = [self.wallet.spend([job.coin], [CoinState(amount, self.owner, w.label)], rng=self.rng)
                     for _ in range(2 if job.pair else 1)]
            if job.pair:
                self.stats["pairs"] += 1
        else:
            props = [build_proposal(self.signer, self.net.channel, chain.NONDET, "put",
                                    [f"k{self.index}.{job.index}".encode()], rng=self.rng)]
        job.attempts = [Attempt(p, job, t_submit=self.net.sim.now) for p in props]
        for a in job.attempts:
            self.inflight[a.proposal.tx_id] = a
            self._request_endorsement(a)

    def _later(self, delay_us: int, fn) -> None:
        self.net.sim.after(delay_us, lambda: self.net.transport.up.get(self.id) and fn())

    def _request_endorsement(self, a: Attempt) -> None:
        sets = self.net.endorsement_sets(a.proposal.chaincode_id, self.org, self.index)
        targets = sets[a.set_index % len(sets)]
        a.targets = [t for t in targets if t not in a.responses]
        a.token += 1
        token = a.token
        for t in a.targets:
            self.net.transport.send(self.id, t, ProposalMsg(a.proposal))
        self._later(us(ENDORSE_TIMEOUT), lambda: self._endorse_timeout(a, token))

    def _endorse_timeout(self, a: Attempt, token: int) -> None:
        if a.tx is not None or a.resolved or a.token != token:
            return
        a.set_index += 1
        a.tries += 1
        if a.tries > MAX_ATTEMPTS:
            self._resolve(a, None)
            return
        self._request_endorsement(a)

    def _on_reply(self, msg: ProposalReply) -> None:
        a = self.inflight.get(msg.tx_id)
        if a is None or a.tx is not None or a.resolved:
            return
        who = msg.response.endorsement.endorser_id if msg.response and msg.response.endorsement else None
        if msg.response is not None and msg.response.status == Status.OK and who:
            a.responses[who] = msg.response
        else:
            a.errors[str(len(a.errors))] = msg.error
            if "does not exist" in msg.error or "SimulationFailed" in msg.error:
                self.stats["endorse_failed"] += 1
                self._resolve(a, None)
                return
        if not all(t in a.responses for t in a.targets):
            return
        policy = self.net.ctx.chaincodes[a.proposal.chaincode_id].policy
        try:
            a.tx = collect_and_assemble(a.proposal, a.responses.values(), policy, self.net.msp)
        except PolicyUnsatisfied:
            if not self.net.sc.workload.force_submit:
                self.stats["endorse_failed"] += 1
                self._resolve(a, None)
                return
            a.tx = self._forced(a)
            self.stats["forced"] += 1
        self.net.on_assembled(self, a)
        self._broadcast(a)
        if self.rng.random() < self.net.sc.workload.duplicate_broadcast:
            self._broadcast(a, count_try=False)

    def _forced(self, a: Attempt) -> Transaction:
        groups: dict[bytes, list] = {}
        for r in a.responses.values():
            groups.setdefault(r.endorsement.rwset.digest, []).append(r.endorsement)
        digest, ends = min(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
        ends.sort(key=lambda e: e.endorser_id)
        return Transaction(TxType.NORMAL, a.proposal, ends[0].rwset, tuple(ends))

    # -- ordering and commit --------------------------------------------------

    def _broadcast(self, a: Attempt, count_try: bool = True) -> None:
        osns = self.net.osns
        osn = osns[self.osn_cursor % len(osns)].id
        self.osn_cursor += 1
        self.net.broadcast_log.setdefault(a.tx.tx_id, a.tx.encoded)
        self.net.transport.send(self.id, osn, BroadcastMsg(a.tx))
        if count_try:
            a.token += 1
            token = a.token
            self._later(us(self.net.sc.workload.client_timeout), lambda: self._commit_timeout(a, token))

    def _commit_timeout(self, a: Attempt, token: int) -> None:
        if a.resolved or a.token != token:
            return
        a.tries += 1
        if a.tries > MAX_ATTEMPTS:
            self.stats["gave_up"] += 1
            self._resolve(a, None)
            return
        peers = self.net.peers
        target = peers[(self.index + a.tries) % len(peers)].id
        self.net.transport.send(self.id, target, StatusQuery(a.tx.tx_id))
        a.token += 1
        token = a.token
        self._later(us(ENDORSE_TIMEOUT), lambda: self._status_timeout(a, token))

    def _status_timeout(self, a: Attempt, token: int) -> None:
        if a.resolved or a.token != token:
            return
        self.stats["rebroadcasts"] += 1
        self._broadcast(a)

    def _on_status(self, msg: StatusReply) -> None:
        a = self.inflight.get(msg.tx_id)
        if a is None or a.resolved or a.tx is None:
            return
        if msg.committed:
            self._resolve(a, msg.valid)
        else:
            self.stats["rebroadcasts"] += 1
            self._broadcast(a)

    def _resolve(self, a: Attempt, valid: Optional[bool]) -> None:
        """``valid`` is None when the attempt never reached the ledger."""
        if a.resolved:
            return
        a.resolved = True
        a.valid = bool(valid)
        self.inflight.pop(a.proposal.tx_id, None)
        if valid is not None:
            self.stats["committed_valid" if valid else "committed_invalid"] += 1
        job = a.job
        if valid:
            req = FabcoinRequest.decode(a.proposal.args[0]) if job.kind != "nondet" else None
            if req is not None:
                self.wallet.learn(a.proposal.tx_id, req.outputs,
                                  spent=req.inputs if job.kind == "spend" else ())
        if not all(x.resolved for x in job.attempts):
            return
        if job.pair:
            self.stats["pair_valid"][sum(x.valid for x in job.attempts)] += 1
        if job.kind == "spend" and valid is None and not any(x.valid for x in job.attempts) \
                and all(x.tx is None for x in job.attempts):
            # the coin could not be simulated: it is gone from the ledger
            self.wallet.coins.pop(job.coin, None)
        if job.kind in ("mint", "spend") and not any(x.valid for x in job.attempts) \
                and job.retries < MAX_ATTEMPTS and valid is False and not job.pair:
            job.retries += 1
            if job.coin:
                self.busy_coins.discard(job.coin)
            job.coin = None
            self._start(job)
            return
        self._finish_job(job)

    def handle(self, src: str, msg: Any) -> None:
        if isinstance(msg, ProposalReply):
            self._on_reply(msg)
        elif isinstance(msg, CommitEvent):
            a = self.inflight.get(msg.tx_id)
            if a is not None and a.tx is not None:
                self._resolve(a, msg.valid)
        elif isinstance(msg, StatusReply):
            self._on_status(msg)


# network ---------------------------------------------------------------------


class Network:
    """Builds and wires every node of a scenario; ``run()`` drives it."""

    def __init__(self, sc: Scenario, live: bool = False):
        self.live = live
        f = sc.faults
        link = LinkModel(f.latency, f.jitter, f.drop_rate)
        if live:
            # real work replaces the cost model; link latency is whatever loopback gives
            sc = sc.replace(**{f"costs__{k}": 0 for k in ("endorse", "sig_verify", "vscc_fixed", "rw_per_tx",
                                                          "rw_per_key", "ledger_fixed", "ledger_per_kb", "broker")})
            self.sim = LiveClock(sc.seed)
            self.transport = SocketTransport(self.sim, link, random.Random(f"{sc.seed}:transport"))
        else:
            self.sim = Simulator(sc.seed)
            self.transport = Transport(self.sim, link, random.Random(f"{sc.seed}:transport"))
        self.sc = sc
        self.channel = sc.channel.channel_id
        keys = random.Random(f"{sc.seed}:keys")

        msp = MspDirectory()
        orgs = sc.org_ids()
        peer_signers = [msp.generate_identity(p, orgs[i // sc.topology.peers_per_org], Role.PEER, keys)
                        for i, p in enumerate(sc.peer_ids())]
        osn_signers = [msp.generate_identity(o, "OrdererOrg", Role.ORDERER, keys) for o in sc.osn_ids()]
        client_signers = [msp.generate_identity(c, orgs[int(c[3:5]) - 1], Role.CLIENT, keys)
                          for c in sc.client_ids()]
        self.msp = msp.freeze()
        cb_secret, cb_public = new_keypair(keys.randbytes(32))
        self.cb_keys = {"cb1": cb_secret}

        w = sc.workload
        if w.kind == "fabcoin":
            policy = w.policy or "OR(" + ", ".join(f"org:{o}" for o in orgs) + ")"
            chaincodes = [{"id": FABCOIN, "policy": policy, "vscc": FABCOIN_VSCC}]
        else:
            if len(orgs) < 2 and not w.policy:
                raise ValueError("the nondet workload needs two orgs for its 2-of-2 policy")
            policy = w.policy or f"AND(org:{orgs[0]}, org:{orgs[1]})"
            chaincodes = [{"id": chain.NONDET, "policy": policy, "vscc": "default"}]
        ch = sc.channel
        self.cfg = ChannelConfig(
            ch.channel_id, batch_max_count=ch.batch_max_count, batch_max_bytes=ch.batch_max_bytes,
            batch_timeout=ch.batch_timeout, osn_addresses=sc.osn_ids(), roster=self.msp.to_config(),
            chaincodes=chaincodes,
            params={"fabcoin": {"central_banks": {"cb1": cb_public.hex()}, "threshold": 1}})
        first = OrderingNode(osn_signers[0])
        self.genesis = first.sign_block(bootstrap_channel(self.cfg))
        self.ctx = chain.context_from_genesis(self.genesis)
        self.log = TotalOrderLog()

        self.osns = [OsnNode(self, s) for s in osn_signers]
        for o in self.osns:
            self.log.listeners.append(o.on_log_append)
            self.transport.register(o.id, o.handle)
        self.peer_orgs = {s.id: s.identity.org for s in peer_signers}
        e_per = sc.topology.endorsers_per_org
        self.peers = []
        for i, s in enumerate(peer_signers):
            org_i = i // sc.topology.peers_per_org
            p = PeerNode(self, s, endorser=(i % sc.topology.peers_per_org) < e_per, org_index=org_i)
            self.peers.append(p)
            self.transport.register(p.id, p.handle)
        self.by_id: dict[str, Any] = {n.id: n for n in self.osns + self.peers}
        self.observer = self.by_id[sc.observer] if sc.observer else self.peers[0]

        n = len(client_signers)
        if w.kind == "fabcoin":
            jobs = [{"mint": _share(w.mints, n, i), "spend": _share(w.spends, n, i)} for i in range(n)]
        else:
            jobs = [{"nondet": _share(w.nondet_txs, n, i)} for i in range(n)]
        self.clients = [ClientNode(self, s, i, jobs[i]) for i, s in enumerate(client_signers)]
        for c in self.clients:
            self.transport.register(c.id, c.handle)
            anchor = next(p for p in self.peers if p.org == c.org)
            anchor.subscribers.add(c.id)
            self.by_id[c.id] = c
        self._endorsement_sets: dict[tuple, list] = {}

        self.records: dict[bytes, TxRecord] = {}
        self.broadcast_log: dict[bytes, bytes] = {}
        self.phases = ["mint", "spend"] if w.kind == "fabcoin" else ["nondet"]
        self.phase_i = 0
        self.phase_done: set[str] = set()
        self.workload_done_at: Optional[int] = None
        self.phase_times: dict[str, int] = {}
        self.crashed_at_end: set[str] = set()
        self._schedule_faults()

    # -- helpers ------------------------------------------------------------

    def endorsement_sets(self, chaincode_id: str, org: str, index: int) -> list[tuple[str, ...]]:
        key = (chaincode_id, org, index)
        sets = self._endorsement_sets.get(key)
        if sets is None:
            cands = [self.msp.lookup(p.id) for p in self.peers if p.is_endorser]
            sets = minimal_sets(self.ctx.chaincodes[chaincode_id].policy, cands)
            # prefer sets inside the client's own org, then rotate for balance
            own = [s for s in sets if all(self.peer_orgs[x] == org for x in s)]
            other = [s for s in sets if s not in own]
            if other:
                r = index % len(other)
                other = other[r:] + other[:r]
            if own:
                r = index % len(own)
                own = own[r:] + own[:r]
            sets = own + other
            self._endorsement_sets[key] = sets
        return sets

    def on_assembled(self, client: ClientNode, a: Attempt) -> None:
        tid = a.tx.tx_id
        if tid not in self.records:
            self.records[tid] = TxRecord(tid.hex(), client.id, a.proposal.operation, a.t_submit, self.sim.now)

    def on_commit(self, peer: PeerNode, b: Block, verdict, start: int, costs: tuple, now: int) -> None:
        if peer is not self.observer:
            return
        vscc, rw, ledger = costs
        for i, (tx, code) in enumerate(zip(b.txs, verdict.codes)):
            if tx.type != TxType.NORMAL:
                continue
            r = self.records.get(tx.tx_id)
            if r is None or r.done:
                continue
            r.seq, r.index, r.code = b.seq, i, code.value
            r.t_validation_start, r.vscc, r.rw_check, r.ledger, r.t_commit = start, vscc, rw, ledger, now

    def client_phase_done(self, client: ClientNode, phase: str) -> None:
        if all(phase in c.done_phases for c in self.clients):
            self.phase_times[phase] = self.sim.now
            self._start_next_phase()

    def _start_next_phase(self) -> None:
        if self.phase_i >= len(self.phases):
            self.workload_done_at = self.sim.now
            return
        phase = self.phases[self.phase_i]
        self.phase_i += 1
        for c in self.clients:
            c.start_phase(phase)

    # -- faults ---------------------------------------------------------------

    def _schedule_faults(self) -> None:
        f = self.sc.faults
        for c in f.crashes:
            if c.node not in self.by_id:
                raise ValueError(f"crash schedule names unknown node {c.node!r}")
            self.sim.at(us(c.at), lambda n=c.node: self.crash(n))
            if c.restart is not None:
                self.sim.at(us(c.restart), lambda n=c.node: self.restart(n))
        for p in f.partitions:
            self.transport.partitions.append(Partition(frozenset(p.members), us(p.start), us(p.end)))

    def crash(self, node_id: str) -> None:
        node = self.by_id[node_id]
        if not node.alive:
            return
        self.transport.crash(node_id)
        node.crash()
        self.crashed_at_end.add(node_id)

    def restart(self, node_id: str) -> None:
        node = self.by_id[node_id]
        if node.alive:
            return
        self.transport.restart(node_id, node.handle)
        node.restart()
        self.crashed_at_end.discard(node_id)

    # -- driving --------------------------------------------------------------

    def live_peers(self) -> list[PeerNode]:
        return [p for p in self.peers if p.alive]

    def settled(self) -> bool:
        if self.workload_done_at is None:
            return False
        top = max(o.node.height(self.channel) for o in self.osns)
        return all(p.ledger.height >= top and not p.vqueue for p in self.live_peers())

    def run(self) -> None:
        self.sim.at(0, self._start_next_phase)
        limit = us(self.sc.max_time)
        check = us(0.05)

        def watchdog():
            if self.workload_done_at is not None:
                if self.settled() and self.sim.now - self.workload_done_at >= us(0.2):
                    self._stop = True
                    return
                if self.sim.now - self.workload_done_at > us(self.sc.drain):
                    self._stop = True
                    return
            self.sim.after(check, watchdog)

        self._stop = False
        self.sim.after(check, watchdog)
        self.sim.run(until=limit, stop=lambda: self._stop)
        self.timed_out = not self._stop


def _share(total: int, n: int, i: int) -> int:
    return total // n + (1 if i < total % n else 0)
