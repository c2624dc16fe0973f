"""Shared fixtures: a single channel wired without the simulator.

``Chan`` holds one endorsing peer per org, a client, a solo orderer signer
and one committing ledger.  Tests build transactions against any snapshot,
cut blocks by hand and commit them through the real validation path.
"""

from __future__ import annotations

import random
from typing import Iterable, Optional, Sequence

from evov.chaincode import ChaincodeDefinition, ChaincodeRegistry, ns_key
from evov.core import (Block, Endorsement, Proposal, ReadWriteSet, Transaction, TxType, ZERO_HASH, derive_txid,
                       time_to_cut, time_to_cut_seq, unpack_bitmask)
from evov.endorse import Endorser, build_proposal, collect_and_assemble
from evov.fabcoin import (CHAINCODE_ID as FABCOIN, VSCC_ID as FABCOIN_VSCC, CoinState, FabcoinRequest, Wallet,
                          coin_key, fabcoin_chaincode)
from evov.harness.chain import context_from_genesis
from evov.ledger import Ledger, StateView
from evov.msp import MspDirectory, Role, new_keypair
from evov.order import ChannelConfig, OrderingNode, TotalOrderLog
from evov.validate import validate_block

KV = "kv"


# a small key-value chaincode used by the oracle tests -------------------------

def kv_handler(ctx, op: str, args: tuple) -> bytes:
    a = [x.decode() for x in args]
    if op == "put":
        ctx.put_state(a[0], a[1].encode())
    elif op == "incr":
        v = ctx.get_state(a[0])
        ctx.put_state(a[0], str(int(v or b"0") + 1).encode())
    elif op == "move":
        x, y = ctx.get_state(a[0]), ctx.get_state(a[1])
        ctx.put_state(a[0], str(int(x or b"0") - 1).encode())
        ctx.put_state(a[1], str(int(y or b"0") + 1).encode())
    elif op == "del":
        if ctx.get_state(a[0]) is not None:
            ctx.del_state(a[0])
    elif op == "scan":
        rows = ctx.range_query(a[0], a[1])
        ctx.put_state(a[2], str(len(rows)).encode())
    elif op == "get":
        return ctx.get_state(a[0]) or b""
    else:
        raise ValueError(f"unknown op {op}")
    return b"ok"


def kv_oracle(op: str, args: Sequence[str], d: dict) -> None:
    """The same operations on a plain dict of key -> int, run one at a time."""
    if op == "put":
        d[args[0]] = int(args[1])
    elif op == "incr":
        d[args[0]] = d.get(args[0], 0) + 1
    elif op == "move":
        # both reads happen before either write, so move(k, k) nets +1
        x, y = d.get(args[0], 0), d.get(args[1], 0)
        d[args[0]] = x - 1
        d[args[1]] = y + 1
    elif op == "del":
        d.pop(args[0], None)
    elif op == "scan":
        d[args[2]] = sum(1 for k in d if args[0] <= k < args[1])


# channel fixture ---------------------------------------------------------------

class Chan:
    def __init__(self, orgs: int = 3, seed: int = 0, kv_policy: Optional[str] = None,
                 fabcoin_policy: Optional[str] = None, cbs: int = 1, threshold: int = 1,
                 batch_max_count: int = 500, batch_max_bytes: int = 1 << 20):
        self.rng = random.Random(seed)
        self.orgs = [f"Org{i + 1}" for i in range(orgs)]
        msp = MspDirectory()
        self.peers = {o: msp.generate_identity(f"peer0.{o.lower()}", o, Role.PEER, self.rng) for o in self.orgs}
        self.client = msp.generate_identity("client0", self.orgs[0], Role.CLIENT, self.rng)
        self.osn_signer = msp.generate_identity("osn0", "OrdererOrg", Role.ORDERER, self.rng)
        self.msp = msp.freeze()
        self.cb_keys = {}
        cb_pub = {}
        for i in range(cbs):
            secret, public = new_keypair(self.rng.randbytes(32))
            self.cb_keys[f"cb{i + 1}"] = secret
            cb_pub[f"cb{i + 1}"] = public.hex()
        any_org = "OR(" + ", ".join(f"org:{o}" for o in self.orgs) + ")" if orgs > 1 else f"org:{self.orgs[0]}"
        self.cfg = ChannelConfig(
            "ch1", batch_max_count=batch_max_count, batch_max_bytes=batch_max_bytes,
            osn_addresses=["osn0"], roster=self.msp.to_config(),
            chaincodes=[{"id": KV, "policy": kv_policy or any_org, "vscc": "default"},
                        {"id": FABCOIN, "policy": fabcoin_policy or any_org, "vscc": FABCOIN_VSCC}],
            params={"fabcoin": {"central_banks": cb_pub, "threshold": threshold}})
        self.osn = OrderingNode(self.osn_signer)
        self.log = TotalOrderLog()
        self.genesis = self.osn.bootstrap_channel(self.cfg, self.log)
        self.ctx = context_from_genesis(self.genesis)
        self.registry = ChaincodeRegistry()
        self.registry.install(ChaincodeDefinition(KV, kv_handler, self.ctx.chaincodes[KV].policy), "ch1")
        self.registry.install(ChaincodeDefinition(FABCOIN, fabcoin_chaincode, self.ctx.chaincodes[FABCOIN].policy,
                                                  FABCOIN_VSCC), "ch1")
        self.ledger = Ledger()
        self.ledger.commit_block(self.genesis, [True])
        self._snap: Optional[StateView] = None
        self.endorsers = {o: Endorser(s, self.msp, self.registry, lambda _c: self._current(),
                                      deadline=None) for o, s in self.peers.items()}
        self.next_seq = 1
        self.prev_hash = self.genesis.hash
        self.wallet = Wallet(self.client, "ch1", cb_keys=dict(self.cb_keys))

    def _current(self) -> StateView:
        return self._snap if self._snap is not None else self.ledger.snapshot()

    # -- transactions ---------------------------------------------------------

    def endorse(self, proposal, orgs: Optional[Iterable[str]] = None, snapshot: Optional[StateView] = None):
        self._snap = snapshot
        try:
            return [self.endorsers[o].endorse(proposal) for o in (orgs or self.orgs[:1])]
        finally:
            self._snap = None

    def assemble(self, proposal, orgs=None, snapshot=None) -> Transaction:
        responses = self.endorse(proposal, orgs, snapshot)
        policy = self.ctx.chaincodes[proposal.chaincode_id].policy
        return collect_and_assemble(proposal, responses, policy, self.msp)

    def kv(self, op: str, *args: str, orgs=None, snapshot=None) -> Transaction:
        p = build_proposal(self.client, "ch1", KV, op, [a.encode() for a in args], rng=self.rng)
        return self.assemble(p, orgs, snapshot)

    def mint(self, amounts: Sequence[int], owner: Optional[bytes] = None, label: str = "USD",
             cb_ids=None, snapshot=None) -> Transaction:
        owner = owner or self.owner()
        p = self.wallet.mint([CoinState(a, owner, label) for a in amounts], rng=self.rng, cb_ids=cb_ids)
        return self.assemble(p, snapshot=snapshot)

    def spend(self, coins: Sequence[str], outputs: Sequence[CoinState], snapshot=None) -> Transaction:
        p = self.wallet.spend(coins, outputs, rng=self.rng)
        return self.assemble(p, snapshot=snapshot)

    def owner(self) -> bytes:
        if not self.wallet.keys:
            self.wallet.new_key(self.rng)
        return self.wallet.default_key

    # -- blocks ---------------------------------------------------------------

    def block(self, txs: Sequence[Transaction]) -> Block:
        b = self.osn.sign_block(Block(self.next_seq, self.prev_hash, tuple(txs)))
        self.next_seq += 1
        self.prev_hash = b.hash
        return b

    def commit(self, block: Block):
        verdict = validate_block(block, self.ctx, self.ledger)
        self.ledger.commit_block(block, verdict.valid)
        return verdict

    def run(self, txs: Sequence[Transaction]):
        """Cut ``txs`` into one block and commit it; returns the verdict."""
        return self.commit(self.block(txs))

    def learn(self, tx: Transaction, valid: bool = True) -> list[str]:
        """Record a committed fabcoin tx in the wallet; returns new coin keys."""
        if not valid:
            return []
        req = FabcoinRequest.decode(tx.proposal.args[0])
        spent = list(req.inputs) if tx.proposal.operation == "spend" else []
        self.wallet.learn(tx.tx_id, req.outputs, spent)
        return [coin_key(tx.tx_id, j) for j in range(1, len(req.outputs) + 1)]

    def state(self, key: str, ns: str = KV):
        return self.ledger.get_latest(ns_key(ns, key))


def unsigned_chain(n: int, seed: int = 0) -> list[Block]:
    """Blocks holding only marker transactions, chained but unsigned."""
    blocks, prev = [], ZERO_HASH
    for s in range(n):
        b = Block(s, prev, (time_to_cut(s, f"x{seed}"),))
        blocks.append(b)
        prev = b.hash
    return blocks


# ordering helpers ----------------------------------------------------------------

def fake_tx(i: int, pad: int = 0, client: str = "client0") -> Transaction:
    """A well-formed normal transaction whose size grows with ``pad``."""
    nonce = i.to_bytes(8, "big")
    p = Proposal("ch1", client, KV, "put", (str(i).encode(), b"x" * pad), nonce, derive_txid(client, nonce))
    rw = ReadWriteSet()
    return Transaction(TxType.NORMAL, p, rw, (Endorsement(p.tx_id, "peer0.org1", rw, b"", b"s"),))


def oracle_cut(entries: Sequence[Transaction], max_count: int, max_bytes: int) -> list[list[Transaction]]:
    """Batches the cutting rules produce for a log, written independently.

    Entries are appended to an open batch; a batch closes when adding the next
    entry would exceed ``max_bytes``, when it reaches ``max_count`` entries, or
    on the first time-to-cut naming the sequence number the open batch will get.
    """
    out: list[list[Transaction]] = []
    cur: list[Transaction] = []
    for e in entries:
        if e.type == TxType.TIME_TO_CUT:
            if cur and time_to_cut_seq(e) == len(out) + 1:
                out.append(cur)
                cur = []
            continue
        if cur and sum(t.size for t in cur) + e.size > max_bytes:
            out.append(cur)
            cur = []
        cur.append(e)
        if len(cur) == max_count:
            out.append(cur)
            cur = []
    return out


# serial oracle for the key-value workload -------------------------------------------

def _oracle_effects(op: str, a: Sequence[str], snap: dict):
    """Reads, range reads and writes ``op`` performs against ``snap`` (key -> (int, ver))."""
    val = lambda k: snap[k][0] if k in snap else 0  # noqa: E731
    if op == "put":
        return [], [], {a[0]: int(a[1])}
    if op == "incr":
        return [a[0]], [], {a[0]: val(a[0]) + 1}
    if op == "move":
        return [a[0], a[1]], [], {a[0]: val(a[0]) - 1, a[1]: val(a[1]) + 1}
    if op == "del":
        return [a[0]], [], ({a[0]: None} if a[0] in snap else {})
    if op == "scan":
        return [], [(a[0], a[1])], {a[2]: sum(1 for k in snap if a[0] <= k < a[1])}
    return [a[0]], [], {}


def oracle_validate(block_ops, snaps, state: dict, seq: int) -> list[bool]:
    """Decide validity for one block and apply it to ``state`` in place.

    ``block_ops`` holds (op, args, snapshot_height); ``snaps[h]`` is the state
    dict as of height h.  A tx is valid when each key it read still has the
    version it saw and each range it scanned holds the same (key, version) rows.
    """
    out = []
    for i, (op, args, h) in enumerate(block_ops):
        snap = snaps[h]
        reads, ranges, writes = _oracle_effects(op, args, snap)
        ok = all((snap.get(k) or (None, None))[1] == (state.get(k) or (None, None))[1] for k in reads)
        for s, e in ranges:
            rows = lambda d: sorted((k, v[1]) for k, v in d.items() if s <= k < e)  # noqa: E731
            ok = ok and rows(snap) == rows(state)
        out.append(ok)
        if ok:
            for k, v in writes.items():
                if v is None:
                    state.pop(k, None)
                else:
                    state[k] = (v, (seq, i))
    return out


def random_kv_op(rng: random.Random, n_keys: int) -> tuple[str, list[str]]:
    hot = max(1, n_keys // 10)
    key = lambda: f"k{rng.randrange(hot) if rng.random() < 0.5 else rng.randrange(n_keys):02d}"  # noqa: E731
    r = rng.random()
    if r < 0.25:
        return "put", [key(), str(rng.randrange(100))]
    if r < 0.5:
        return "incr", [key()]
    if r < 0.65:
        return "move", [key(), key()]
    if r < 0.75:
        return "del", [key()]
    if r < 0.9:
        lo, hi = sorted((rng.randrange(n_keys + 1), rng.randrange(n_keys + 1)))
        return "scan", [f"k{lo:02d}", f"k{hi:02d}", f"n{rng.randrange(3)}"]
    return "get", [key()]


def run_kv_workload(seed: int, n_txs: int = 300, n_keys: int = 50) -> dict:
    """Random contended workload through endorse/order/validate/commit.

    Returns counts of disagreements between the system and the oracles.
    """
    rng = random.Random(seed)
    c = Chan(orgs=2, seed=seed)
    views = [None, c.ledger.snapshot()]  # views[h] = StateView at height h
    snaps: list[dict] = [{}, {}]
    state: dict = {}
    serial: dict = {}
    committed: list[tuple[str, list[str]]] = []
    mism = {"bitmask": 0, "state": 0, "serial": 0, "txs": 0, "valid": 0}
    done = 0
    while done < n_txs:
        size = min(n_txs - done, rng.randint(1, 25))
        ops, txs = [], []
        for _ in range(size):
            op, args = random_kv_op(rng, n_keys)
            h = max(1, len(views) - 1 - rng.choice([0, 0, 0, 1, 2, 4]))
            txs.append(c.kv(op, *args, snapshot=views[h]))
            ops.append((op, args, h))
        seq = c.next_seq
        got = c.run(txs).valid
        want = oracle_validate(ops, snaps, state, seq)
        mism["bitmask"] += got != want
        for (op, args, _), ok in zip(ops, got):
            if ok:
                committed.append((op, args))
                kv_oracle(op, args, serial)
        views.append(c.ledger.snapshot())
        snaps.append(dict(state))
        done += size
    mism["txs"], mism["valid"] = done, len(committed)
    final = {split: int(v) for split, (v, _) in
             ((k.partition(":")[2], ent) for k, ent in c.ledger.snapshot().items())}
    mism["state"] = int(final != {k: v for k, (v, _) in state.items()})
    mism["serial"] = int(final != serial)
    return mism


def phantom_cases(seed: int, n: int = 20) -> dict:
    """Scans invalidated by a concurrent insert, delete or update inside the range.

    Each case simulates ``scan`` on the current snapshot, then orders a
    conflicting write ahead of it, either earlier in the same block or in an
    earlier block.  A write outside the range serves as control.
    """
    from evov.validate import Code
    rng = random.Random(seed)
    c = Chan(orgs=1, seed=seed)
    c.run([c.kv("put", f"k{i:02d}", "1") for i in range(0, 50, 2)])  # even keys exist
    res = {"cases": 0, "phantom": 0, "controls": 0, "controls_valid": 0}
    for _ in range(n):
        lo = rng.randrange(0, 40)
        hi = lo + rng.randint(3, 10)
        snap = c.ledger.snapshot()
        scan = c.kv("scan", f"k{lo:02d}", f"k{hi:02d}", "n0", snapshot=snap)
        inside = f"k{rng.randrange(lo, hi):02d}"
        kind = rng.choice(["insert", "delete", "update"])
        if kind == "insert":
            inside = f"k{rng.randrange(lo, hi):02d}x"
            w = c.kv("put", inside, "5", snapshot=snap)
        elif kind == "delete":
            k = f"k{(lo + 1) // 2 * 2:02d}"
            w = c.kv("del", k, snapshot=snap) if snap.get(f"kv:{k}") else c.kv("put", k, "3", snapshot=snap)
        else:
            w = c.kv("put", f"k{(lo + 1) // 2 * 2:02d}", "7", snapshot=snap)
        if rng.random() < 0.5:
            got = c.run([w, scan]).codes[1]
        else:
            c.run([w])
            got = c.run([scan]).codes[0]
        res["cases"] += 1
        res["phantom"] += got is Code.PHANTOM_READ
        # control: a write outside the range leaves a fresh scan valid
        snap = c.ledger.snapshot()
        scan2 = c.kv("scan", f"k{lo:02d}", f"k{hi:02d}", "n1", snapshot=snap)
        outside = c.kv("put", f"z{rng.randrange(1000)}", "1", snapshot=snap)
        codes = c.run([outside, scan2]).codes
        res["controls"] += 1
        res["controls_valid"] += codes == (Code.VALID, Code.VALID)
    return res


# crash-recovery sweep ----------------------------------------------------------------

def build_blocks(n_blocks: int, seed: int = 0) -> tuple[Chan, list[Block], list[bytes]]:
    """A committed run of ``n_blocks`` contended blocks on a control ledger.

    Returns the channel (whose ledger is the control), the unstamped blocks
    from genesis on, and the control state bytes at every height.
    """
    rng = random.Random(seed)
    c = Chan(orgs=2, seed=seed)
    blocks = [c.genesis]
    states = [b"", c.ledger.snapshot().encoded()]
    views = [c.ledger.snapshot()]
    for _ in range(n_blocks):
        txs = []
        for _ in range(rng.randint(1, 6)):
            op, args = random_kv_op(rng, 12)
            txs.append(c.kv(op, *args, snapshot=rng.choice(views[-3:])))
        b = c.block(txs)
        c.commit(b)
        blocks.append(b)
        views.append(c.ledger.snapshot())
        states.append(c.ledger.snapshot().encoded())
    return c, blocks, states


def crash_sweep(n_blocks: int = 50, seed: int = 0, checkpoint_every: int = 0, points=None) -> dict:
    """Crash at every point of every commit, recover, then finish the run.

    Counts crash points whose recovery or completion diverged from control.
    """
    from evov.ledger import (BLOCK_FILE, CRASH_POINTS, SAVEPOINT_FILE, MemoryStorage, SimulatedCrash,
                             decode_savepoint)
    from evov.validate import revalidator
    c, blocks, states = build_blocks(n_blocks, seed)
    control_file = c.ledger.storage.read(BLOCK_FILE)
    stored = [c.ledger.get_block(s) for s in range(len(blocks))]
    res = {"points": 0, "bad_state": 0, "savepoint_dropped": 0, "bad_final": 0, "no_crash": 0}
    for k in range(1, len(blocks)):
        for point in points or CRASH_POINTS:
            res["points"] += 1
            storage = MemoryStorage()
            led = Ledger(storage, checkpoint_every=checkpoint_every)
            for b in stored[:k]:
                led.commit_block(b, unpack_bitmask(b.metadata, len(b.txs)))
            before = decode_savepoint(storage.read(SAVEPOINT_FILE))
            led.crash_at = point
            try:
                led.commit_block(blocks[k], validate_block(blocks[k], c.ctx, led).valid)
                res["no_crash"] += 1
            except SimulatedCrash:
                pass
            again = Ledger(storage, checkpoint_every=checkpoint_every)
            again.recover(revalidator(c.ctx, again))
            if again.height not in (k, k + 1) or again.snapshot().encoded() != states[again.height]:
                res["bad_state"] += 1
            if decode_savepoint(storage.read(SAVEPOINT_FILE)) < before:
                res["savepoint_dropped"] += 1
            for b in blocks[again.height:]:
                again.commit_block(b, validate_block(b, c.ctx, again).valid)
            if again.snapshot().encoded() != states[-1] or storage.read(BLOCK_FILE) != control_file:
                res["bad_final"] += 1
    return res
