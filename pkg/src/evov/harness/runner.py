"""run_scenario: execute a scenario and check the safety properties on the result."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..chaincode import split_key
from ..core import Block, TxType, Version, unpack_bitmask, verify_chain
from ..fabcoin import CHAINCODE_ID as FABCOIN, CoinState
from ..ledger import BLOCK_FILE, INDEX_FILE, SAVEPOINT_FILE, DiskStorage
from . import chain
from .metrics import TxRecord, stage_table, write_stage_csv, write_tx_csv
from .network import Network
from .scenario import Scenario
from .sim import US


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class RunReport:
    scenario: Scenario
    checks: list[Check]
    blocks: list[Block]  # observer's committed chain
    states: dict[str, bytes]  # peer id -> encoded latest state
    heights: dict[str, int]
    records: list[TxRecord]
    stats: dict
    trace_digest: str
    network: Optional[Network] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.ok]

    def check(self, name: str) -> Check:
        return next(c for c in self.checks if c.name == name)

    def digest(self) -> str:
        """Fingerprint of block bytes, metrics and event trace."""
        h = hashlib.sha256()
        for b in self.blocks:
            h.update(b.encoded)
        h.update(write_tx_csv(self.records).encode())
        h.update(self.trace_digest.encode())
        return h.hexdigest()

    def summary(self) -> dict:
        return {
            "name": self.scenario.name,
            "seed": self.scenario.seed,
            "ok": self.ok,
            "checks": {c.name: {"ok": c.ok, "detail": c.detail} for c in self.checks},
            "heights": self.heights,
            "stats": self.stats,
            "digest": self.digest(),
        }

    def save(self, out: Path | str) -> None:
        """Write the run directory read by ``evov verify`` and the fabcoin CLI."""
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.json").write_text(json.dumps(self.scenario.to_dict(), indent=2, sort_keys=True))
        (out / "report.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        write_tx_csv(self.records, out / "metrics.csv")
        write_stage_csv(stage_table(self.records), out / "stages.csv")
        if self.network is not None:
            for p in self.network.peers:
                dst = DiskStorage(out / "peers" / p.id)
                for name in (BLOCK_FILE, INDEX_FILE, SAVEPOINT_FILE):
                    if p.storage.exists(name):
                        dst.replace(name, p.storage.read(name))


def run_scenario(sc: Scenario | dict, keep_network: bool = True, live: bool = False) -> RunReport:
    """Run ``sc`` to completion and check every property on the outcome.

    ``live`` swaps virtual time for the wall clock and local sockets.
    """
    if isinstance(sc, dict):
        sc = Scenario.from_dict(sc)
    net = Network(sc, live=live)
    net.run()
    checks = check_network(net)
    obs = net.observer
    records = [r for r in net.records.values()]
    stats = collect_stats(net)
    return RunReport(
        scenario=sc,
        checks=checks,
        blocks=list(obs.ledger.blocks()),
        states={p.id: p.ledger.snapshot().encoded() for p in net.peers},
        heights={p.id: p.ledger.height for p in net.peers},
        records=records,
        stats=stats,
        trace_digest=net.transport.trace_digest,
        network=net if keep_network else None,
    )


def collect_stats(net: Network) -> dict:
    agg: dict = {}
    for c in net.clients:
        for k, v in c.stats.items():
            if isinstance(v, list):
                agg[k] = [a + b for a, b in zip(agg.get(k, [0] * len(v)), v)]
            else:
                agg[k] = agg.get(k, 0) + v
    obs = net.observer.ledger
    n_valid = n_total = 0
    for b in obs.blocks():
        bits = unpack_bitmask(b.metadata, len(b.txs))
        for tx, ok in zip(b.txs, bits):
            if tx.type == TxType.NORMAL:
                n_total += 1
                n_valid += ok
    agg.update({
        "virtual_seconds": net.sim.now / US,
        "events": net.sim.events_run,
        "messages_sent": net.transport.sent,
        "messages_dropped": net.transport.dropped,
        "blocks": obs.height,
        "txs_in_blocks": n_total,
        "txs_valid": n_valid,
        "timed_out": net.timed_out,
        "phase_times": {k: v / US for k, v in net.phase_times.items()},
        "gossip_dropped_bad": sum(p.gossip.stats["dropped_bad"] for p in net.peers),
        "tampered_sent": sum(p.stats["tampered_sent"] for p in net.peers),
    })
    return agg


# property checks ---------------------------------------------------------------


def check_network(net: Network) -> list[Check]:
    chains = {p.id: list(p.ledger.blocks()) for p in net.peers}
    osn_chains = {o.id: o.blocks() for o in net.osns if o.alive}
    checks = [
        Check("completed", not net.timed_out,
              "" if not net.timed_out else f"workload unfinished at max_time={net.sc.max_time}s"),
        check_agreement(chains, osn_chains),
        check_hash_chain(chains),
        check_no_skipping(chains),
        check_no_creation(chains, net.broadcast_log),
        check_oracle_state(net),
        check_convergence(net),
        check_metrics(net),
    ]
    if net.sc.faults.fault_free:
        checks.append(check_validity(chains, net.broadcast_log))
    if net.sc.workload.kind == "fabcoin":
        checks.append(check_no_double_spend(net.observer.ledger.blocks()))
        checks.append(check_conservation(net))
    else:
        checks.append(check_nondet_contained(net))
    return checks


def check_agreement(chains: dict[str, list[Block]], osn_chains: dict[str, list[Block]]) -> Check:
    seen: dict[int, tuple[str, bytes]] = {}
    for who, blocks in list(osn_chains.items()) + list(chains.items()):
        for b in blocks:
            prev = seen.setdefault(b.seq, (who, b.body))
            if prev[1] != b.body:
                return Check("agreement", False, f"block {b.seq} differs between {prev[0]} and {who}")
    return Check("agreement", True, f"{len(seen)} sequence numbers compared")


def check_hash_chain(chains: dict[str, list[Block]]) -> Check:
    for who, blocks in chains.items():
        bad = verify_chain(blocks)
        if bad is not None:
            return Check("hash_chain", False, f"{who}: block {bad} does not extend its predecessor")
    return Check("hash_chain", True)


def check_no_skipping(chains: dict[str, list[Block]]) -> Check:
    for who, blocks in chains.items():
        for i, b in enumerate(blocks):
            if b.seq != i:
                return Check("no_skipping", False, f"{who}: position {i} holds block {b.seq}")
    return Check("no_skipping", True)


def check_no_creation(chains: dict[str, list[Block]], broadcast: dict[bytes, bytes]) -> Check:
    for who, blocks in chains.items():
        for b in blocks:
            for i, tx in enumerate(b.txs):
                if tx.type == TxType.NORMAL and broadcast.get(tx.tx_id) != tx.encoded:
                    return Check("no_creation", False, f"{who}: tx ({b.seq},{i}) was never broadcast")
    return Check("no_creation", True)


def check_validity(chains: dict[str, list[Block]], broadcast: dict[bytes, bytes]) -> Check:
    for who, blocks in chains.items():
        have = {tx.tx_id for b in blocks for tx in b.txs if tx.type == TxType.NORMAL}
        missing = set(broadcast) - have
        if missing:
            return Check("validity", False, f"{who}: {len(missing)} broadcast txs never delivered")
    return Check("validity", True, f"{len(broadcast)} txs delivered everywhere")


def serial_replay(blocks) -> tuple[dict, list[tuple[int, int]]]:
    """Plain-dict oracle: apply txs one at a time, re-checking every read version.

    Returns the final state and the coordinates of txs whose stored verdict
    disagrees with the oracle's read/duplicate check.
    """
    state: dict[str, tuple[bytes, Version]] = {}
    seen: set[bytes] = set()
    disagreements = []
    for b in blocks:
        bits = unpack_bitmask(b.metadata, len(b.txs))
        for i, (tx, ok) in enumerate(zip(b.txs, bits)):
            if tx.type != TxType.NORMAL:
                continue
            fresh = tx.tx_id not in seen
            seen.add(tx.tx_id)
            reads_ok = all((state[r.key][1] if r.key in state else None) == r.version for r in tx.rwset.reads)
            if ok and not (fresh and reads_ok):
                disagreements.append((b.seq, i))
            if ok:
                for w in tx.rwset.writes:
                    if w.value is None:
                        state.pop(w.key, None)
                    else:
                        state[w.key] = (w.value, Version(b.seq, i))
    return state, disagreements


def check_oracle_state(net: Network) -> Check:
    for p in net.peers:
        state, bad = serial_replay(p.ledger.blocks())
        if bad:
            return Check("oracle_state", False, f"{p.id}: valid tx {bad[0]} fails serial re-check")
        if state != p.ledger.snapshot().as_dict():
            return Check("oracle_state", False, f"{p.id}: state differs from serial replay")
    return Check("oracle_state", True)


def check_convergence(net: Network) -> Check:
    live = net.live_peers()
    if not live:
        return Check("convergence", True, "no live peers")
    by_height: dict[int, bytes] = {}
    for p in net.peers:
        enc = p.ledger.snapshot().encoded()
        prev = by_height.setdefault(p.ledger.height, enc)
        if prev != enc:
            return Check("convergence", False, f"{p.id}: state differs from another peer at height {p.ledger.height}")
    heights = {p.ledger.height for p in live}
    top = max(o.node.height(net.channel) for o in net.osns if o.alive) if any(o.alive for o in net.osns) else 0
    if len(heights) != 1 or (top and heights.pop() < top):
        detail = ", ".join(f"{p.id}={p.ledger.height}" for p in live)
        return Check("convergence", False, f"live peers not caught up (orderer {top}): {detail}")
    return Check("convergence", True)


def check_metrics(net: Network) -> Check:
    for r in net.records.values():
        if r.done and not r.identities_hold():
            return Check("metrics_identities", False, f"tx {r.tx_id[:12]} breaks the stage sums")
    return Check("metrics_identities", True)


def check_no_double_spend(blocks) -> Check:
    created: set[str] = set()
    deleted: set[str] = set()
    for b in blocks:
        bits = unpack_bitmask(b.metadata, len(b.txs))
        for i, (tx, ok) in enumerate(zip(b.txs, bits)):
            if not ok or tx.type != TxType.NORMAL or tx.proposal.chaincode_id != FABCOIN:
                continue
            for w in tx.rwset.writes:
                if w.value is None:
                    if w.key in deleted:
                        return Check("no_double_spend", False, f"coin {w.key} spent twice (block {b.seq})")
                    deleted.add(w.key)
                else:
                    if w.key in created:
                        return Check("no_double_spend", False, f"coin {w.key} created twice")
                    created.add(w.key)
    if deleted - created:
        return Check("no_double_spend", False, "spend of a coin that was never created")
    return Check("no_double_spend", True, f"{len(deleted)} coins spent once")


def check_conservation(net: Network) -> Check:
    minted = 0
    for b in net.observer.ledger.blocks():
        bits = unpack_bitmask(b.metadata, len(b.txs))
        for tx, ok in zip(b.txs, bits):
            if ok and tx.type == TxType.NORMAL and tx.proposal.operation == "mint":
                minted += sum(CoinState.decode(w.value).amount for w in tx.rwset.writes if w.value)
    live = sum(CoinState.decode(v).amount for k, (v, _) in net.observer.ledger.snapshot().items()
               if split_key(k)[0] == FABCOIN)
    if live != minted:
        return Check("conservation", False, f"live coins {live} != minted {minted}")
    return Check("conservation", True, f"{minted} units")


def check_nondet_contained(net: Network) -> Check:
    for p in net.peers:
        leaked = [k for k, _ in p.ledger.snapshot().items() if split_key(k)[0] == chain.NONDET]
        if leaked:
            return Check("nondet_contained", False, f"{p.id} committed nondeterministic key {leaked[0]}")
    return Check("nondet_contained", True)
