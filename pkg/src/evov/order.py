"""Ordering service: per-channel total-order log, deterministic block cutting,
genesis bootstrap and block retention for deliver.

Ordering nodes never look at chaincode state.  Every node of a channel
consumes the same log and runs the same cutter, so they cut identical blocks;
the only timing-dependent input, the batch timeout, enters the log as a
time-to-cut entry and is thereby ordered like any transaction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

from .core import (
    Block,
    EvovError,
    Transaction,
    TxType,
    ZERO_HASH,
    time_to_cut,
    time_to_cut_seq,
)
from .msp import MspDirectory, Role, SigningIdentity, sign

log = logging.getLogger(__name__)


class ChannelExists(EvovError):
    pass


class UnknownChannel(EvovError):
    pass


class AccessDenied(EvovError):
    pass


class OversizedTransaction(EvovError):
    pass


class FatalLogCorruption(EvovError):
    pass


@dataclass
class ChannelConfig:
    channel_id: str
    batch_max_count: int = 500
    batch_max_bytes: int = 512 * 1024
    batch_timeout: float = 2.0  # seconds
    osn_addresses: list[str] = field(default_factory=list)
    roster: list[dict] = field(default_factory=list)  # MSP identities
    broadcast_acl: list[str] = field(default_factory=lambda: ["role:client"])
    deliver_acl: list[str] = field(default_factory=lambda: ["role:peer", "role:orderer"])
    chaincodes: list[dict] = field(default_factory=list)  # {"id", "policy", "vscc"}
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_max_count < 1:
            raise ValueError("batch_max_count must be >= 1")
        if self.batch_max_bytes < 1:
            raise ValueError("batch_max_bytes must be >= 1")

    def to_payload(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_payload(cls, payload: bytes) -> "ChannelConfig":
        return cls(**json.loads(payload))

    def msp(self) -> MspDirectory:
        return MspDirectory.from_config(self.roster)


def acl_allows(acl: list[str], msp: MspDirectory, ident_id: str) -> bool:
    ident = msp.get(ident_id)
    if ident is None:
        return False
    for rule in acl:
        kind, _, name = rule.partition(":")
        if rule == "*" or (kind == "id" and name == ident.id) or (kind == "org" and name == ident.org) \
                or (kind == "role" and name == ident.role.value):
            return True
    return False


def bootstrap_channel(cfg: ChannelConfig) -> Block:
    """Unsigned genesis block (seq 0) carrying the channel configuration."""
    return Block(0, ZERO_HASH, (Transaction(TxType.CONFIG, payload=cfg.to_payload()),))


def genesis_config(genesis: Block) -> ChannelConfig:
    if genesis.seq != 0 or len(genesis.txs) != 1 or genesis.txs[0].type != TxType.CONFIG:
        raise EvovError("not a genesis block")
    return ChannelConfig.from_payload(genesis.txs[0].payload)


class TotalOrderLog:
    """Ordered, gap-free entry sequence shared by all ordering nodes of a channel.

    Stand-in for the crash-tolerant broker of a cluster deployment.  Appends
    are serialized; readers see the same entry at every index.
    """

    def __init__(self):
        self.entries: list[Transaction] = []
        self.listeners: list[Callable[[int], None]] = []

    def append(self, entry: Transaction) -> int:
        self.entries.append(entry)
        idx = len(self.entries) - 1
        for fn in list(self.listeners):
            fn(idx)
        return idx

    def read(self, index: int) -> Transaction:
        return self.entries[index]

    def __len__(self):
        return len(self.entries)


@dataclass
class CutResult:
    blocks: list[Block]
    timer_seq: Optional[int] = None  # batch just became non-empty: arm the timer


class BlockCutter:
    """Deterministic batching of one channel's log into unsigned blocks."""

    def __init__(self, cfg: ChannelConfig, genesis: Block):
        self.cfg = cfg
        self.next_seq = genesis.seq + 1
        self.prev_hash = genesis.hash
        self.next_index = 0
        self.pending: list[Transaction] = []
        self.pending_bytes = 0

    def _cut(self) -> Block:
        b = Block(self.next_seq, self.prev_hash, tuple(self.pending))
        self.next_seq += 1
        self.prev_hash = b.hash
        self.pending = []
        self.pending_bytes = 0
        return b

    def consume(self, index: int, entry: Transaction) -> CutResult:
        if index != self.next_index:
            raise FatalLogCorruption(f"expected log index {self.next_index}, got {index}")
        self.next_index += 1
        out = CutResult([])
        if entry.type == TxType.TIME_TO_CUT:
            # only the first time-to-cut for the pending block counts
            if time_to_cut_seq(entry) == self.next_seq and self.pending:
                out.blocks.append(self._cut())
            return out
        size = entry.size
        if self.pending and self.pending_bytes + size > self.cfg.batch_max_bytes:
            out.blocks.append(self._cut())
        if not self.pending:
            out.timer_seq = self.next_seq
        self.pending.append(entry)
        self.pending_bytes += size
        if len(self.pending) >= self.cfg.batch_max_count:
            out.blocks.append(self._cut())
            out.timer_seq = None
        return out


def cut_blocks(cutter: BlockCutter, index: int, entry: Transaction) -> list[Block]:
    return cutter.consume(index, entry).blocks


class _Channel:
    def __init__(self, cfg: ChannelConfig, genesis: Block, log_: TotalOrderLog, msp: MspDirectory):
        self.cfg = cfg
        self.log = log_
        self.msp = msp
        self.cutter = BlockCutter(cfg, genesis)
        self.blocks: dict[int, Block] = {0: genesis}
        self.height = 1
        self.timer_armed_for: Optional[int] = None


class OrderingNode:
    """One ordering service node (OSN).

    ``call_later(delay_seconds, fn)`` is provided by the host (simulator or
    event loop) and drives the batch timer.  ``on_block(channel, block)`` is
    invoked for each newly cut block.
    """

    def __init__(self, signer: SigningIdentity, call_later: Optional[Callable] = None,
                 retention: Optional[int] = None):
        self.signer = signer
        self.call_later = call_later
        self.retention = retention
        self.channels: dict[str, _Channel] = {}
        self.on_block: Optional[Callable[[str, Block], None]] = None

    @property
    def id(self) -> str:
        return self.signer.id

    def bootstrap_channel(self, cfg: ChannelConfig, log_: TotalOrderLog,
                          genesis: Optional[Block] = None) -> Block:
        if cfg.channel_id in self.channels:
            raise ChannelExists(cfg.channel_id)
        genesis = genesis or self.sign_block(bootstrap_channel(cfg))
        self.channels[cfg.channel_id] = _Channel(cfg, genesis, log_, cfg.msp())
        return genesis

    def _chan(self, channel_id: str) -> _Channel:
        try:
            return self.channels[channel_id]
        except KeyError:
            raise UnknownChannel(channel_id) from None

    def sign_block(self, b: Block) -> Block:
        return b.with_signature(self.signer.id, sign(self.signer, b.hash))

    def broadcast(self, channel_id: str, tx: Transaction, submitter: str) -> int:
        ch = self._chan(channel_id)
        if not acl_allows(ch.cfg.broadcast_acl, ch.msp, submitter):
            raise AccessDenied(f"{submitter} may not broadcast on {channel_id}")
        if tx.type != TxType.NORMAL:
            raise AccessDenied("clients may only broadcast normal transactions")
        if tx.size > ch.cfg.batch_max_bytes:
            raise OversizedTransaction(f"{tx.size} bytes > batch_max_bytes {ch.cfg.batch_max_bytes}")
        return ch.log.append(tx)

    def catch_up(self, channel_id: str) -> list[Block]:
        """Consume every log entry not yet processed; return newly cut blocks."""
        ch = self._chan(channel_id)
        new = []
        while ch.cutter.next_index < len(ch.log):
            idx = ch.cutter.next_index
            res = ch.cutter.consume(idx, ch.log.read(idx))
            for b in res.blocks:
                signed = self.sign_block(b)
                ch.blocks[b.seq] = signed
                ch.height = b.seq + 1
                new.append(signed)
                if self.retention is not None:
                    ch.blocks.pop(b.seq - self.retention, None)
            if res.timer_seq is not None:
                self._arm_timer(channel_id, res.timer_seq)
        if self.on_block:
            for b in new:
                self.on_block(channel_id, b)
        return new

    def _arm_timer(self, channel_id: str, seq: int) -> None:
        ch = self.channels[channel_id]
        if self.call_later is None or ch.timer_armed_for == seq:
            return
        ch.timer_armed_for = seq
        self.call_later(ch.cfg.batch_timeout, lambda: self._timer_fired(channel_id, seq))

    def _timer_fired(self, channel_id: str, seq: int) -> None:
        ch = self.channels.get(channel_id)
        if ch is None:
            return
        if ch.cutter.next_seq == seq and ch.cutter.pending:
            ch.log.append(time_to_cut(seq, self.id))

    def deliver(self, channel_id: str, seq: int, requester: Optional[str] = None) -> Optional[Block]:
        """Block ``seq`` once cut, else None (the caller waits)."""
        ch = self._chan(channel_id)
        if requester is not None and not acl_allows(ch.cfg.deliver_acl, ch.msp, requester):
            raise AccessDenied(f"{requester} may not deliver from {channel_id}")
        return ch.blocks.get(seq)

    def height(self, channel_id: str) -> int:
        return self._chan(channel_id).height


def orderer_identities(msp: MspDirectory) -> list[str]:
    return [i.id for i in msp.by_role(Role.ORDERER)]
