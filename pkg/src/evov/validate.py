"""Validation phase: VSCC per transaction, then the sequential read-write check."""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

from .chaincode import ChaincodeDefinition, parse_range_query, split_key
from .core import Block, EvovError, Transaction, TxType, Version, pack_bitmask, range_result_hash
from .endorse import check_proposal
from .ledger import Ledger, OutOfOrder, StateView
from .msp import MspDirectory, Role
from .policy import eval_policy


class Code(enum.Enum):
    VALID = "VALID"
    BAD_ENDORSEMENT = "BAD_ENDORSEMENT"
    MVCC_CONFLICT = "MVCC_CONFLICT"
    PHANTOM_READ = "PHANTOM_READ"
    DUPLICATE_TXID = "DUPLICATE_TXID"
    BAD_FORMAT = "BAD_FORMAT"


class BadBlock(EvovError):
    pass


@dataclass(frozen=True)
class ValidationVerdict:
    codes: tuple[Code, ...]

    @property
    def valid(self) -> list[bool]:
        return [c is Code.VALID for c in self.codes]

    @property
    def bitmask(self) -> bytes:
        return pack_bitmask(self.valid)


VsccFn = Callable[[Transaction, StateView, "ChannelContext"], bool]


def default_vscc(tx: Transaction, state: StateView, ctx: "ChannelContext") -> bool:
    """Every endorsement signature must verify and the signers must satisfy the policy."""
    defn = ctx.chaincodes[tx.proposal.chaincode_id]
    enc = tx.rwset.encoded
    endorsers = []
    seen = set()
    for e in tx.endorsements:
        if e.endorser_id in seen or e.tx_id != tx.tx_id or e.rwset.encoded != enc:
            return False
        seen.add(e.endorser_id)
        ident = ctx.msp.get(e.endorser_id)
        if ident is None or ident.role != Role.PEER:
            return False
        if not ctx.msp.verify(ident, e.signed_bytes(), e.signature):
            return False
        endorsers.append(ident)
    return eval_policy(defn.policy, endorsers)


@dataclass
class VsccRegistry:
    validators: dict[str, VsccFn] = field(default_factory=lambda: {"default": default_vscc})

    def register(self, vscc_id: str, fn: VsccFn) -> None:
        self.validators[vscc_id] = fn

    def get(self, vscc_id: str) -> Optional[VsccFn]:
        return self.validators.get(vscc_id)


@dataclass
class ChannelContext:
    """Static, genesis-derived inputs needed to validate a channel's blocks."""

    channel_id: str
    msp: MspDirectory
    chaincodes: dict[str, ChaincodeDefinition]
    vscc: VsccRegistry = field(default_factory=VsccRegistry)
    params: dict = field(default_factory=dict)  # application settings, e.g. fabcoin CBs


def check_block_signature(block: Block, msp: MspDirectory) -> bool:
    ident = msp.get(block.orderer_id)
    if ident is None or ident.role != Role.ORDERER:
        return False
    return msp.verify(ident, block.hash, block.orderer_sig)


def _vscc_one(tx: Transaction, ctx: ChannelContext, state: StateView) -> Code:
    if tx.type != TxType.NORMAL or tx.proposal is None:
        return Code.BAD_FORMAT
    p = tx.proposal
    defn = ctx.chaincodes.get(p.chaincode_id)
    if p.channel_id != ctx.channel_id or defn is None:
        return Code.BAD_FORMAT
    fn = ctx.vscc.get(defn.vscc_id)
    if fn is None:
        return Code.BAD_FORMAT
    if any(split_key(w.key)[0] != p.chaincode_id for w in tx.rwset.writes):
        return Code.BAD_FORMAT
    if not check_proposal(ctx.msp, p):
        return Code.BAD_FORMAT
    try:
        ok = fn(tx, state, ctx)
    except Exception:
        ok = False
    return Code.VALID if ok else Code.BAD_ENDORSEMENT


def vscc_check_block(block: Block, ctx: ChannelContext, state: StateView,
                     workers: int = 0) -> list[Code]:
    """Per-transaction VSCC verdicts; VALID here means 'passed VSCC'."""
    if workers > 1 and len(block.txs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda tx: _vscc_one(tx, ctx, state), block.txs))
    return [_vscc_one(tx, ctx, state) for tx in block.txs]


_MISSING = object()


def rw_check_block(block: Block, vscc: list[Code], state: StateView,
                   is_committed: Callable[[bytes], bool] = lambda _t: False) -> ValidationVerdict:
    """Sequential multi-version check against state plus earlier valid txs."""
    overlay: dict[str, Optional[tuple[bytes, Version]]] = {}
    seen: set[bytes] = set()
    codes = []

    def version(key):
        ent = overlay.get(key, _MISSING)
        if ent is _MISSING:
            return state.version(key)
        return ent[1] if ent is not None else None

    def range_hash(start, end):
        rows = {k: ver for k, _, ver in state.range(start, end)}
        for k, ent in overlay.items():
            if start <= k < end:
                if ent is None:
                    rows.pop(k, None)
                else:
                    rows[k] = ent[1]
        return range_result_hash(sorted(rows.items()))

    for i, (tx, vcode) in enumerate(zip(block.txs, vscc)):
        tx_id = tx.tx_id if tx.type == TxType.NORMAL and tx.proposal is not None else None
        code = vcode
        if code is Code.VALID:
            if tx_id in seen or is_committed(tx_id):
                code = Code.DUPLICATE_TXID
            elif any(version(r.key) != r.version for r in tx.rwset.reads):
                code = Code.MVCC_CONFLICT
            elif any(range_hash(*parse_range_query(rr.query)) != rr.result_hash
                     for rr in tx.rwset.range_reads):
                code = Code.PHANTOM_READ
        if tx_id is not None:
            seen.add(tx_id)
        if code is Code.VALID:
            ver = Version(block.seq, i)
            for w in tx.rwset.writes:
                overlay[w.key] = None if w.value is None else (w.value, ver)
        codes.append(code)
    return ValidationVerdict(tuple(codes))


def validate_block(block: Block, ctx: ChannelContext, ledger: Ledger, workers: int = 0) -> ValidationVerdict:
    if block.seq != ledger.height:
        raise OutOfOrder(f"expected block {ledger.height}, got {block.seq}")
    if block.seq > 0 and block.prev_hash != ledger.last_hash:
        raise BadBlock(f"block {block.seq} does not extend the local chain")
    state = ledger.snapshot()
    vs = vscc_check_block(block, ctx, state, workers)
    return rw_check_block(block, vs, state, ledger.has_tx)


def revalidator(ctx: ChannelContext, ledger: Ledger):
    """Callback for ``Ledger.recover`` re-running validation on a block."""
    def run(block: Block, state: StateView) -> list[bool]:
        if block.seq == 0:
            return [True] * len(block.txs)
        vs = vscc_check_block(block, ctx, state)
        return rw_check_block(block, vs, state, lambda t: _committed_before(ledger, t, block.seq)).valid
    return run


def _committed_before(ledger: Ledger, tx_id: bytes, seq: int) -> bool:
    loc = ledger.tx_index.get(tx_id)
    return loc is not None and loc.seq < seq
