"""Domain types, canonical binary encoding and hashing.

Every value that gets hashed or signed goes through the encoders in this
module.  The format is length-prefixed and field-order-fixed (see
docs/wire.md); integers are big-endian.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

HASH_NAME = "sha256"
HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)


class EvovError(Exception):
    """Base class for all errors raised by this package."""


class InvalidNonce(EvovError):
    pass


class DecodeError(EvovError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# primitive writer / reader


class Writer:
    __slots__ = ("buf",)

    def __init__(self):
        self.buf = bytearray()

    def u8(self, v: int) -> "Writer":
        self.buf.append(v)
        return self

    def u32(self, v: int) -> "Writer":
        self.buf += struct.pack(">I", v)
        return self

    def u64(self, v: int) -> "Writer":
        self.buf += struct.pack(">Q", v)
        return self

    def raw(self, b: bytes) -> "Writer":
        self.buf += b
        return self

    def bytes_(self, b: bytes) -> "Writer":
        self.buf += struct.pack(">I", len(b))
        self.buf += b
        return self

    def str_(self, s: str) -> "Writer":
        return self.bytes_(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return bytes(self.buf)


class Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError(f"truncated input at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def bytes_(self) -> bytes:
        return bytes(self._take(self.u32()))

    def str_(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(str(e)) from None

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")


# ---------------------------------------------------------------------------
# domain types


class Cmp(enum.IntEnum):
    LT = -1
    EQ = 0
    GT = 1


@dataclass(frozen=True, order=True)
class Version:
    """Commit position of the transaction that wrote a key."""

    block_num: int
    tx_num: int

    def __post_init__(self):
        if self.block_num < 0 or self.tx_num < 0:
            raise ValueError("version components must be non-negative")

    def __str__(self):
        return f"({self.block_num},{self.tx_num})"


def compare_version(a: Version, b: Version) -> Cmp:
    ka, kb = (a.block_num, a.tx_num), (b.block_num, b.tx_num)
    if ka < kb:
        return Cmp.LT
    if ka > kb:
        return Cmp.GT
    return Cmp.EQ


@dataclass(frozen=True)
class KVRead:
    key: str
    version: Optional[Version]  # None: key was absent in the snapshot


@dataclass(frozen=True)
class RangeRead:
    query: str
    result_hash: bytes


@dataclass(frozen=True)
class KVWrite:
    key: str
    value: Optional[bytes]  # None: DELETE

    @property
    def is_delete(self) -> bool:
        return self.value is None


@dataclass(frozen=True)
class ReadWriteSet:
    reads: tuple[KVRead, ...] = ()
    range_reads: tuple[RangeRead, ...] = ()
    writes: tuple[KVWrite, ...] = ()

    def __post_init__(self):
        if len({r.key for r in self.reads}) != len(self.reads):
            raise ValueError("duplicate key in readset")
        if len({w.key for w in self.writes}) != len(self.writes):
            raise ValueError("duplicate key in writeset")

    @cached_property
    def encoded(self) -> bytes:
        w = Writer()
        _write_rwset(w, self)
        return w.getvalue()

    @cached_property
    def digest(self) -> bytes:
        return sha256(self.encoded)


class TxType(enum.IntEnum):
    NORMAL = 0
    TIME_TO_CUT = 1
    CONFIG = 2


@dataclass(frozen=True)
class Proposal:
    channel_id: str
    client_id: str
    chaincode_id: str
    operation: str
    args: tuple[bytes, ...]
    nonce: bytes
    tx_id: bytes
    client_sig: bytes = b""

    def signed_bytes(self) -> bytes:
        """Bytes covered by the client signature (everything but the signature)."""
        w = Writer()
        _write_proposal_body(w, self)
        return w.getvalue()

    @cached_property
    def encoded(self) -> bytes:
        w = Writer()
        _write_proposal(w, self)
        return w.getvalue()


@dataclass(frozen=True)
class Endorsement:
    tx_id: bytes
    endorser_id: str
    rwset: ReadWriteSet
    response: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return endorsement_message(self.tx_id, self.rwset, self.response)


def endorsement_message(tx_id: bytes, rwset: ReadWriteSet, response: bytes) -> bytes:
    w = Writer()
    w.u8(_TAG_ENDORSEMENT_MSG).raw(tx_id).bytes_(rwset.encoded).bytes_(response)
    return w.getvalue()


@dataclass(frozen=True)
class Transaction:
    type: TxType
    proposal: Optional[Proposal] = None
    rwset: ReadWriteSet = field(default_factory=ReadWriteSet)
    endorsements: tuple[Endorsement, ...] = ()
    payload: bytes = b""

    def __post_init__(self):
        if self.type == TxType.NORMAL:
            if self.proposal is None:
                raise ValueError("NORMAL transaction needs a proposal")
            if not self.endorsements:
                raise ValueError("NORMAL transaction needs endorsements")
            enc = self.rwset.encoded
            for e in self.endorsements:
                if e.rwset.encoded != enc:
                    raise ValueError("endorsement rwset differs from transaction rwset")

    @property
    def tx_id(self) -> bytes:
        if self.proposal is not None:
            return self.proposal.tx_id
        return sha256(self.encoded)

    @cached_property
    def encoded(self) -> bytes:
        w = Writer()
        _write_tx(w, self)
        return w.getvalue()

    @property
    def size(self) -> int:
        return len(self.encoded)


def time_to_cut(block_seq: int, osn_id: str = "") -> Transaction:
    """Marker asking every orderer to close the pending block ``block_seq``."""
    payload = Writer().u64(block_seq).str_(osn_id).getvalue()
    return Transaction(TxType.TIME_TO_CUT, payload=payload)


def time_to_cut_seq(tx: Transaction) -> int:
    return Reader(tx.payload).u64()


@dataclass(frozen=True)
class Block:
    seq: int
    prev_hash: bytes
    txs: tuple[Transaction, ...]
    metadata: Optional[bytes] = None  # validity bitmask, set at commit
    orderer_id: str = ""
    orderer_sig: bytes = b""

    @cached_property
    def body(self) -> bytes:
        """Header plus transactions; the part covered by the hash chain."""
        w = Writer()
        w.u8(_TAG_BLOCK).u64(self.seq).raw(self.prev_hash).u32(len(self.txs))
        for tx in self.txs:
            w.bytes_(tx.encoded)
        return w.getvalue()

    @cached_property
    def hash(self) -> bytes:
        return sha256(self.body)

    @cached_property
    def encoded(self) -> bytes:
        w = Writer().raw(self.body)
        if self.metadata is None:
            w.u8(0)
        else:
            w.u8(1).bytes_(self.metadata)
        w.str_(self.orderer_id).bytes_(self.orderer_sig)
        return w.getvalue()

    def with_metadata(self, bitmask: bytes) -> "Block":
        return Block(self.seq, self.prev_hash, self.txs, bitmask, self.orderer_id, self.orderer_sig)

    def with_signature(self, orderer_id: str, sig: bytes) -> "Block":
        return Block(self.seq, self.prev_hash, self.txs, self.metadata, orderer_id, sig)


def range_result_hash(results: Iterable[tuple[str, Optional[Version]]]) -> bytes:
    """Hash of the (key, version) list returned by a range query."""
    items = list(results)
    w = Writer().u32(len(items))
    for key, ver in items:
        w.str_(key)
        _write_opt_version(w, ver)
    return sha256(w.getvalue())


def hash_block(b: Block) -> bytes:
    return b.hash


def derive_txid(client_id: str, nonce: bytes) -> bytes:
    if not nonce:
        raise InvalidNonce("nonce must be non-empty")
    return sha256(Writer().str_(client_id).getvalue() + nonce)


# ---------------------------------------------------------------------------
# bitmask helpers


def pack_bitmask(bits: Sequence[bool]) -> bytes:
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i >> 3] |= 1 << (i & 7)
    return bytes(out)


def unpack_bitmask(mask: bytes, n: int) -> list[bool]:
    if len(mask) != (n + 7) // 8:
        raise DecodeError("bitmask length does not match transaction count")
    return [bool(mask[i >> 3] >> (i & 7) & 1) for i in range(n)]


# ---------------------------------------------------------------------------
# encoders

_TAG_VERSION = 0x01
_TAG_RWSET = 0x02
_TAG_PROPOSAL = 0x03
_TAG_ENDORSEMENT = 0x04
_TAG_TX = 0x05
_TAG_BLOCK = 0x06
_TAG_ENDORSEMENT_MSG = 0x07


def _write_opt_version(w: Writer, v: Optional[Version]) -> None:
    if v is None:
        w.u8(0)
    else:
        w.u8(1).u64(v.block_num).u64(v.tx_num)


def _read_opt_version(r: Reader) -> Optional[Version]:
    flag = r.u8()
    if flag == 0:
        return None
    if flag != 1:
        raise DecodeError("bad option flag")
    return Version(r.u64(), r.u64())


def _write_rwset(w: Writer, s: ReadWriteSet) -> None:
    w.u8(_TAG_RWSET).u32(len(s.reads))
    for rd in s.reads:
        w.str_(rd.key)
        _write_opt_version(w, rd.version)
    w.u32(len(s.range_reads))
    for rr in s.range_reads:
        w.str_(rr.query).raw(rr.result_hash)
    w.u32(len(s.writes))
    for wr in s.writes:
        w.str_(wr.key)
        if wr.value is None:
            w.u8(1)
        else:
            w.u8(0).bytes_(wr.value)


def _read_rwset(r: Reader) -> ReadWriteSet:
    _expect(r, _TAG_RWSET)
    reads = tuple(KVRead(r.str_(), _read_opt_version(r)) for _ in range(r.u32()))
    ranges = tuple(RangeRead(r.str_(), r.raw(HASH_SIZE)) for _ in range(r.u32()))
    writes = []
    for _ in range(r.u32()):
        key = r.str_()
        action = r.u8()
        if action == 0:
            writes.append(KVWrite(key, r.bytes_()))
        elif action == 1:
            writes.append(KVWrite(key, None))
        else:
            raise DecodeError("bad write action")
    try:
        return ReadWriteSet(reads, ranges, tuple(writes))
    except ValueError as e:
        raise DecodeError(str(e)) from None


def _write_proposal_body(w: Writer, p: Proposal) -> None:
    w.u8(_TAG_PROPOSAL).str_(p.channel_id).str_(p.client_id).str_(p.chaincode_id).str_(p.operation)
    w.u32(len(p.args))
    for a in p.args:
        w.bytes_(a)
    w.bytes_(p.nonce).raw(p.tx_id)


def _write_proposal(w: Writer, p: Proposal) -> None:
    _write_proposal_body(w, p)
    w.bytes_(p.client_sig)


def _read_proposal(r: Reader) -> Proposal:
    _expect(r, _TAG_PROPOSAL)
    channel, client, cc, op = r.str_(), r.str_(), r.str_(), r.str_()
    args = tuple(r.bytes_() for _ in range(r.u32()))
    nonce = r.bytes_()
    tx_id = r.raw(HASH_SIZE)
    return Proposal(channel, client, cc, op, args, nonce, tx_id, r.bytes_())


def _write_endorsement(w: Writer, e: Endorsement) -> None:
    w.u8(_TAG_ENDORSEMENT).raw(e.tx_id).str_(e.endorser_id)
    w.raw(e.rwset.encoded)
    w.bytes_(e.response).bytes_(e.signature)


def _read_endorsement(r: Reader) -> Endorsement:
    _expect(r, _TAG_ENDORSEMENT)
    return Endorsement(r.raw(HASH_SIZE), r.str_(), _read_rwset(r), r.bytes_(), r.bytes_())


def _write_tx(w: Writer, t: Transaction) -> None:
    w.u8(_TAG_TX).u8(int(t.type))
    if t.proposal is None:
        w.u8(0)
    else:
        w.u8(1).raw(t.proposal.encoded)
    w.raw(t.rwset.encoded)
    w.u32(len(t.endorsements))
    for e in t.endorsements:
        _write_endorsement(w, e)
    w.bytes_(t.payload)


def _read_tx(r: Reader) -> Transaction:
    _expect(r, _TAG_TX)
    try:
        ttype = TxType(r.u8())
    except ValueError:
        raise DecodeError("unknown transaction type") from None
    flag = r.u8()
    if flag not in (0, 1):
        raise DecodeError("bad option flag")
    proposal = _read_proposal(r) if flag else None
    rwset = _read_rwset(r)
    ends = tuple(_read_endorsement(r) for _ in range(r.u32()))
    payload = r.bytes_()
    try:
        return Transaction(ttype, proposal, rwset, ends, payload)
    except ValueError as e:
        raise DecodeError(str(e)) from None


def _expect(r: Reader, tag: int) -> None:
    got = r.u8()
    if got != tag:
        raise DecodeError(f"expected tag {tag:#x}, got {got:#x}")


# ---------------------------------------------------------------------------
# public encode / decode


def canonical_encode(obj) -> bytes:
    """Deterministic, injective byte encoding of any core value."""
    if isinstance(obj, (Block, Transaction, Proposal, ReadWriteSet)):
        return obj.encoded
    w = Writer()
    if isinstance(obj, Version):
        w.u8(_TAG_VERSION).u64(obj.block_num).u64(obj.tx_num)
    elif isinstance(obj, Endorsement):
        _write_endorsement(w, obj)
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")
    return w.getvalue()


def decode_version(data: bytes) -> Version:
    r = Reader(data)
    _expect(r, _TAG_VERSION)
    v = Version(r.u64(), r.u64())
    r.done()
    return v


def decode_rwset(data: bytes) -> ReadWriteSet:
    r = Reader(data)
    s = _read_rwset(r)
    r.done()
    return s


def decode_proposal(data: bytes) -> Proposal:
    r = Reader(data)
    p = _read_proposal(r)
    r.done()
    return p


def decode_endorsement(data: bytes) -> Endorsement:
    r = Reader(data)
    e = _read_endorsement(r)
    r.done()
    return e


def decode_tx(data: bytes) -> Transaction:
    r = Reader(data)
    t = _read_tx(r)
    r.done()
    return t


def decode_block(data: bytes) -> Block:
    r = Reader(data)
    _expect(r, _TAG_BLOCK)
    seq = r.u64()
    prev = r.raw(HASH_SIZE)
    txs = tuple(decode_tx(r.bytes_()) for _ in range(r.u32()))
    flag = r.u8()
    if flag not in (0, 1):
        raise DecodeError("bad option flag")
    meta = r.bytes_() if flag else None
    oid = r.str_()
    sig = r.bytes_()
    r.done()
    return Block(seq, prev, txs, meta, oid, sig)


def verify_chain(blocks: Iterable[Block]) -> Optional[int]:
    """Return the seq of the first block breaking the hash chain, or None."""
    prev = None
    for b in blocks:
        if prev is None:
            if b.seq == 0 and b.prev_hash != ZERO_HASH:
                return b.seq
        elif b.seq != prev.seq + 1 or b.prev_hash != prev.hash:
            return b.seq
        prev = b
    return None
