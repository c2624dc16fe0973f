"""Per-peer ledger: append-only block store, versioned latest state, savepoint.

Block file layout is a sequence of frames ``[len u32][block bytes][crc32 u32]``.
The savepoint and the optional state checkpoint live in separate files that
are replaced atomically.  Indices are caches rebuilt from the block file.
"""

from __future__ import annotations

import bisect
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterator, Optional

from .core import (
    Block,
    DecodeError,
    EvovError,
    Reader,
    Transaction,
    TxType,
    Version,
    Writer,
    ZERO_HASH,
    decode_block,
    pack_bitmask,
    unpack_bitmask,
)

log = logging.getLogger(__name__)

BLOCK_FILE = "blocks.bin"
INDEX_FILE = "index.bin"
SAVEPOINT_FILE = "savepoint"
CHECKPOINT_FILE = "state.ckpt"

# Crash points inside commit_block, in execution order.
CRASH_POINTS = (
    "before_append",
    "torn_append",
    "after_append",
    "after_index",
    "after_state",
    "after_savepoint",
)


class OutOfOrder(EvovError):
    pass


class NotFound(EvovError):
    pass


class FatalCorruption(EvovError):
    pass


class SimulatedCrash(Exception):
    """Raised by fault injection to model a process crash inside commit."""


# ---------------------------------------------------------------------------
# storage backends


class MemoryStorage:
    """Byte files kept in memory; survives a simulated crash of its owner."""

    def __init__(self):
        self.files: dict[str, bytearray] = {}

    def read(self, name: str) -> bytes:
        return bytes(self.files.get(name, b""))

    def read_at(self, name: str, offset: int, n: int) -> bytes:
        return bytes(self.files[name][offset:offset + n])

    def exists(self, name: str) -> bool:
        return name in self.files

    def size(self, name: str) -> int:
        return len(self.files.get(name, b""))

    def append(self, name: str, data: bytes) -> None:
        self.files.setdefault(name, bytearray()).extend(data)

    def truncate(self, name: str, size: int) -> None:
        del self.files.setdefault(name, bytearray())[size:]

    def replace(self, name: str, data: bytes) -> None:
        self.files[name] = bytearray(data)

    def remove(self, name: str) -> None:
        self.files.pop(name, None)


class DiskStorage:
    def __init__(self, root: Path | str, fsync: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync

    def _p(self, name: str) -> Path:
        return self.root / name

    def read(self, name: str) -> bytes:
        p = self._p(name)
        return p.read_bytes() if p.exists() else b""

    def read_at(self, name: str, offset: int, n: int) -> bytes:
        with open(self._p(name), "rb") as f:
            f.seek(offset)
            return f.read(n)

    def exists(self, name: str) -> bool:
        return self._p(name).exists()

    def size(self, name: str) -> int:
        p = self._p(name)
        return p.stat().st_size if p.exists() else 0

    def append(self, name: str, data: bytes) -> None:
        with open(self._p(name), "ab") as f:
            f.write(data)
            f.flush()
            if self.fsync:
                os.fsync(f.fileno())

    def truncate(self, name: str, size: int) -> None:
        with open(self._p(name), "ab") as f:
            f.truncate(size)

    def replace(self, name: str, data: bytes) -> None:
        tmp = self._p(name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            if self.fsync:
                os.fsync(f.fileno())
        os.replace(tmp, self._p(name))

    def remove(self, name: str) -> None:
        self._p(name).unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# versioned state


class StateView:
    """Immutable read handle onto the latest state at one savepoint."""

    def __init__(self, data: dict[str, tuple[bytes, Version]], height: int):
        self._data = data
        self.height = height  # number of applied blocks

    def get(self, key: str) -> Optional[tuple[bytes, Version]]:
        return self._data.get(key)

    def version(self, key: str) -> Optional[Version]:
        ent = self._data.get(key)
        return ent[1] if ent else None

    @cached_property
    def _sorted_keys(self) -> list[str]:
        return sorted(self._data)

    def range(self, start: str, end: str) -> list[tuple[str, bytes, Version]]:
        keys = self._sorted_keys
        lo = bisect.bisect_left(keys, start)
        hi = bisect.bisect_left(keys, end)
        return [(k, *self._data[k]) for k in keys[lo:hi]]

    def items(self) -> Iterator[tuple[str, tuple[bytes, Version]]]:
        return iter(sorted(self._data.items()))

    def __len__(self):
        return len(self._data)

    def as_dict(self) -> dict[str, tuple[bytes, Version]]:
        return dict(self._data)

    def encoded(self) -> bytes:
        """Canonical bytes of the whole state, for byte-identity comparisons."""
        w = Writer().u32(len(self._data))
        for k, (v, ver) in sorted(self._data.items()):
            w.str_(k).bytes_(v).u64(ver.block_num).u64(ver.tx_num)
        return w.getvalue()


def apply_block_writes(data: dict, block: Block, valid: list[bool]) -> None:
    for i, (tx, ok) in enumerate(zip(block.txs, valid)):
        if not ok or tx.type != TxType.NORMAL:
            continue
        ver = Version(block.seq, i)
        for wr in tx.rwset.writes:
            if wr.value is None:
                data.pop(wr.key, None)
            else:
                data[wr.key] = (wr.value, ver)


# ---------------------------------------------------------------------------
# ledger


@dataclass(frozen=True)
class TxLocation:
    seq: int
    index: int


def _frame(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload + struct.pack(">I", zlib.crc32(payload))


def scan_frames(data: bytes) -> tuple[list[tuple[int, bytes]], int, Optional[str]]:
    """Parse block-file frames.

    Returns (frames as (offset, payload), end offset of the last good frame,
    problem) where problem is None, "torn" (incomplete trailing frame) or
    "corrupt" (a complete frame failing its checksum).
    """
    frames = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            return frames, pos, "torn"
        (ln,) = struct.unpack_from(">I", data, pos)
        end = pos + 4 + ln + 4
        if end > n:
            return frames, pos, "torn"
        payload = data[pos + 4:pos + 4 + ln]
        (crc,) = struct.unpack_from(">I", data, pos + 4 + ln)
        if zlib.crc32(payload) != crc:
            return frames, pos, "corrupt" if end < n else "torn"
        frames.append((pos, payload))
        pos = end
    return frames, pos, None


class Ledger:
    """Block store + versioned state of one peer on one channel."""

    def __init__(self, storage=None, checkpoint_every: int = 0):
        self.storage = storage if storage is not None else MemoryStorage()
        self.checkpoint_every = checkpoint_every
        self._data: dict[str, tuple[bytes, Version]] = {}
        self._view: Optional[StateView] = None
        self.savepoint = -1
        self.offsets: list[int] = []
        self.tx_index: dict[bytes, TxLocation] = {}
        self._blocks: dict[int, Block] = {}
        self._last_hash = ZERO_HASH
        self.crash_at: Optional[str] = None  # fault injection for the next commit
        self.commit_log: list[int] = []  # seqs in commit order (volatile)

    # -- reads --------------------------------------------------------------

    @property
    def height(self) -> int:
        return self.savepoint + 1

    @property
    def last_hash(self) -> bytes:
        return self._last_hash

    def get_latest(self, key: str) -> Optional[tuple[bytes, Version]]:
        return self._data.get(key)

    def snapshot(self) -> StateView:
        if self._view is None:
            self._view = StateView(self._data, self.height)
        return self._view

    def get_block(self, seq: int) -> Block:
        b = self._blocks.get(seq)
        if b is not None:
            return b
        if not 0 <= seq < len(self.offsets):
            raise NotFound(f"block {seq}")
        off = self.offsets[seq]
        (ln,) = struct.unpack(">I", self.storage.read_at(BLOCK_FILE, off, 4))
        b = decode_block(self.storage.read_at(BLOCK_FILE, off + 4, ln))
        self._blocks[seq] = b
        return b

    def blocks(self) -> Iterator[Block]:
        for s in range(len(self.offsets)):
            yield self.get_block(s)

    def get_tx(self, tx_id: bytes) -> tuple[Transaction, TxLocation, bool]:
        loc = self.tx_index.get(tx_id)
        if loc is None:
            raise NotFound(tx_id.hex())
        b = self.get_block(loc.seq)
        valid = unpack_bitmask(b.metadata, len(b.txs))[loc.index]
        return b.txs[loc.index], loc, valid

    def has_tx(self, tx_id: bytes) -> bool:
        return tx_id in self.tx_index

    # -- commit -------------------------------------------------------------

    def _maybe_crash(self, point: str) -> None:
        if self.crash_at == point:
            self.crash_at = None
            raise SimulatedCrash(point)

    def commit_block(self, block: Block, valid: list[bool]) -> None:
        if block.seq != self.height:
            raise OutOfOrder(f"expected block {self.height}, got {block.seq}")
        if len(valid) != len(block.txs):
            raise ValueError("bitmask length does not match block")
        stored = block.with_metadata(pack_bitmask(valid))
        frame = _frame(stored.encoded)

        # (1) append and flush block with its bitmask
        self._maybe_crash("before_append")
        if self.crash_at == "torn_append":
            self.crash_at = None
            self.storage.append(BLOCK_FILE, frame[: max(1, len(frame) // 2)])
            raise SimulatedCrash("torn_append")
        offset = self.storage.size(BLOCK_FILE)
        self.storage.append(BLOCK_FILE, frame)
        self._maybe_crash("after_append")

        # (2) indices
        self._index_block(stored, offset)
        self.storage.append(INDEX_FILE, struct.pack(">QQ", stored.seq, offset))
        self._maybe_crash("after_index")

        # (3) state
        new = dict(self._data)
        apply_block_writes(new, stored, valid)
        self._data = new
        self._view = None
        if self.checkpoint_every and (stored.seq + 1) % self.checkpoint_every == 0:
            self._write_checkpoint(stored.seq)
        self._maybe_crash("after_state")

        # (4) savepoint
        self.savepoint = stored.seq
        self.storage.replace(SAVEPOINT_FILE, _encode_u64_crc(stored.seq))
        self._view = None
        self.commit_log.append(stored.seq)
        self._maybe_crash("after_savepoint")

    def _index_block(self, block: Block, offset: int) -> None:
        assert block.seq == len(self.offsets)
        self.offsets.append(offset)
        self._blocks[block.seq] = block
        self._last_hash = block.hash
        for i, tx in enumerate(block.txs):
            if tx.type == TxType.NORMAL:
                self.tx_index.setdefault(tx.tx_id, TxLocation(block.seq, i))

    def _write_checkpoint(self, seq: int) -> None:
        w = Writer().u64(seq).u32(len(self._data))
        for k, (v, ver) in sorted(self._data.items()):
            w.str_(k).bytes_(v).u64(ver.block_num).u64(ver.tx_num)
        body = w.getvalue()
        self.storage.replace(CHECKPOINT_FILE, body + struct.pack(">I", zlib.crc32(body)))

    def _read_checkpoint(self) -> Optional[tuple[int, dict]]:
        raw = self.storage.read(CHECKPOINT_FILE)
        if len(raw) < 4:
            return None
        body, (crc,) = raw[:-4], struct.unpack(">I", raw[-4:])
        if zlib.crc32(body) != crc:
            log.warning("ignoring corrupt state checkpoint")
            return None
        r = Reader(body)
        seq = r.u64()
        data = {}
        for _ in range(r.u32()):
            k, v = r.str_(), r.bytes_()
            data[k] = (v, Version(r.u64(), r.u64()))
        return seq, data

    # -- recovery -----------------------------------------------------------

    def recover(self, revalidate: Optional[Callable[[Block, StateView], list[bool]]] = None) -> None:
        """Rebuild indices and latest state from the persisted files.

        ``revalidate``, when given, re-runs validation for blocks past the
        persisted savepoint and checks it against the stored bitmask.
        """
        old_sp = -1
        raw_sp = self.storage.read(SAVEPOINT_FILE)
        if raw_sp:
            old_sp = _decode_u64_crc(raw_sp)

        data = self.storage.read(BLOCK_FILE)
        frames, good_end, problem = scan_frames(data)
        if problem == "corrupt":
            raise FatalCorruption(f"block frame at offset {good_end} fails its checksum")
        if problem == "torn":
            log.info("truncating torn block write at offset %d", good_end)
            self.storage.truncate(BLOCK_FILE, good_end)

        self.offsets, self.tx_index, self._blocks = [], {}, {}
        self._last_hash = ZERO_HASH
        prev = None
        for off, payload in frames:
            try:
                b = decode_block(payload)
            except DecodeError as e:
                raise FatalCorruption(f"undecodable block at offset {off}: {e}") from None
            if b.seq != len(self.offsets):
                raise FatalCorruption(f"block at offset {off} has seq {b.seq}, expected {len(self.offsets)}")
            if prev is not None and b.prev_hash != prev.hash:
                raise FatalCorruption(f"hash chain broken at block {b.seq}")
            if b.metadata is None:
                raise FatalCorruption(f"block {b.seq} stored without bitmask")
            self._index_block(b, off)
            prev = b
        last = len(self.offsets) - 1
        if last < old_sp:
            raise FatalCorruption(f"savepoint {old_sp} beyond last stored block {last}")
        self.storage.replace(INDEX_FILE, b"".join(struct.pack(">QQ", i, o) for i, o in enumerate(self.offsets)))

        ck = self._read_checkpoint()
        if ck is not None and ck[0] <= last:
            start, state = ck[0] + 1, ck[1]
        else:
            start, state = 0, {}
        self._data = state
        self._view = None
        for seq in range(start, last + 1):
            b = self._blocks[seq]
            valid = unpack_bitmask(b.metadata, len(b.txs))
            if revalidate is not None and seq > old_sp:
                self.savepoint = seq - 1
                self._view = None
                again = revalidate(Block(b.seq, b.prev_hash, b.txs, None, b.orderer_id, b.orderer_sig), self.snapshot())
                if list(again) != valid:
                    raise FatalCorruption(f"re-validation of block {seq} disagrees with stored bitmask")
            new = dict(self._data)
            apply_block_writes(new, b, valid)
            self._data = new
        self.savepoint = last
        self._view = None
        if last >= 0:
            self.storage.replace(SAVEPOINT_FILE, _encode_u64_crc(last))


def _encode_u64_crc(v: int) -> bytes:
    body = struct.pack(">Q", v)
    return body + struct.pack(">I", zlib.crc32(body))


def decode_savepoint(raw: bytes) -> int:
    """Sequence number stored in a savepoint file."""
    return _decode_u64_crc(raw)


def _decode_u64_crc(raw: bytes) -> int:
    if len(raw) != 12 or zlib.crc32(raw[:8]) != struct.unpack(">I", raw[8:])[0]:
        raise FatalCorruption("savepoint file corrupt")
    return struct.unpack(">Q", raw[:8])[0]


def replay_state(blocks, upto: Optional[int] = None) -> dict[str, tuple[bytes, Version]]:
    """Historical state after block ``upto`` rebuilt from stored bitmasks."""
    data: dict = {}
    for b in blocks:
        if upto is not None and b.seq > upto:
            break
        apply_block_writes(data, b, unpack_bitmask(b.metadata, len(b.txs)))
    return data
