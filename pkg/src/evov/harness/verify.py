"""Offline re-verification of persisted peer ledgers.

Works from the block files alone: frames and checksums, decoding, the hash
chain, orderer signatures against the genesis configuration, and a fresh
re-validation that must reproduce every stored validity bitmask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..core import Block, EvovError, ZERO_HASH, decode_block, unpack_bitmask
from ..ledger import BLOCK_FILE, SAVEPOINT_FILE, Ledger, decode_savepoint, scan_frames
from ..validate import check_block_signature, validate_block
from .chain import context_from_genesis


@dataclass
class Problem:
    ledger: str
    block: Optional[int]
    tx: Optional[int]
    message: str

    def __str__(self) -> str:
        where = self.ledger
        if self.block is not None:
            where += f" block {self.block}"
        if self.tx is not None:
            where += f" tx {self.tx}"
        return f"{where}: {self.message}"


@dataclass
class VerifyResult:
    heights: dict[str, int] = field(default_factory=dict)
    problems: list[Problem] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems and bool(self.heights)


def ledger_dirs(root: Path) -> list[Path]:
    """Directories holding a block file: ``root`` itself or ``root/peers/*``."""
    root = Path(root)
    if (root / BLOCK_FILE).exists():
        return [root]
    peers = root / "peers"
    if not peers.is_dir():
        return []
    return sorted(d for d in peers.iterdir() if (d / BLOCK_FILE).exists())


def verify_blocks_file(data: bytes, name: str = "ledger") -> tuple[list[Block], list[Problem]]:
    """Check one block file; returns the blocks read before the first problem."""
    frames, end, problem = scan_frames(data)
    blocks, probs = _check_chain(name, frames)
    if problem is not None:
        probs.append(Problem(name, len(frames), None, f"{problem} frame at byte offset {end}"))
    return blocks, probs


def _check_chain(name: str, frames) -> tuple[list[Block], list[Problem]]:
    blocks: list[Block] = []
    if not frames:
        return blocks, [Problem(name, None, None, "empty block file")]
    try:
        genesis = decode_block(frames[0][1])
        ctx = context_from_genesis(genesis)
    except EvovError as e:
        return blocks, [Problem(name, 0, None, f"unreadable genesis: {e}")]
    if genesis.seq != 0 or genesis.prev_hash != ZERO_HASH:
        return blocks, [Problem(name, 0, None, "first block is not a genesis block")]

    replay = Ledger()
    prev: Optional[Block] = None
    for pos, (off, payload) in enumerate(frames):
        try:
            b = decode_block(payload)
        except EvovError as e:
            return blocks, [Problem(name, pos, None, f"undecodable block at offset {off}: {e}")]
        if b.seq != pos:
            return blocks, [Problem(name, pos, None, f"holds sequence number {b.seq}")]
        if prev is not None and b.prev_hash != prev.hash:
            return blocks, [Problem(name, pos, None, "previous-hash link broken")]
        if not check_block_signature(b, ctx.msp):
            return blocks, [Problem(name, pos, None, "orderer signature invalid")]
        if b.metadata is None:
            return blocks, [Problem(name, pos, None, "no validity bitmask stored")]
        try:
            stored = unpack_bitmask(b.metadata, len(b.txs))
        except EvovError as e:
            return blocks, [Problem(name, pos, None, str(e))]
        if pos == 0:
            replay.commit_block(b, stored)
        else:
            verdict = validate_block(b, ctx, replay)
            if verdict.bitmask != b.metadata:
                i = next((i for i, (x, y) in enumerate(zip(verdict.valid, stored)) if x != y), None)
                return blocks, [Problem(name, pos, i, "re-validation disagrees with the stored bitmask")]
            replay.commit_block(b, verdict.valid)
        blocks.append(b)
        prev = b
    return blocks, []


def verify_dir(root: Path | str) -> VerifyResult:
    res = VerifyResult()
    dirs = ledger_dirs(Path(root))
    if not dirs:
        res.problems.append(Problem(str(root), None, None, f"no {BLOCK_FILE} found"))
        return res
    chains: dict[str, list[Block]] = {}
    for d in dirs:
        name = d.name
        blocks, probs = verify_blocks_file((d / BLOCK_FILE).read_bytes(), name)
        res.problems += probs
        res.heights[name] = len(blocks)
        chains[name] = blocks
        sp = d / SAVEPOINT_FILE
        if not probs and sp.exists():
            try:
                saved = decode_savepoint(sp.read_bytes())
            except EvovError as e:
                res.problems.append(Problem(name, None, None, f"savepoint: {e}"))
                continue
            if saved != len(blocks) - 1:
                res.problems.append(Problem(name, saved, None, f"savepoint ahead of or behind the block file "
                                                               f"(height {len(blocks)})"))
    # peers must agree on block bodies and verdicts; signatures depend on the delivering orderer
    ref: dict[int, tuple[str, tuple]] = {}
    for name, blocks in chains.items():
        for b in blocks:
            first = ref.setdefault(b.seq, (name, (b.body, b.metadata)))
            if first[1] != (b.body, b.metadata):
                res.problems.append(Problem(name, b.seq, None, f"differs from {first[0]}"))
                break
    return res
