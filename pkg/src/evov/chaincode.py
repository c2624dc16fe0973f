"""Chaincode runtime: installation, simulation contexts and the shim calls.

Chaincode runs in-process.  Each invocation gets a fresh ``SimContext`` bound
to an immutable state snapshot; everything the handler reads or writes is
captured into a read-write set and nothing touches committed state.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import (
    EvovError,
    KVRead,
    KVWrite,
    Proposal,
    RangeRead,
    ReadWriteSet,
    Version,
    range_result_hash,
)
from .ledger import StateView
from .policy import Policy

NS_SEP = ":"


class ChaincodeError(EvovError):
    """Raised by handlers to reject a proposal."""


class SimulationFailed(EvovError):
    pass


class SimulationAborted(SimulationFailed):
    pass


class UnknownChaincode(EvovError):
    pass


class AlreadyInstalled(EvovError):
    pass


class InvalidRange(EvovError):
    pass


Handler = Callable[["SimContext", str, tuple], bytes]


@dataclass
class ChaincodeDefinition:
    chaincode_id: str
    handler: Optional[Handler]  # None on nodes that only validate
    policy: Policy
    vscc_id: str = "default"

    def __post_init__(self):
        if NS_SEP in self.chaincode_id or not self.chaincode_id:
            raise ValueError(f"invalid chaincode id {self.chaincode_id!r}")


class ChaincodeRegistry:
    """Chaincode installed on one peer, per channel."""

    def __init__(self):
        self._by_channel: dict[str, dict[str, ChaincodeDefinition]] = {}

    def install(self, defn: ChaincodeDefinition, channel: str) -> None:
        cc = self._by_channel.setdefault(channel, {})
        if defn.chaincode_id in cc:
            raise AlreadyInstalled(f"{defn.chaincode_id} on {channel}")
        cc[defn.chaincode_id] = defn

    def get(self, channel: str, chaincode_id: str) -> ChaincodeDefinition:
        try:
            return self._by_channel[channel][chaincode_id]
        except KeyError:
            raise UnknownChaincode(f"{chaincode_id} on {channel}") from None

    def installed(self, channel: str) -> list[str]:
        return sorted(self._by_channel.get(channel, {}))


def ns_key(ns: str, key: str) -> str:
    return f"{ns}{NS_SEP}{key}"


def split_key(full: str) -> tuple[str, str]:
    ns, _, key = full.partition(NS_SEP)
    return ns, key


def range_query_string(ns: str, start: str, end: str) -> str:
    return json.dumps([ns_key(ns, start), ns_key(ns, end)])


def parse_range_query(query: str) -> tuple[str, str]:
    start, end = json.loads(query)
    return start, end


def range_query_hash(view, start_full: str, end_full: str) -> bytes:
    """Hash of (key, version) pairs a range query returns against ``view``."""
    return range_result_hash((k, ver) for k, _, ver in view.range(start_full, end_full))


@dataclass
class _Accumulator:
    reads: dict[str, Optional[Version]] = field(default_factory=dict)
    range_reads: list[RangeRead] = field(default_factory=list)
    writes: dict[str, Optional[bytes]] = field(default_factory=dict)

    def rwset(self) -> ReadWriteSet:
        return ReadWriteSet(
            tuple(KVRead(k, v) for k, v in self.reads.items()),
            tuple(self.range_reads),
            tuple(KVWrite(k, v) for k, v in self.writes.items()),
        )


class SimContext:
    """Shim handed to a chaincode handler for one simulation."""

    def __init__(self, snapshot: StateView, chaincode_id: str, proposal: Optional[Proposal] = None,
                 registry: Optional[ChaincodeRegistry] = None, channel: str = "",
                 read_only: bool = False, _acc: Optional[_Accumulator] = None):
        self.snapshot = snapshot
        self.chaincode_id = chaincode_id
        self.proposal = proposal
        self.registry = registry
        self.channel = channel
        self.read_only = read_only
        self._acc = _acc if _acc is not None else _Accumulator()

    @property
    def tx_id(self) -> bytes:
        return self.proposal.tx_id if self.proposal else b""

    @property
    def rwset(self) -> ReadWriteSet:
        return self._acc.rwset()

    def get_state(self, key: str) -> Optional[bytes]:
        full = ns_key(self.chaincode_id, key)
        acc = self._acc
        if full in acc.writes:
            return acc.writes[full]  # read-your-writes; no dependency recorded
        ent = self.snapshot.get(full)
        if full not in acc.reads:
            acc.reads[full] = ent[1] if ent else None
        return ent[0] if ent else None

    def put_state(self, key: str, value: bytes) -> None:
        if self.read_only:
            raise ChaincodeError("write from a read-only chaincode call")
        if not isinstance(value, (bytes, bytearray)):
            raise ChaincodeError("state values must be bytes")
        self._acc.writes[ns_key(self.chaincode_id, key)] = bytes(value)

    def del_state(self, key: str) -> None:
        if self.read_only:
            raise ChaincodeError("delete from a read-only chaincode call")
        self._acc.writes[ns_key(self.chaincode_id, key)] = None

    def range_query(self, start: str, end: str) -> list[tuple[str, bytes]]:
        if start > end:
            raise InvalidRange(f"{start!r} > {end!r}")
        s_full, e_full = ns_key(self.chaincode_id, start), ns_key(self.chaincode_id, end)
        rows = self.snapshot.range(s_full, e_full)
        self._acc.range_reads.append(
            RangeRead(range_query_string(self.chaincode_id, start, end),
                      range_result_hash((k, ver) for k, _, ver in rows)))
        # pending writes of this simulation are visible to the handler, but
        # only committed rows feed the recorded hash
        merged = {k: v for k, v, _ in rows}
        for k, v in self._acc.writes.items():
            if s_full <= k < e_full:
                if v is None:
                    merged.pop(k, None)
                else:
                    merged[k] = v
        n = len(self.chaincode_id) + 1
        return [(k[n:], merged[k]) for k in sorted(merged)]

    def invoke_chaincode(self, chaincode_id: str, operation: str, args=()) -> bytes:
        """Read-only call into another chaincode on the same channel snapshot."""
        if self.registry is None:
            raise UnknownChaincode(chaincode_id)
        defn = self.registry.get(self.channel, chaincode_id)
        sub = SimContext(self.snapshot, chaincode_id, self.proposal, self.registry,
                         self.channel, read_only=True, _acc=self._acc)
        return defn.handler(sub, operation, tuple(args))


class _Abort(BaseException):
    pass


def _run_bounded(fn, max_steps: Optional[int], deadline: Optional[float]):
    if not max_steps and not deadline:
        return fn()
    steps = 0
    t_end = time.monotonic() + deadline if deadline else None

    def local(frame, event, arg):
        nonlocal steps
        if event == "line":
            steps += 1
            if max_steps and steps > max_steps:
                raise _Abort("step budget exhausted")
            if t_end is not None and steps & 1023 == 0 and time.monotonic() > t_end:
                raise _Abort("deadline passed")
        return local

    def glob(frame, event, arg):
        return local

    old = sys.gettrace()
    sys.settrace(glob)
    try:
        return fn()
    finally:
        sys.settrace(old)


def invoke_simulation(defn: ChaincodeDefinition, operation: str, args, snapshot: StateView, *,
                      proposal: Optional[Proposal] = None, registry: Optional[ChaincodeRegistry] = None,
                      channel: str = "", max_steps: Optional[int] = 1_000_000,
                      deadline: Optional[float] = 5.0) -> tuple[bytes, ReadWriteSet]:
    """Run a handler against ``snapshot`` and return (response, rwset).

    The step budget counts executed source lines; exceeding it or the wall
    deadline aborts the simulation.
    """
    ctx = SimContext(snapshot, defn.chaincode_id, proposal, registry, channel)
    try:
        resp = _run_bounded(lambda: defn.handler(ctx, operation, tuple(args)), max_steps, deadline)
    except _Abort as e:
        raise SimulationAborted(str(e)) from None
    except Exception as e:
        raise SimulationFailed(f"{type(e).__name__}: {e}") from e
    if resp is None:
        resp = b""
    if not isinstance(resp, (bytes, bytearray)):
        raise SimulationFailed("handler response must be bytes")
    return bytes(resp), ctx.rwset
