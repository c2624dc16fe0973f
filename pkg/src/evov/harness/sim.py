"""Discrete-event core: integer-microsecond clock, event queue, lossy transport."""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass
from typing import Any, Callable, Optional

US = 1_000_000  # microseconds per second


def us(seconds: float) -> int:
    return int(round(seconds * US))


class Simulator:
    """Single-threaded event loop over virtual time (microseconds)."""

    def __init__(self, seed: int):
        self.now = 0
        self.rng = random.Random(seed)
        self._queue: list = []
        self._seq = 0
        self.events_run = 0

    def at(self, t: int, fn: Callable[[], Any]) -> None:
        if t < self.now:
            t = self.now
        heapq.heappush(self._queue, (t, self._seq, fn))
        self._seq += 1

    def after(self, delay_us: int, fn: Callable[[], Any]) -> None:
        self.at(self.now + max(0, int(delay_us)), fn)

    def run(self, until: Optional[int] = None, stop: Optional[Callable[[], bool]] = None) -> None:
        q = self._queue
        while q:
            t = q[0][0]
            if until is not None and t > until:
                self.now = until
                return
            _, _, fn = heapq.heappop(q)
            self.now = t
            fn()
            self.events_run += 1
            if stop is not None and stop():
                return
        if until is not None:
            self.now = max(self.now, until)

    @property
    def pending(self) -> int:
        return len(self._queue)


@dataclass
class LinkModel:
    latency: float = 0.001  # seconds, one way
    jitter: float = 0.0005  # uniform +/- jitter
    drop_rate: float = 0.0


@dataclass
class Partition:
    members: frozenset
    start: int
    end: int


class Transport:
    """Message passing between named endpoints.

    Messages between live, connected endpoints arrive exactly once after the
    sampled latency.  A crashed or partitioned endpoint drops traffic, and
    ``drop_rate`` adds random loss on top.
    """

    def __init__(self, sim: Simulator, link: LinkModel, rng: random.Random):
        self.sim = sim
        self.link = link
        self.rng = rng
        self.handlers: dict[str, Callable[[str, Any], None]] = {}
        self.up: dict[str, bool] = {}
        self.epoch: dict[str, int] = {}
        self.partitions: list[Partition] = []
        self.lossless: set[str] = set()  # endpoints whose links never drop (the broker)
        self.sent = 0
        self.dropped = 0
        self.delivered = 0
        self._trace = hashlib.sha256()

    def register(self, name: str, handler: Callable[[str, Any], None]) -> None:
        self.handlers[name] = handler
        self.up[name] = True
        self.epoch.setdefault(name, 0)

    def crash(self, name: str) -> None:
        self.up[name] = False
        self.epoch[name] += 1

    def restart(self, name: str, handler: Callable[[str, Any], None]) -> None:
        self.handlers[name] = handler
        self.up[name] = True

    def connected(self, a: str, b: str) -> bool:
        now = self.sim.now
        for p in self.partitions:
            if p.start <= now < p.end and ((a in p.members) != (b in p.members)):
                return False
        return True

    def _latency(self) -> int:
        lk = self.link
        return max(1, us(lk.latency + self.rng.uniform(-lk.jitter, lk.jitter)))

    def send(self, src: str, dst: str, msg: Any) -> bool:
        self.sent += 1
        if not (self.up.get(src) and self.up.get(dst)) or not self.connected(src, dst):
            self.dropped += 1
            return False
        if self.link.drop_rate and src not in self.lossless and dst not in self.lossless \
                and self.rng.random() < self.link.drop_rate:
            self.dropped += 1
            return False
        epoch = self.epoch[dst]
        self.sim.after(self._latency(), lambda: self._deliver(src, dst, msg, epoch))
        return True

    def _deliver(self, src: str, dst: str, msg: Any, epoch: int) -> None:
        if not self.up.get(dst) or self.epoch[dst] != epoch or not self.connected(src, dst):
            self.dropped += 1
            return
        self.delivered += 1
        self._trace.update(f"{self.sim.now}|{src}|{dst}|{type(msg).__name__};".encode())
        self.handlers[dst](src, msg)

    @property
    def trace_digest(self) -> str:
        return self._trace.hexdigest()
