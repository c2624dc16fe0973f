"""Wall-clock mode: the same nodes driven by asyncio over local socket pairs.

Each endpoint owns a socket pair and a reader task; senders write pickled
frames into the endpoint's socket, so nodes only interact by message.  Time
is real (microseconds since start) and nothing here is deterministic, which
is why only the bench command offers it.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import pickle
import random
import socket
import struct
import time
from typing import Any, Callable, Optional

from .sim import LinkModel, Partition

_LEN = struct.Struct(">I")
log = logging.getLogger(__name__)


class LiveClock:
    """Simulator-compatible scheduler backed by an asyncio event loop."""

    def __init__(self, seed: int):
        self.rng = random.Random(seed)
        self.loop = asyncio.new_event_loop()
        self._t0 = time.monotonic()
        self.events_run = 0
        self.on_start: list[Callable[[], Any]] = []  # coroutine factories run before the first event
        self.on_stop: list[Callable[[], Any]] = []
        self._deferred: Optional[list] = []  # events scheduled before run(), relative to start

    @property
    def now(self) -> int:
        return int((time.monotonic() - self._t0) * 1_000_000)

    def _run(self, fn):
        self.events_run += 1
        fn()

    def at(self, t: int, fn: Callable[[], Any]) -> None:
        self.after(t - self.now, fn)

    def after(self, delay_us: int, fn: Callable[[], Any]) -> None:
        if self._deferred is not None:
            self._deferred.append((delay_us, fn))
            return
        self.loop.call_later(max(0, delay_us) / 1_000_000, self._run, fn)

    def run(self, until: Optional[int] = None, stop: Optional[Callable[[], bool]] = None) -> None:
        async def main():
            for start in self.on_start:
                await start()
            self._t0 = time.monotonic()
            pending, self._deferred = self._deferred, None
            for delay, fn in pending:
                self.after(delay, fn)
            while not (stop and stop()):
                if until is not None and self.now >= until:
                    break
                await asyncio.sleep(0.002)

        try:
            self.loop.run_until_complete(main())
        finally:
            for fn in self.on_stop:
                fn()
            tasks = asyncio.all_tasks(self.loop)
            for task in tasks:
                task.cancel()
            self.loop.run_until_complete(asyncio.gather(*tasks, return_exceptions=True))
            self.loop.close()

    @property
    def pending(self) -> int:
        return 0


class SocketTransport:
    """Transport with the simulator's interface, carrying frames over socket pairs."""

    def __init__(self, clock: LiveClock, link: LinkModel, rng: random.Random):
        self.sim = clock
        self.link = link
        self.rng = rng
        self.handlers: dict[str, Callable[[str, Any], None]] = {}
        self.up: dict[str, bool] = {}
        self.epoch: dict[str, int] = {}
        self.partitions: list[Partition] = []
        self.lossless: set[str] = set()
        self.sent = self.dropped = self.delivered = 0
        self._trace = hashlib.sha256()
        self._writers: dict[str, asyncio.StreamWriter] = {}
        self._socks: dict[str, tuple[socket.socket, socket.socket]] = {}
        self._tasks: list[asyncio.Task] = []  # the loop only holds weak references
        self._streams: list[asyncio.StreamWriter] = []
        clock.on_start.append(self._start)
        clock.on_stop.append(self.close)

    def register(self, name: str, handler: Callable[[str, Any], None]) -> None:
        self.handlers[name] = handler
        self.up[name] = True
        self.epoch.setdefault(name, 0)
        if name not in self._socks:
            self._socks[name] = socket.socketpair()

    async def _start(self) -> None:
        for name, (rs, ws) in self._socks.items():
            reader, rw = await asyncio.open_connection(sock=rs)
            _, writer = await asyncio.open_connection(sock=ws)
            self._writers[name] = writer
            self._streams += [rw, writer]
            self._tasks.append(asyncio.get_running_loop().create_task(self._read(name, reader)))

    async def _read(self, dst: str, reader: asyncio.StreamReader) -> None:
        while True:
            (n,) = _LEN.unpack(await reader.readexactly(_LEN.size))
            src, epoch, msg = pickle.loads(await reader.readexactly(n))
            self.sim.events_run += 1
            try:
                self._deliver(src, dst, msg, epoch)
            except Exception:
                log.exception("handler of %s failed on %s from %s", dst, type(msg).__name__, src)

    def close(self) -> None:
        for w in self._streams:
            w.close()
        self._streams = []

    def crash(self, name: str) -> None:
        self.up[name] = False
        self.epoch[name] += 1

    def restart(self, name: str, handler: Callable[[str, Any], None]) -> None:
        self.handlers[name] = handler
        self.up[name] = True

    def connected(self, a: str, b: str) -> bool:
        now = self.sim.now
        return not any(p.start <= now < p.end and ((a in p.members) != (b in p.members))
                       for p in self.partitions)

    def send(self, src: str, dst: str, msg: Any) -> bool:
        self.sent += 1
        if not (self.up.get(src) and self.up.get(dst)) or not self.connected(src, dst):
            self.dropped += 1
            return False
        if self.link.drop_rate and src not in self.lossless and dst not in self.lossless \
                and self.rng.random() < self.link.drop_rate:
            self.dropped += 1
            return False
        data = pickle.dumps((src, self.epoch[dst], msg), protocol=pickle.HIGHEST_PROTOCOL)
        self._writers[dst].write(_LEN.pack(len(data)) + data)
        return True

    def _deliver(self, src: str, dst: str, msg: Any, epoch: int) -> None:
        if not self.up.get(dst) or self.epoch[dst] != epoch or not self.connected(src, dst):
            self.dropped += 1
            return
        self.delivered += 1
        self._trace.update(f"{src}|{dst}|{type(msg).__name__};".encode())
        self.handlers[dst](src, msg)

    @property
    def trace_digest(self) -> str:
        return self._trace.hexdigest()
