"""Block-size sweep with client saturation search and per-stage latency tables.

For each block size the client count doubles until throughput gains less
than ``stop_gain`` over the previous step; the step before that knee is the
configuration reported ("just below saturation").  Throughput is measured
over the 10%-90% window of commit times of the spend phase.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .metrics import MIN_PERCENTILE_RECORDS, StageSummary, TxRecord, stage_table, write_stage_csv, write_tx_csv
from .runner import RunReport, run_scenario
from .scenario import Scenario

log = logging.getLogger(__name__)

SWEEP_HEADER = ("block_kb", "batch_max_bytes", "clients", "concurrency", "tps", "avg_e2e_ms", "stdev_e2e_ms",
                "p99_e2e_ms", "p999_e2e_ms", "avg_block_txs", "records")


@dataclass
class Matrix:
    base: dict = field(default_factory=dict)
    block_sizes_kb: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128])
    concurrency_start: int = 8
    concurrency_max: int = 512
    stop_gain: float = 0.02
    threads_per_client: int = 4
    search_spends: int = 800
    measure_spends: int = 4000
    min_rounds: int = 12  # spends per concurrent job, so the window is not all ramp-up
    min_percentile_records: int = MIN_PERCENTILE_RECORDS
    live: bool = False  # wall clock over local sockets instead of virtual time

    @classmethod
    def from_dict(cls, d: dict) -> "Matrix":
        names = {f for f in cls.__dataclass_fields__}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown matrix keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Matrix":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Point:
    block_kb: int
    concurrency: int
    tps: float
    records: list[TxRecord]
    blocks: int
    report: Optional[RunReport] = None

    @property
    def stages(self) -> list[StageSummary]:
        return stage_table(self.records)

    def stage(self, name: str) -> StageSummary:
        return next(s for s in self.stages if s.stage == name)


@dataclass
class BenchResult:
    points: list[Point]  # one per block size, at the chosen concurrency
    search: list[tuple[int, int, float]]  # (block_kb, concurrency, tps) for every search step
    wall_seconds: float

    def latency_non_decreasing(self) -> bool:
        lat = [p.stage("end_to_end").avg for p in self.points]
        return all(b >= a for a, b in zip(lat, lat[1:]))

    def plateau_gain(self) -> float:
        a, b = self.points[-2].tps, self.points[-1].tps
        return (b - a) / a

    def ordering_dominates(self) -> bool:
        for p in self.points:
            avg = {s.stage: s.avg for s in p.stages}
            others = [avg[k] for k in ("endorsement", "vscc", "rw_check", "ledger", "validation")]
            if avg["ordering"] <= max(others):
                return False
        return True

    def identities_hold(self) -> bool:
        return all(r.identities_hold() for p in self.points for r in p.records)


def steady_tps(records: list[TxRecord]) -> float:
    """Commits per second between the 10th and 90th percentile commit times."""
    ts = sorted(r.t_commit for r in records if r.done)
    n = len(ts)
    if n < 10:
        return 0.0
    lo, hi = n // 10, (9 * n) // 10
    span = ts[hi] - ts[lo]
    return (hi - lo) / (span / 1e6) if span > 0 else 0.0


def _scenario(m: Matrix, kb: int, conc: int, spends: int) -> Scenario:
    spends = max(spends, m.min_rounds * conc)
    clients = max(1, conc // m.threads_per_client)
    threads = max(1, conc // clients)
    base = json.loads(json.dumps(m.base))
    base.setdefault("channel", {})
    base["channel"].update({"batch_max_bytes": kb * 1024, "batch_max_count": max(10_000, base["channel"].get("batch_max_count", 0))})
    base.setdefault("topology", {})["clients"] = clients
    wl = base.setdefault("workload", {})
    wl.update({"threads": threads, "mints": clients * threads, "spends": spends})
    base.setdefault("max_time", 600.0)
    base["name"] = f"bench-{kb}kb-c{clients * threads}"
    return Scenario.from_dict(base)


def measure(m: Matrix, kb: int, conc: int, spends: int, keep: bool = False) -> Point:
    sc = _scenario(m, kb, conc, spends)
    rep = run_scenario(sc, keep_network=False, live=m.live)
    if not rep.ok:
        raise RuntimeError(f"bench run {sc.name} failed checks: {[c.name for c in rep.failures]}")
    recs = [r for r in rep.records if r.operation == "spend" and r.done and r.code == "VALID"]
    return Point(kb, sc.topology.clients * sc.workload.threads, steady_tps(recs), recs,
                 rep.stats["blocks"], rep if keep else None)


def saturate(m: Matrix, kb: int, search: list) -> int:
    """Double concurrency until the tps gain drops below ``stop_gain``."""
    conc = m.concurrency_start
    prev = measure(m, kb, conc, m.search_spends)
    search.append((kb, prev.concurrency, prev.tps))
    while conc * 2 <= m.concurrency_max:
        nxt = measure(m, kb, conc * 2, m.search_spends)
        search.append((kb, nxt.concurrency, nxt.tps))
        if prev.tps <= 0 or (nxt.tps - prev.tps) / prev.tps < m.stop_gain:
            break
        conc, prev = conc * 2, nxt
    return conc


def bench(m: Matrix, out: Optional[Path] = None) -> BenchResult:
    t0 = time.monotonic()
    search: list = []
    points = []
    for kb in m.block_sizes_kb:
        conc = saturate(m, kb, search)
        p = measure(m, kb, conc, m.measure_spends)
        log.info("block %d KB: concurrency %d, %.0f tps", kb, p.concurrency, p.tps)
        points.append(p)
    res = BenchResult(points, search, time.monotonic() - t0)
    if out is not None:
        write_outputs(res, m, Path(out))
    return res


def write_outputs(res: BenchResult, m: Matrix, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for p in res.points:
            e2e = [s for s in stage_table(p.records, m.min_percentile_records) if s.stage == "end_to_end"][0]
            fmt = lambda v: "" if v is None else f"{v / 1000:.3f}"
            n_txs = len(p.records)
            w.writerow((p.block_kb, p.block_kb * 1024, max(1, p.concurrency // m.threads_per_client),
                        p.concurrency, f"{p.tps:.1f}", fmt(e2e.avg), fmt(e2e.stdev), fmt(e2e.p99),
                        fmt(e2e.p999), f"{n_txs / max(1, p.blocks):.1f}", n_txs))
    with open(out / "search.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("block_kb", "concurrency", "tps"))
        for kb, c, tps in res.search:
            w.writerow((kb, c, f"{tps:.1f}"))
    for p in res.points:
        write_stage_csv(stage_table(p.records, m.min_percentile_records), out / f"stages_{p.block_kb}kb.csv")
        write_tx_csv(p.records, out / f"txs_{p.block_kb}kb.csv")
    summary = {
        "wall_seconds": round(res.wall_seconds, 1),
        "latency_non_decreasing": res.latency_non_decreasing(),
        "plateau_gain": round(res.plateau_gain(), 4),
        "ordering_dominates": res.ordering_dominates(),
        "stage_identities_hold": res.identities_hold(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
