"""Per-transaction stage timings and their CSV / summary forms.

All times are integer microseconds of virtual time, so the stage identities
hold exactly rather than up to rounding.
"""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

STAGES = ("endorsement", "ordering", "vscc", "rw_check", "ledger", "validation", "end_to_end")
STAGE_LABELS = {
    "endorsement": "endorsement",
    "ordering": "ordering",
    "vscc": "VSCC val.",
    "rw_check": "R/W check",
    "ledger": "ledger",
    "validation": "validation (3+4+5)",
    "end_to_end": "end-to-end (1+2+6)",
}
TX_HEADER = ("seq", "tx_index", "tx_id", "client", "operation", "code",
             "endorsement_us", "ordering_us", "vscc_us", "rw_check_us", "ledger_us",
             "validation_us", "end_to_end_us")
SUMMARY_HEADER = ("stage", "count", "avg_ms", "stdev_ms", "p99_ms", "p999_ms")
MIN_PERCENTILE_RECORDS = 10_000


@dataclass
class TxRecord:
    tx_id: str
    client: str
    operation: str
    t_submit: int
    t_assembled: int
    seq: int = -1
    index: int = -1
    code: str = ""
    t_validation_start: int = 0
    vscc: int = 0
    rw_check: int = 0
    ledger: int = 0
    t_commit: int = 0

    @property
    def done(self) -> bool:
        return self.seq >= 0

    @property
    def endorsement(self) -> int:
        return self.t_assembled - self.t_submit

    @property
    def ordering(self) -> int:
        return self.t_validation_start - self.t_assembled

    @property
    def validation(self) -> int:
        return self.t_commit - self.t_validation_start

    @property
    def end_to_end(self) -> int:
        return self.t_commit - self.t_submit

    def identities_hold(self) -> bool:
        return (self.validation == self.vscc + self.rw_check + self.ledger
                and self.end_to_end == self.endorsement + self.ordering + self.validation)

    def row(self) -> tuple:
        return (self.seq, self.index, self.tx_id, self.client, self.operation, self.code,
                self.endorsement, self.ordering, self.vscc, self.rw_check, self.ledger,
                self.validation, self.end_to_end)


def write_tx_csv(records: Iterable[TxRecord], path: Optional[Path] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TX_HEADER)
    for r in sorted(records, key=lambda r: (r.seq, r.index)):
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_tx_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class StageSummary:
    stage: str
    count: int
    avg: float
    stdev: float
    p99: Optional[float] = None
    p999: Optional[float] = None


def summarize(values: list[int], stage: str, min_pct: int = MIN_PERCENTILE_RECORDS) -> StageSummary:
    """Average and standard deviation; tail percentiles only with enough samples."""
    n = len(values)
    if n == 0:
        return StageSummary(stage, 0, 0.0, 0.0)
    avg = statistics.fmean(values)
    sd = statistics.pstdev(values) if n > 1 else 0.0
    p99 = p999 = None
    if n >= min_pct:
        q = statistics.quantiles(values, n=1000, method="inclusive")
        p99, p999 = q[989], q[998]
    return StageSummary(stage, n, avg, sd, p99, p999)


def stage_table(records: Iterable[TxRecord], min_pct: int = MIN_PERCENTILE_RECORDS) -> list[StageSummary]:
    recs = [r for r in records if r.done]
    return [summarize([getattr(r, s) for r in recs], s, min_pct) for s in STAGES]


def write_stage_csv(table: list[StageSummary], path: Optional[Path] = None) -> str:
    def ms(v):
        return "" if v is None else f"{v / 1000:.3f}"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for s in table:
        w.writerow((STAGE_LABELS[s.stage], s.count, ms(s.avg), ms(s.stdev), ms(s.p99), ms(s.p999)))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
