"""Scenario description: topology, channel, gossip, faults, workload, costs.

Scenarios are plain JSON; every section and field is optional and falls back
to the defaults below.  ``Scenario.from_dict`` rejects unknown keys so typos
fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


@dataclass
class Topology:
    orgs: int = 5
    peers_per_org: int = 1
    endorsers_per_org: int = 1  # the first k peers of each org endorse
    osns: int = 1
    backend: str = "solo"  # "solo" or "cluster"
    clients: int = 2
    client_orgs: Optional[int] = None  # clients spread over the first n orgs (default: all)


@dataclass
class ChannelSpec:
    channel_id: str = "ch1"
    batch_max_count: int = 100
    batch_max_bytes: int = 256 * 1024
    batch_timeout: float = 0.05


@dataclass
class GossipSpec:
    fanout: int = 7
    period: float = 0.1
    silence_window: float = 1.0
    alive_fanout: int = 3
    pull_fanout: int = 1
    push: bool = True
    pull: bool = True


@dataclass
class CrashEvent:
    node: str
    at: float
    restart: Optional[float] = None


@dataclass
class PartitionEvent:
    members: list[str]
    start: float
    end: float


@dataclass
class Faults:
    latency: float = 0.001
    jitter: float = 0.0005
    drop_rate: float = 0.0
    crashes: list[CrashEvent] = field(default_factory=list)
    partitions: list[PartitionEvent] = field(default_factory=list)
    tamper_rate: float = 0.0  # fraction of gossip pushes replaced by a corrupted copy

    @property
    def fault_free(self) -> bool:
        return not (self.drop_rate or self.crashes or self.partitions)


@dataclass
class Workload:
    kind: str = "fabcoin"  # "fabcoin" or "nondet"
    mints: int = 10
    spends: int = 20
    threads: int = 2  # outstanding transactions per client
    double_spend: float = 0.0  # probability a spend is issued twice, concurrently
    duplicate_broadcast: float = 0.0  # probability a tx is broadcast twice
    policy: Optional[str] = None  # endorsement policy text; default depends on kind
    force_submit: bool = False  # submit even when endorsements diverge
    amount: int = 100
    label: str = "USD"
    client_timeout: float = 1.0
    nondet_txs: int = 20  # invocations issued by the "nondet" workload


@dataclass
class CostModel:
    """Virtual processing costs in microseconds."""

    endorse: int = 400  # simulation + signing per proposal
    sig_verify: int = 180
    vscc_cores: int = 4
    vscc_fixed: int = 100
    rw_per_tx: int = 20
    rw_per_key: int = 5
    ledger_fixed: int = 2000  # block append + flush
    ledger_per_kb: int = 10
    broker: int = 500  # total-order log append to OSN visibility


SECTIONS = {
    "topology": Topology,
    "channel": ChannelSpec,
    "gossip": GossipSpec,
    "faults": Faults,
    "workload": Workload,
    "costs": CostModel,
}


@dataclass
class Scenario:
    seed: int = 1
    name: str = ""
    topology: Topology = field(default_factory=Topology)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    gossip: GossipSpec = field(default_factory=GossipSpec)
    faults: Faults = field(default_factory=Faults)
    workload: Workload = field(default_factory=Workload)
    costs: CostModel = field(default_factory=CostModel)
    max_time: float = 120.0  # virtual seconds before the run is cut off
    drain: float = 2.0  # quiet period after the workload to let stragglers settle
    observer: Optional[str] = None  # peer whose timestamps feed the metrics

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        t, w = self.topology, self.workload
        if t.orgs < 1 or t.peers_per_org < 1 or t.osns < 1 or t.clients < 1:
            raise ValueError("topology counts must be positive")
        if not 1 <= t.endorsers_per_org <= t.peers_per_org:
            raise ValueError("endorsers_per_org must be within 1..peers_per_org")
        if t.backend not in ("solo", "cluster"):
            raise ValueError(f"unknown backend {t.backend!r}")
        if t.backend == "solo" and t.osns != 1:
            raise ValueError("solo backend runs exactly one OSN")
        if w.kind not in ("fabcoin", "nondet"):
            raise ValueError(f"unknown workload kind {w.kind!r}")
        if w.threads < 1 or w.mints < 0 or w.spends < 0:
            raise ValueError("bad workload counts")
        if w.kind == "fabcoin" and w.spends and not w.mints:
            raise ValueError("spends need mints")
        if not 0 <= self.faults.drop_rate < 1:
            raise ValueError("drop_rate must be in [0, 1)")

    # -- naming -----------------------------------------------------------

    def org_ids(self) -> list[str]:
        return [f"Org{i + 1:02d}" for i in range(self.topology.orgs)]

    def peer_ids(self) -> list[str]:
        return [f"{o.lower()}.peer{j:02d}" for o in self.org_ids() for j in range(self.topology.peers_per_org)]

    def osn_ids(self) -> list[str]:
        return [f"osn{i}" for i in range(self.topology.osns)]

    def client_ids(self) -> list[str]:
        orgs = self.org_ids()[: self.topology.client_orgs or self.topology.orgs]
        return [f"{orgs[i % len(orgs)].lower()}.client{i:02d}" for i in range(self.topology.clients)]

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario keys: {sorted(extra)}")
        for name, typ in SECTIONS.items():
            if name in d:
                d[name] = _build(typ, d[name], name)
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "Scenario":
        """Copy with top-level fields or ``section__field`` entries replaced."""
        d = self.to_dict()
        for k, v in changes.items():
            if "__" in k:
                sec, f = k.split("__", 1)
                d[sec][f] = v
            else:
                d[k] = v
        return Scenario.from_dict(d)


def _build(typ, raw, where: str):
    if isinstance(raw, typ):
        return raw
    if not isinstance(raw, dict):
        raise ValueError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(typ)}
    extra = set(raw) - names
    if extra:
        raise ValueError(f"unknown keys in {where}: {sorted(extra)}")
    raw = dict(raw)
    if typ is Faults:
        raw["crashes"] = [c if isinstance(c, CrashEvent) else CrashEvent(**c) for c in raw.get("crashes", [])]
        raw["partitions"] = [p if isinstance(p, PartitionEvent) else PartitionEvent(**p)
                             for p in raw.get("partitions", [])]
    return typ(**raw)
