"""Seeded random scenarios for safety sweeps."""

from __future__ import annotations

import random

from .scenario import Scenario


def safety_scenario(seed: int, faults: bool = True) -> Scenario:
    """5-20 peers, 1-3 orderers; with ``faults`` adds delay, loss and crashes."""
    rng = random.Random(f"safety:{seed}")
    orgs = rng.randint(2, 5)
    ppo = rng.randint(max(1, -(-5 // orgs)), 20 // orgs)
    backend = rng.choice(["solo", "cluster", "cluster"])
    osns = 1 if backend == "solo" else rng.randint(2, 3)
    sc = {
        "seed": seed,
        "name": f"safety-{seed}",
        "topology": {"orgs": orgs, "peers_per_org": ppo, "endorsers_per_org": rng.randint(1, ppo),
                     "osns": osns, "backend": backend, "clients": rng.randint(1, 4)},
        "channel": {"batch_max_count": rng.choice([2, 5, 10, 50]),
                    "batch_max_bytes": rng.choice([8, 32, 256]) * 1024,
                    "batch_timeout": rng.choice([0.02, 0.05, 0.2])},
        "workload": {"mints": rng.randint(4, 12), "spends": rng.randint(8, 24), "threads": rng.randint(1, 3),
                     "double_spend": rng.choice([0.0, 0.2]),
                     "duplicate_broadcast": rng.choice([0.0, 0.1])},
        "faults": {},
        "max_time": 60.0,
        "drain": 3.0,
    }
    if faults:
        peers = Scenario.from_dict({"topology": sc["topology"]}).peer_ids()
        f = sc["faults"]
        f["latency"] = rng.choice([0.001, 0.005, 0.02])
        f["jitter"] = f["latency"] * rng.random()
        f["drop_rate"] = rng.choice([0.0, 0.01, 0.05])
        f["tamper_rate"] = rng.choice([0.0, 0.05])
        crashes = []
        if osns > 1 and rng.random() < 0.6:
            crashes.append({"node": f"osn{rng.randrange(osns)}", "at": rng.uniform(0.05, 0.5),
                            "restart": rng.choice([None, rng.uniform(0.6, 1.5)])})
        if rng.random() < 0.5:
            victim = rng.choice(peers[1:]) if len(peers) > 1 else peers[0]
            at = rng.uniform(0.05, 0.6)
            crashes.append({"node": victim, "at": at, "restart": at + rng.uniform(0.2, 1.0)})
        f["crashes"] = crashes
        if rng.random() < 0.3 and len(peers) > 2:
            cut = rng.sample(peers, rng.randint(1, len(peers) // 2))
            start = rng.uniform(0.05, 0.5)
            f["partitions"] = [{"members": cut, "start": start, "end": start + rng.uniform(0.2, 1.0)}]
    return Scenario.from_dict(sc)
