"""Command line: ``evov run | bench | verify | fabcoin``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__


def _cmd_run(args) -> int:
    from .harness import Scenario, run_scenario

    sc = Scenario.load(args.scenario)
    if args.seed is not None:
        sc = sc.replace(seed=args.seed)
    rep = run_scenario(sc)
    for c in rep.checks:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name:<20} {c.detail}")
    st = rep.stats
    print(f"blocks={st['blocks']} txs={st['txs_in_blocks']} valid={st['txs_valid']} "
          f"virtual_s={st['virtual_seconds']:.3f} digest={rep.digest()[:16]}")
    if args.out:
        rep.save(args.out)
        print(f"artifacts written to {args.out}")
    return 0 if rep.ok else 1


def _cmd_bench(args) -> int:
    from .harness.bench import Matrix, bench

    m = Matrix.load(args.matrix)
    if args.live:
        m.live = True
    try:
        res = bench(m, Path(args.out))
    except RuntimeError as e:
        print(f"bench aborted: {e}", file=sys.stderr)
        return 1
    print(f"{'block_kb':>8} {'conc':>6} {'tps':>9} {'avg_e2e_ms':>11}")
    for p in res.points:
        print(f"{p.block_kb:>8} {p.concurrency:>6} {p.tps:>9.1f} {p.stage('end_to_end').avg / 1000:>11.2f}")
    print((Path(args.out) / "summary.json").read_text())
    return 0


def _cmd_verify(args) -> int:
    from .harness.verify import verify_dir

    res = verify_dir(args.rundir)
    for name, h in res.heights.items():
        print(f"{name}: {h} blocks")
    for p in res.problems:
        print(f"FAIL {p}")
    print("OK" if res.ok else "CORRUPT")
    return 0 if res.ok else 1


def _cmd_fabcoin(args) -> int:
    from .harness.devnet import Devnet, DevnetError

    try:
        if args.fc == "init":
            d = Devnet.init(args.dir, seed=args.seed)
            print(f"devnet ready in {d.root} (height {d.ledger.height})")
            return 0
        d = Devnet(args.dir)
        if args.fc in ("mint", "spend"):
            r = d.mint(args.outputs) if args.fc == "mint" else d.spend(args.coin, args.to)
            print(f"tx {r.tx_id} in block {r.block}: {r.code}")
            for k in r.outputs:
                print(f"  coin {k}")
            return 0 if r.code == "VALID" else 1
        if args.fc == "balance":
            totals = d.balance(args.owner)
            if not totals:
                print("0")
            for label, amount in sorted(totals.items()):
                print(f"{amount} {label}")
            return 0
        if args.fc == "coins":
            owner = d.owner_key(args.owner) if args.owner else None
            names = {d.owner_key(n): n for n in d.wallet_keys}
            for k, c in sorted(d.coins(owner)):
                print(f"{k} {c.amount} {c.label} {names.get(c.owner, c.owner.hex())}")
            return 0
    except DevnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evov", description="Execute-order-validate blockchain simulator.")
    ap.add_argument("--version", action="version", version=f"evov {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run one scenario and check every safety property")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("--out", help="directory for report, metrics and peer block files")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("bench", help="block-size sweep with saturation search")
    p.add_argument("matrix", help="bench matrix JSON file")
    p.add_argument("--out", required=True, help="output directory for CSV files")
    p.add_argument("--live", action="store_true", help="wall clock over local sockets instead of virtual time")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("verify", help="re-verify persisted block files offline")
    p.add_argument("rundir", help="run directory (from `run --out`) or a devnet directory")
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("fabcoin", help="single-peer Fabcoin network kept in a directory")
    p.add_argument("--dir", default="fabnet", help="devnet directory (default: ./fabnet)")
    fc = p.add_subparsers(dest="fc", required=True)
    q = fc.add_parser("init", help="create the devnet")
    q.add_argument("--seed", type=int, default=0)
    q = fc.add_parser("mint", help="central-bank mint; OWNER is a wallet name (created on demand) or a hex key")
    q.add_argument("--outputs", nargs="+", required=True, metavar="AMOUNT:OWNER[:LABEL]")
    q = fc.add_parser("spend", help="spend live coins; change returns to the first input's owner")
    q.add_argument("--coin", nargs="+", required=True, metavar="COIN_KEY")
    q.add_argument("--to", nargs="+", required=True, metavar="AMOUNT:OWNER[:LABEL]")
    q = fc.add_parser("balance", help="sum of live coins of an owner, per label")
    q.add_argument("--owner", required=True)
    q = fc.add_parser("coins", help="list live coins")
    q.add_argument("--owner")
    p.set_defaults(fn=_cmd_fabcoin)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
