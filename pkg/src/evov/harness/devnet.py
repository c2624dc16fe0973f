"""Single-peer Fabcoin network persisted in a directory, driven one command at a time.

Layout::

    devnet.json          seed and channel name; every key is derived from the seed
    orderer/log.bin      the solo orderer's total-order log (checksummed frames)
    peers/<peer>/        the peer's block store, index and savepoint
    wallet.json          named owner keys

Each command rebuilds the orderer from its log (blocks come out byte-identical
because signatures are deterministic), lets the peer catch up, then submits
at most one transaction and forces the block closed with a time-to-cut entry.
"""

from __future__ import annotations

import json
import random
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..chaincode import ChaincodeRegistry, split_key
from ..core import decode_tx, time_to_cut
from ..endorse import Endorser, collect_and_assemble
from ..fabcoin import CHAINCODE_ID as FABCOIN, VSCC_ID as FABCOIN_VSCC, CoinState, Wallet, new_keypair
from ..ledger import DiskStorage, Ledger, scan_frames
from ..msp import MspDirectory, Role
from ..order import ChannelConfig, OrderingNode, TotalOrderLog, bootstrap_channel
from ..validate import revalidator, validate_block
from . import chain

CONFIG = "devnet.json"
LOG = "orderer/log.bin"
WALLET = "wallet.json"
PEER = "org01.peer00"
CLIENT = "org01.client00"
OSN = "osn0"


class DevnetError(Exception):
    pass


@dataclass
class Submitted:
    tx_id: str
    block: int
    code: str
    outputs: list[str]  # coin keys created when valid


def parse_output(text: str) -> tuple[int, str, str]:
    """``AMOUNT:OWNER[:LABEL]`` -> (amount, owner, label)."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise DevnetError(f"output {text!r} is not AMOUNT:OWNER[:LABEL]")
    try:
        amount = int(parts[0])
    except ValueError:
        raise DevnetError(f"bad amount in {text!r}") from None
    return amount, parts[1], parts[2] if len(parts) == 3 else "USD"


class Devnet:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        conf = self.root / CONFIG
        if not conf.exists():
            raise DevnetError(f"{self.root} is not a devnet (run `evov fabcoin init` first)")
        meta = json.loads(conf.read_text())
        self.seed = meta["seed"]
        self.channel = meta["channel"]
        self._build()
        self.wallet_keys: dict[str, str] = json.loads((self.root / WALLET).read_text())["keys"]
        self._sync()

    @classmethod
    def init(cls, root: Path | str, seed: int = 0, channel: str = "ch1") -> "Devnet":
        root = Path(root)
        if (root / CONFIG).exists():
            raise DevnetError(f"{root} already holds a devnet")
        (root / "orderer").mkdir(parents=True, exist_ok=True)
        (root / CONFIG).write_text(json.dumps({"seed": seed, "channel": channel}, indent=2))
        (root / LOG).write_bytes(b"")
        (root / WALLET).write_text(json.dumps({"keys": {}}, indent=2))
        return cls(root)

    # -- wiring ---------------------------------------------------------------

    def _build(self) -> None:
        keys = random.Random(f"{self.seed}:devnet-keys")
        msp = MspDirectory()
        self.peer_signer = msp.generate_identity(PEER, "Org01", Role.PEER, keys)
        self.osn_signer = msp.generate_identity(OSN, "OrdererOrg", Role.ORDERER, keys)
        self.client_signer = msp.generate_identity(CLIENT, "Org01", Role.CLIENT, keys)
        self.msp = msp.freeze()
        cb_secret, cb_public = new_keypair(keys.randbytes(32))
        self.cb_keys = {"cb1": cb_secret}
        self.cfg = ChannelConfig(
            self.channel, batch_max_count=500, batch_max_bytes=1 << 20, batch_timeout=1.0,
            osn_addresses=[OSN], roster=self.msp.to_config(),
            chaincodes=[{"id": FABCOIN, "policy": "org:Org01", "vscc": FABCOIN_VSCC}],
            params={"fabcoin": {"central_banks": {"cb1": cb_public.hex()}, "threshold": 1}})
        self.osn = OrderingNode(self.osn_signer)
        self.genesis = self.osn.sign_block(bootstrap_channel(self.cfg))
        self.ctx = chain.context_from_genesis(self.genesis)
        self.log = TotalOrderLog()
        self.osn.bootstrap_channel(self.cfg, self.log, self.genesis)
        frames, _, problem = scan_frames((self.root / LOG).read_bytes())
        if problem == "corrupt":
            raise DevnetError("orderer log is corrupt")
        for _, payload in frames:
            self.log.append(decode_tx(payload))
        if problem == "torn":  # interrupted append: drop the partial frame
            data = b"".join(_frame(p) for _, p in frames)
            (self.root / LOG).write_bytes(data)
        self.log.listeners.append(self._persist)

        self.ledger = Ledger(DiskStorage(self.root / "peers" / PEER))
        if self.ledger.storage.exists("blocks.bin"):
            self.ledger.recover(revalidator(self.ctx, self.ledger))
        if self.ledger.height == 0:
            self.ledger.commit_block(self.genesis, [True])
        elif self.ledger.get_block(0).hash != self.genesis.hash:
            raise DevnetError("peer ledger belongs to another network")
        registry = ChaincodeRegistry()
        for defn in chain.definitions(self.cfg, with_handlers=True).values():
            registry.install(defn, self.channel)
        self.endorser = Endorser(self.peer_signer, self.msp, registry, lambda _ch: self.ledger.snapshot(),
                                 deadline=None)

    def _sync(self) -> None:
        self.osn.catch_up(self.channel)
        while self.ledger.height < self.osn.height(self.channel):
            b = self.osn.deliver(self.channel, self.ledger.height)
            verdict = validate_block(b, self.ctx, self.ledger)
            self.ledger.commit_block(b, verdict.valid)

    def _persist(self, index: int) -> None:
        with open(self.root / LOG, "ab") as f:
            f.write(_frame(self.log.read(index).encoded))

    # -- wallet -----------------------------------------------------------------

    def _save_wallet(self) -> None:
        (self.root / WALLET).write_text(json.dumps({"keys": self.wallet_keys}, indent=2, sort_keys=True))

    def owner_key(self, owner: str, create: bool = False) -> bytes:
        """Public key for a wallet name or a hex public key."""
        if owner in self.wallet_keys:
            return new_keypair(bytes.fromhex(self.wallet_keys[owner]))[1]
        try:
            raw = bytes.fromhex(owner)
            if len(raw) == 32:
                return raw
        except ValueError:
            pass
        if not create:
            raise DevnetError(f"unknown owner {owner!r}")
        secret, public = new_keypair()
        self.wallet_keys[owner] = secret.hex()
        self._save_wallet()
        return public

    def wallet(self) -> Wallet:
        w = Wallet(self.client_signer, self.channel, cb_keys=dict(self.cb_keys))
        for secret_hex in self.wallet_keys.values():
            secret, public = new_keypair(bytes.fromhex(secret_hex))
            w.keys[public] = secret
        for key, coin in self.coins():
            if coin.owner in w.keys:
                w.coins[key] = coin
        return w

    def coins(self, owner: Optional[bytes] = None) -> list[tuple[str, CoinState]]:
        out = []
        for k, (v, _ver) in self.ledger.snapshot().items():
            cc, key = split_key(k)
            if cc != FABCOIN:
                continue
            coin = CoinState.decode(v)
            if owner is None or coin.owner == owner:
                out.append((key, coin))
        return out

    def balance(self, owner: str) -> dict[str, int]:
        totals: dict[str, int] = {}
        for _, c in self.coins(self.owner_key(owner)):
            totals[c.label] = totals.get(c.label, 0) + c.amount
        return totals

    # -- transactions -----------------------------------------------------------

    def _outputs(self, specs: list[str]) -> list[CoinState]:
        outs = []
        for s in specs:
            amount, owner, label = parse_output(s)
            outs.append(CoinState(amount, self.owner_key(owner, create=True), label))
        return outs

    def mint(self, outputs: list[str]) -> Submitted:
        w = self.wallet()
        return self._submit(w.mint(self._outputs(outputs)))

    def spend(self, coins: list[str], outputs: list[str]) -> Submitted:
        w = self.wallet()
        missing = [c for c in coins if c not in w.coins]
        if missing:
            raise DevnetError(f"coin(s) not live or not owned by this wallet: {missing}")
        return self._submit(w.spend(coins, self._outputs(outputs)))

    def _submit(self, proposal) -> Submitted:
        try:
            resp = self.endorser.endorse(proposal)
        except Exception as e:
            raise DevnetError(f"endorsement refused: {e}") from None
        tx = collect_and_assemble(proposal, [resp], self.ctx.chaincodes[FABCOIN].policy, self.msp)
        self.osn.broadcast(self.channel, tx, CLIENT)
        self.log.append(time_to_cut(self.osn.height(self.channel), OSN))
        self._sync()
        _, loc, valid = self.ledger.get_tx(tx.tx_id)
        outs = [split_key(w.key)[1] for w in tx.rwset.writes if w.value is not None] if valid else []
        return Submitted(tx.tx_id.hex(), loc.seq, "VALID" if valid else "INVALID", outs)


def _frame(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload + struct.pack(">I", zlib.crc32(payload))
