"""Fabcoin: authority-minted UTXO coins, with wallet, chaincode and custom VSCC.

A coin lives under key ``<txid hex>.<j>`` (j counted from 1) in the
``fabcoin`` namespace, with value (amount, owner public key, label).
Request signatures cover ``canonical(request without sigs) || nonce``.
"""

from __future__ import annotations

import enum
import os
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .chaincode import ChaincodeError, SimContext, ns_key
from .core import DecodeError, EvovError, Proposal, Reader, Transaction, Writer
from .endorse import build_proposal
from .ledger import StateView
from .msp import SigningIdentity, new_keypair, sign_raw, verify_raw
from .validate import ChannelContext, default_vscc

CHAINCODE_ID = "fabcoin"
VSCC_ID = "fabcoin"


class InvalidAmount(EvovError):
    pass


class MissingKey(EvovError):
    pass


class Kind(enum.IntEnum):
    MINT = 1
    SPEND = 2


@dataclass(frozen=True)
class CoinState:
    amount: int
    owner: bytes  # owner public key
    label: str

    def encode(self) -> bytes:
        return Writer().u64(self.amount).bytes_(self.owner).str_(self.label).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "CoinState":
        r = Reader(data)
        c = cls(r.u64(), r.bytes_(), r.str_())
        r.done()
        return c


@dataclass(frozen=True)
class FabcoinRequest:
    kind: Kind
    inputs: tuple[str, ...]  # coin keys (SPEND) or central-bank ids (MINT)
    outputs: tuple[CoinState, ...]
    sigs: tuple[tuple[bytes, bytes], ...] = ()  # (public key, signature)

    def signed_part(self) -> bytes:
        w = Writer().u8(int(self.kind)).u32(len(self.inputs))
        for i in self.inputs:
            w.str_(i)
        w.u32(len(self.outputs))
        for o in self.outputs:
            w.bytes_(o.encode())
        return w.getvalue()

    def message(self, nonce: bytes) -> bytes:
        return self.signed_part() + nonce

    def encode(self) -> bytes:
        w = Writer().raw(self.signed_part()).u32(len(self.sigs))
        for pk, sig in self.sigs:
            w.bytes_(pk).bytes_(sig)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "FabcoinRequest":
        r = Reader(data)
        try:
            kind = Kind(r.u8())
        except ValueError:
            raise DecodeError("bad fabcoin request kind") from None
        inputs = tuple(r.str_() for _ in range(r.u32()))
        outputs = tuple(CoinState.decode(r.bytes_()) for _ in range(r.u32()))
        sigs = tuple((r.bytes_(), r.bytes_()) for _ in range(r.u32()))
        r.done()
        return cls(kind, inputs, outputs, sigs)


def coin_key(tx_id: bytes, j: int) -> str:
    return f"{tx_id.hex()}.{j}"


# ---------------------------------------------------------------------------
# wallet


@dataclass
class Wallet:
    """Client-side key store and coin book."""

    client: SigningIdentity
    channel: str = "ch1"
    keys: dict[bytes, bytes] = field(default_factory=dict)  # public -> secret
    cb_keys: dict[str, bytes] = field(default_factory=dict)  # CB id -> secret
    coins: dict[str, CoinState] = field(default_factory=dict)  # known unspent coins

    def new_key(self, rng: Optional[random.Random] = None) -> bytes:
        secret, public = new_keypair(rng.randbytes(32) if rng else None)
        self.keys[public] = secret
        return public

    @property
    def default_key(self) -> bytes:
        return next(iter(self.keys))

    def mint(self, outputs: Sequence[CoinState], rng: Optional[random.Random] = None,
             cb_ids: Optional[Sequence[str]] = None) -> Proposal:
        return wallet_mint(self, outputs, rng=rng, cb_ids=cb_ids)

    def spend(self, inputs: Sequence[str], outputs: Sequence[CoinState],
              rng: Optional[random.Random] = None) -> Proposal:
        return wallet_spend(self, inputs, outputs, rng=rng)

    def learn(self, tx_id: bytes, outputs: Sequence[CoinState], spent: Sequence[str] = ()) -> None:
        for k in spent:
            self.coins.pop(k, None)
        for j, o in enumerate(outputs, 1):
            if o.owner in self.keys:
                self.coins[coin_key(tx_id, j)] = o


def _nonce(rng: Optional[random.Random]) -> bytes:
    return rng.randbytes(24) if rng is not None else os.urandom(24)


def wallet_mint(wallet: Wallet, outputs: Sequence[CoinState], *, rng: Optional[random.Random] = None,
                cb_ids: Optional[Sequence[str]] = None) -> Proposal:
    if not outputs:
        raise InvalidAmount("mint needs at least one output")
    if any(o.amount <= 0 for o in outputs):
        raise InvalidAmount("output amounts must be positive")
    ids = list(cb_ids) if cb_ids is not None else sorted(wallet.cb_keys)
    missing = [i for i in ids if i not in wallet.cb_keys]
    if missing or not ids:
        raise MissingKey(f"central bank key(s) not in wallet: {missing}")
    req = FabcoinRequest(Kind.MINT, tuple(ids), tuple(outputs))
    nonce = _nonce(rng)
    msg = req.message(nonce)
    sigs = []
    for i in ids:
        secret = wallet.cb_keys[i]
        pub = new_keypair(secret)[1]
        sigs.append((pub, sign_raw(secret, msg)))
    req = FabcoinRequest(req.kind, req.inputs, req.outputs, tuple(sigs))
    return build_proposal(wallet.client, wallet.channel, CHAINCODE_ID, "mint", [req.encode()], nonce=nonce)


def wallet_spend(wallet: Wallet, inputs: Sequence[str], outputs: Sequence[CoinState], *,
                 rng: Optional[random.Random] = None, change_owner: Optional[bytes] = None) -> Proposal:
    if not inputs:
        raise InvalidAmount("spend needs at least one input")
    if any(o.amount <= 0 for o in outputs):
        raise InvalidAmount("output amounts must be positive")
    owners = []
    for k in inputs:
        coin = wallet.coins.get(k)
        if coin is None or coin.owner not in wallet.keys:
            raise MissingKey(k)
        owners.append(coin.owner)
    outputs = list(outputs)
    total_in = sum(wallet.coins[k].amount for k in inputs)
    total_out = sum(o.amount for o in outputs)
    if total_in > total_out:
        label = wallet.coins[inputs[0]].label
        outputs.append(CoinState(total_in - total_out, change_owner or owners[0], label))
    if not outputs:
        raise InvalidAmount("spend needs at least one output")
    req = FabcoinRequest(Kind.SPEND, tuple(inputs), tuple(outputs))
    nonce = _nonce(rng)
    msg = req.message(nonce)
    sigs = tuple((pk, sign_raw(wallet.keys[pk], msg)) for pk in dict.fromkeys(owners))
    req = FabcoinRequest(req.kind, req.inputs, req.outputs, sigs)
    return build_proposal(wallet.client, wallet.channel, CHAINCODE_ID, "spend", [req.encode()], nonce=nonce)


# ---------------------------------------------------------------------------
# chaincode


def _semantic_check(req: FabcoinRequest, input_coins: Sequence[CoinState]) -> Optional[str]:
    if not req.outputs:
        return "no outputs"
    if any(o.amount <= 0 for o in req.outputs):
        return "non-positive output amount"
    if req.kind == Kind.SPEND:
        if not req.inputs or len(set(req.inputs)) != len(req.inputs):
            return "inputs empty or repeated"
        if sum(c.amount for c in input_coins) < sum(o.amount for o in req.outputs):
            return "outputs exceed inputs"
        labels = {c.label for c in input_coins} | {o.label for o in req.outputs}
        if len(labels) != 1:
            return "label mismatch"
    return None


def fabcoin_chaincode(ctx: SimContext, operation: str, args: tuple) -> bytes:
    if len(args) != 1:
        raise ChaincodeError("expected one request argument")
    req = FabcoinRequest.decode(args[0])
    if operation != req.kind.name.lower():
        raise ChaincodeError(f"operation {operation!r} does not match request kind")
    coins = []
    if req.kind == Kind.SPEND:
        for k in req.inputs:
            raw = ctx.get_state(k)
            if raw is None:
                raise ChaincodeError(f"input coin {k} does not exist")
            coins.append(CoinState.decode(raw))
    problem = _semantic_check(req, coins)
    if problem:
        raise ChaincodeError(problem)
    if req.kind == Kind.SPEND:
        for k in req.inputs:
            ctx.del_state(k)
    for j, out in enumerate(req.outputs, 1):
        ctx.put_state(coin_key(ctx.tx_id, j), out.encode())
    return b"ok"


# ---------------------------------------------------------------------------
# custom VSCC


def fabcoin_vscc(tx: Transaction, state: StateView, ctx: ChannelContext) -> bool:
    if not default_vscc(tx, state, ctx):
        return False
    p = tx.proposal
    if len(p.args) != 1:
        return False
    try:
        req = FabcoinRequest.decode(p.args[0])
    except DecodeError:
        return False
    if p.operation != req.kind.name.lower():
        return False
    msg = req.message(p.nonce)
    sigs = {}
    for pk, sig in req.sigs:
        if verify_raw(pk, msg, sig):
            sigs[pk] = sig

    ns = p.chaincode_id
    puts = {w.key: w.value for w in tx.rwset.writes if w.value is not None}
    dels = {w.key for w in tx.rwset.writes if w.value is None}
    expected = {ns_key(ns, coin_key(p.tx_id, j)): o.encode() for j, o in enumerate(req.outputs, 1)}
    if puts != expected:
        return False

    if req.kind == Kind.MINT:
        cfg = ctx.params.get("fabcoin", {})
        cbs: dict[str, str] = cfg.get("central_banks", {})
        threshold = cfg.get("threshold", 1)
        if dels or tx.rwset.reads or len(set(req.inputs)) != len(req.inputs):
            return False
        signed = 0
        for cb in req.inputs:
            pk_hex = cbs.get(cb)
            if pk_hex is None:
                return False
            if bytes.fromhex(pk_hex) in sigs:
                signed += 1
        return signed >= threshold and _semantic_check(req, []) is None

    read_keys = {r.key for r in tx.rwset.reads}
    coins = []
    for k in req.inputs:
        full = ns_key(ns, k)
        if full not in read_keys or full not in dels:
            return False
        ent = state.get(full)
        if ent is None:
            return False
        coins.append(CoinState.decode(ent[0]))
    if dels != {ns_key(ns, k) for k in req.inputs}:
        return False
    if any(c.owner not in sigs for c in coins):
        return False
    return _semantic_check(req, coins) is None


def live_coins(state: StateView, owner: Optional[bytes] = None,
               label: Optional[str] = None) -> dict[str, CoinState]:
    prefix = ns_key(CHAINCODE_ID, "")
    out = {}
    for k, v, _ in state.range(prefix, prefix + "\U0010ffff"):
        c = CoinState.decode(v)
        if (owner is None or c.owner == owner) and (label is None or c.label == label):
            out[k[len(prefix):]] = c
    return out


def balance(state: StateView, owner: bytes, label: Optional[str] = None) -> int:
    return sum(c.amount for c in live_coins(state, owner, label).values())
