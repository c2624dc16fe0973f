import os
import random

import pytest

from evov.chaincode import ChaincodeDefinition, ChaincodeRegistry, SimulationFailed, ns_key
from evov.core import DecodeError
from evov.endorse import build_proposal
from evov.fabcoin import (
    CHAINCODE_ID, VSCC_ID, CoinState, FabcoinRequest, InvalidAmount, Kind, MissingKey, balance, coin_key, live_coins,
)
from evov.msp import new_keypair, sign_raw
from evov.validate import Code

from support import KV, Chan, kv_handler


def minted(c, amounts, **kw):
    tx = c.mint(amounts, **kw)
    v = c.run([tx])
    return tx, v, c.learn(tx, v.valid[0])


def request_tx(c, req_unsigned, signers, op=None, nonce=None):
    """Sign ``req_unsigned`` with raw secrets and endorse it."""
    nonce = nonce or os.urandom(24)
    msg = req_unsigned.message(nonce)
    sigs = tuple((new_keypair(s)[1], sign_raw(s, msg)) for s in signers)
    req = FabcoinRequest(req_unsigned.kind, req_unsigned.inputs, req_unsigned.outputs, sigs)
    p = build_proposal(c.client, "ch1", CHAINCODE_ID, op or req.kind.name.lower(), [req.encode()], nonce=nonce)
    return c.assemble(p)


def permissive(c):
    """Make every endorser run a chaincode that skips the semantic checks."""
    def handler(ctx, op, args):
        req = FabcoinRequest.decode(args[0])
        for k in req.inputs if req.kind == Kind.SPEND else ():
            ctx.get_state(k)
            ctx.del_state(k)
        for j, out in enumerate(req.outputs, 1):
            ctx.put_state(coin_key(ctx.tx_id, j), out.encode())
        return b"ok"
    reg = ChaincodeRegistry()
    reg.install(ChaincodeDefinition(KV, kv_handler, c.ctx.chaincodes[KV].policy), "ch1")
    reg.install(ChaincodeDefinition(CHAINCODE_ID, handler, c.ctx.chaincodes[CHAINCODE_ID].policy, VSCC_ID), "ch1")
    for e in c.endorsers.values():
        e.registry = reg


# encoding -------------------------------------------------------------------------


def test_request_round_trip():
    req = FabcoinRequest(Kind.SPEND, ("ab.1", "cd.2"), (CoinState(5, b"k" * 32, "USD"),), ((b"p", b"s"),))
    assert FabcoinRequest.decode(req.encode()) == req
    assert req.message(b"n1") != req.message(b"n2")
    with pytest.raises(DecodeError):
        FabcoinRequest.decode(b"\x09" + req.encode()[1:])
    c = CoinState(2**40, b"\x01" * 32, "€")
    assert CoinState.decode(c.encode()) == c


# minting --------------------------------------------------------------------------


def test_mint_creates_outputs_in_order(chan):
    tx, v, keys = minted(chan, [5, 7, 9])
    assert v.codes == (Code.VALID,)
    assert keys == [coin_key(tx.tx_id, j) for j in (1, 2, 3)]
    for k, amt in zip(keys, (5, 7, 9)):
        assert CoinState.decode(chan.state(k, CHAINCODE_ID)[0]).amount == amt
    assert balance(chan.ledger.snapshot(), chan.owner()) == 21


def test_mint_rwset_shape(chan):
    tx = chan.mint([1, 2])
    assert tx.rwset.reads == () and tx.rwset.range_reads == ()
    assert [w.key for w in tx.rwset.writes] == [ns_key(CHAINCODE_ID, coin_key(tx.tx_id, j)) for j in (1, 2)]


def test_mint_threshold_two_of_three():
    c = Chan(cbs=3, threshold=2)
    assert minted(c, [5], cb_ids=["cb1"])[1].codes == (Code.BAD_ENDORSEMENT,)
    assert minted(c, [5], cb_ids=["cb1", "cb3"])[1].codes == (Code.VALID,)
    assert minted(c, [5])[1].codes == (Code.VALID,)


def test_mint_by_non_central_bank(chan):
    rogue, _ = new_keypair(b"r" * 32)
    chan.wallet.cb_keys["cbX"] = rogue
    assert minted(chan, [5], cb_ids=["cbX"])[1].codes == (Code.BAD_ENDORSEMENT,)
    # a known id with the wrong key
    chan.wallet.cb_keys["cb1"] = rogue
    assert minted(chan, [5], cb_ids=["cb1"])[1].codes == (Code.BAD_ENDORSEMENT,)


def test_mint_wallet_checks(chan):
    with pytest.raises(InvalidAmount):
        chan.wallet.mint([CoinState(0, chan.owner(), "USD")])
    with pytest.raises(InvalidAmount):
        chan.wallet.mint([])
    with pytest.raises(MissingKey):
        chan.wallet.mint([CoinState(1, chan.owner(), "USD")], cb_ids=["cb9"])


def test_mint_signature_bound_to_nonce(chan):
    req = FabcoinRequest(Kind.MINT, ("cb1",), (CoinState(5, chan.owner(), "USD"),))
    good = request_tx(chan, req, [chan.cb_keys["cb1"]])
    replayed = FabcoinRequest.decode(good.proposal.args[0])
    p = build_proposal(chan.client, "ch1", CHAINCODE_ID, "mint", [replayed.encode()])  # fresh nonce
    assert chan.run([good, chan.assemble(p)]).codes == (Code.VALID, Code.BAD_ENDORSEMENT)


# spending -------------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(1, 1), (1, 2), (2, 1), (3, 2)])
def test_spend_shapes(chan, shape):
    n_in, n_out = shape
    _, _, coins = minted(chan, [10] * n_in)
    other = chan.wallet.new_key(chan.rng)
    outs = [CoinState(10 * n_in // n_out, other, "USD") for _ in range(n_out)]
    tx = chan.spend(coins, outs)
    v = chan.run([tx])
    assert v.codes == (Code.VALID,)
    assert all(chan.state(k, CHAINCODE_ID) is None for k in coins)
    assert balance(chan.ledger.snapshot(), other) == sum(o.amount for o in outs)


def test_spend_rwset_shape(chan):
    _, _, [coin] = minted(chan, [10])
    tx = chan.spend([coin], [CoinState(4, chan.owner(), "USD")])
    full = ns_key(CHAINCODE_ID, coin)
    assert [r.key for r in tx.rwset.reads] == [full] and tx.rwset.reads[0].version.block_num == 1
    writes = {w.key: w.value for w in tx.rwset.writes}
    assert writes[full] is None and len(writes) == 3  # delete + payment + change


def test_change_goes_back_to_first_owner(chan):
    _, _, [coin] = minted(chan, [10])
    tx = chan.spend([coin], [CoinState(3, chan.wallet.new_key(chan.rng), "USD")])
    chan.run([tx])
    assert balance(chan.ledger.snapshot(), chan.owner()) == 7
    assert sum(c.amount for c in live_coins(chan.ledger.snapshot()).values()) == 10


def test_overspend_rejected_by_chaincode_and_vscc(chan):
    _, _, [coin] = minted(chan, [10])
    req = FabcoinRequest(Kind.SPEND, (coin,), (CoinState(11, chan.owner(), "USD"),))
    key = chan.wallet.keys[chan.owner()]
    with pytest.raises(SimulationFailed, match="exceed"):
        request_tx(chan, req, [key])
    permissive(chan)
    assert chan.run([request_tx(chan, req, [key])]).codes == (Code.BAD_ENDORSEMENT,)


def test_label_mismatch(chan):
    _, _, [coin] = minted(chan, [10])
    req = FabcoinRequest(Kind.SPEND, (coin,), (CoinState(10, chan.owner(), "EUR"),))
    key = chan.wallet.keys[chan.owner()]
    with pytest.raises(SimulationFailed, match="label"):
        request_tx(chan, req, [key])
    permissive(chan)
    assert chan.run([request_tx(chan, req, [key])]).codes == (Code.BAD_ENDORSEMENT,)


def test_non_owner_cannot_spend(chan):
    _, _, [coin] = minted(chan, [10])
    thief, thief_pub = new_keypair(b"t" * 32)
    req = FabcoinRequest(Kind.SPEND, (coin,), (CoinState(10, thief_pub, "USD"),))
    assert chan.run([request_tx(chan, req, [thief])]).codes == (Code.BAD_ENDORSEMENT,)
    assert chan.state(coin, CHAINCODE_ID) is not None


def test_output_keyed_under_foreign_txid(chan):
    _, _, [coin] = minted(chan, [10])
    key = chan.wallet.keys[chan.owner()]

    def handler(ctx, op, args):
        req = FabcoinRequest.decode(args[0])
        ctx.get_state(coin)
        ctx.del_state(coin)
        ctx.put_state(coin_key(b"\x11" * 32, 1), req.outputs[0].encode())
        return b"ok"
    reg = ChaincodeRegistry()
    reg.install(ChaincodeDefinition(CHAINCODE_ID, handler, chan.ctx.chaincodes[CHAINCODE_ID].policy, VSCC_ID), "ch1")
    for e in chan.endorsers.values():
        e.registry = reg
    req = FabcoinRequest(Kind.SPEND, (coin,), (CoinState(10, chan.owner(), "USD"),))
    assert chan.run([request_tx(chan, req, [key])]).codes == (Code.BAD_ENDORSEMENT,)


def test_repeated_input_rejected(chan):
    _, _, [coin] = minted(chan, [10])
    req = FabcoinRequest(Kind.SPEND, (coin, coin), (CoinState(20, chan.owner(), "USD"),))
    with pytest.raises(SimulationFailed):
        request_tx(chan, req, [chan.wallet.keys[chan.owner()]])


def test_missing_coin(chan):
    chan.owner()
    chan.wallet.coins["ff.1"] = CoinState(5, chan.owner(), "USD")
    with pytest.raises(SimulationFailed, match="does not exist"):
        chan.spend(["ff.1"], [CoinState(5, chan.owner(), "USD")])
    with pytest.raises(MissingKey):
        chan.wallet.spend(["nope.1"], [CoinState(5, chan.owner(), "USD")])


def test_operation_must_match_request_kind(chan):
    req = FabcoinRequest(Kind.MINT, ("cb1",), (CoinState(5, chan.owner(), "USD"),))
    with pytest.raises(SimulationFailed):
        request_tx(chan, req, [chan.cb_keys["cb1"]], op="spend")


def test_double_spend_same_block_passes_vscc_fails_mvcc(chan):
    _, _, [coin] = minted(chan, [10])
    snap = chan.ledger.snapshot()
    a = chan.spend([coin], [CoinState(10, chan.wallet.new_key(chan.rng), "USD")], snapshot=snap)
    b = chan.spend([coin], [CoinState(10, chan.wallet.new_key(chan.rng), "USD")], snapshot=snap)
    assert chan.run([a, b]).codes == (Code.VALID, Code.MVCC_CONFLICT)


def test_double_spend_across_blocks(chan):
    _, _, [coin] = minted(chan, [10])
    snap = chan.ledger.snapshot()
    a = chan.spend([coin], [CoinState(10, chan.owner(), "USD")], snapshot=snap)
    b = chan.spend([coin], [CoinState(10, chan.owner(), "USD")], snapshot=snap)
    assert chan.run([a]).codes == (Code.VALID,)
    # the coin is gone from state, so the custom VSCC already refuses the second
    assert chan.run([b]).codes == (Code.BAD_ENDORSEMENT,)


def test_spending_unrelated_coins_in_one_block(chan):
    _, _, coins = minted(chan, [4, 6])
    snap = chan.ledger.snapshot()
    txs = [chan.spend([k], [CoinState(1, chan.owner(), "USD")], snapshot=snap) for k in coins]
    assert chan.run(txs).codes == (Code.VALID, Code.VALID)


def test_conservation_under_random_spends():
    c = Chan(seed=11)
    rng = random.Random(11)
    keys = [c.wallet.new_key(rng) for _ in range(4)]
    tx, v, _ = minted(c, [25] * 8, owner=keys[0])
    c.wallet.learn(tx.tx_id, FabcoinRequest.decode(tx.proposal.args[0]).outputs)
    for _ in range(30):
        k = rng.choice(sorted(c.wallet.coins))
        amt = c.wallet.coins[k].amount
        outs = [CoinState(max(1, amt // 2), rng.choice(keys), "USD")]
        t = c.spend([k], outs)
        v = c.run([t])
        c.learn(t, v.valid[0])
    total = sum(x.amount for x in live_coins(c.ledger.snapshot()).values())
    assert total == 200
