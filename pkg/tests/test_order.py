import random

import pytest

from evov.core import Block, Transaction, TxType, time_to_cut, verify_chain
from evov.msp import MspDirectory, Role
from evov.order import (
    AccessDenied, BlockCutter, ChannelConfig, ChannelExists, FatalLogCorruption, OrderingNode, OversizedTransaction,
    TotalOrderLog, UnknownChannel, bootstrap_channel, genesis_config,
)
from evov.validate import check_block_signature

from support import fake_tx, oracle_cut


class Net:
    """Three OSNs on one log plus a client and a peer."""

    def __init__(self, n_osn=3, **cfg_kw):
        rng = random.Random(1)
        msp = MspDirectory()
        self.osn_signers = [msp.generate_identity(f"osn{i}", "OrdererOrg", Role.ORDERER, rng) for i in range(n_osn)]
        msp.generate_identity("client0", "Org1", Role.CLIENT, rng)
        msp.generate_identity("peer0", "Org1", Role.PEER, rng)
        self.msp = msp.freeze()
        self.timers = []
        self.cfg = ChannelConfig("ch1", osn_addresses=[s.id for s in self.osn_signers], roster=msp.to_config(),
                                 **cfg_kw)
        self.log = TotalOrderLog()
        self.osns = [OrderingNode(s, call_later=lambda d, fn: self.timers.append((d, fn))) for s in self.osn_signers]
        self.genesis = self.osns[0].bootstrap_channel(self.cfg, self.log)
        for o in self.osns[1:]:
            o.bootstrap_channel(self.cfg, self.log, self.genesis)

    @property
    def osn(self):
        return self.osns[0]

    def send(self, tx, via=0):
        return self.osns[via].broadcast("ch1", tx, "client0")


def test_genesis_carries_config():
    n = Net()
    assert n.genesis.seq == 0 and check_block_signature(n.genesis, n.msp)
    assert genesis_config(n.genesis) == n.cfg
    assert bootstrap_channel(n.cfg).hash == n.genesis.hash


def test_channel_exists_and_unknown():
    n = Net()
    with pytest.raises(ChannelExists):
        n.osn.bootstrap_channel(n.cfg, n.log)
    with pytest.raises(UnknownChannel):
        n.osn.height("nope")


def test_count_rule_cuts_exactly():
    n = Net(batch_max_count=3)
    for i in range(7):
        n.send(fake_tx(i))
    blocks = n.osn.catch_up("ch1")
    assert [len(b.txs) for b in blocks] == [3, 3]
    assert n.osn.height("ch1") == 3


def test_bytes_rule_never_exceeds_limit():
    tx = fake_tx(0, pad=100)
    n = Net(batch_max_count=100, batch_max_bytes=3 * tx.size + 10)
    for i in range(10):
        n.send(fake_tx(i, pad=100))
    blocks = n.osn.catch_up("ch1")
    assert [len(b.txs) for b in blocks] == [3, 3, 3]
    assert all(sum(t.size for t in b.txs) <= n.cfg.batch_max_bytes for b in blocks)


def test_oversized_transaction_rejected():
    n = Net(batch_max_bytes=200)
    with pytest.raises(OversizedTransaction):
        n.send(fake_tx(0, pad=500))
    assert len(n.log) == 0


def test_broadcast_acl():
    n = Net()
    with pytest.raises(AccessDenied):
        n.osn.broadcast("ch1", fake_tx(0), "peer0")
    with pytest.raises(AccessDenied):
        n.osn.broadcast("ch1", fake_tx(0), "stranger")
    with pytest.raises(AccessDenied):
        n.osn.broadcast("ch1", time_to_cut(1, "client0"), "client0")


def test_deliver_acl_and_pending_block():
    n = Net(batch_max_count=2)
    assert n.osn.deliver("ch1", 1, "peer0") is None
    n.send(fake_tx(0))
    n.send(fake_tx(1))
    n.osn.catch_up("ch1")
    assert n.osn.deliver("ch1", 1, "peer0").seq == 1
    assert n.osn.deliver("ch1", 1, "osn1") is not None
    with pytest.raises(AccessDenied):
        n.osn.deliver("ch1", 1, "client0")


def test_timer_cuts_partial_batch_once():
    n = Net(batch_max_count=10)
    n.send(fake_tx(0))
    n.send(fake_tx(1))
    for o in n.osns:
        assert o.catch_up("ch1") == []
    assert len(n.timers) == 3 and all(d == n.cfg.batch_timeout for d, _ in n.timers)
    for _, fire in n.timers:  # each OSN appends a marker; only the first one counts
        fire()
    assert len(n.log) == 5
    cut = [o.catch_up("ch1") for o in n.osns]
    assert [len(c) for c in cut] == [1, 1, 1]
    assert len({c[0].body for c in cut}) == 1
    n.timers[0][1]()  # a timer firing after the cut adds nothing
    assert len(n.log) == 5


def test_stale_and_duplicate_time_to_cut_ignored():
    n = Net(batch_max_count=10)
    n.send(fake_tx(0))
    n.log.append(time_to_cut(1, "osn0"))
    n.log.append(time_to_cut(1, "osn1"))  # duplicate for the same block
    n.send(fake_tx(1))
    n.log.append(time_to_cut(1, "osn2"))  # stale: block 1 is already cut
    n.log.append(time_to_cut(5, "osn2"))  # for a future block
    n.send(fake_tx(2))
    n.log.append(time_to_cut(2, "osn0"))
    blocks = n.osn.catch_up("ch1")
    assert [[t.proposal.args[0] for t in b.txs] for b in blocks] == [[b"0"], [b"1", b"2"]]


def test_empty_time_to_cut_makes_no_block():
    n = Net()
    n.log.append(time_to_cut(1, "osn0"))
    assert n.osn.catch_up("ch1") == []


def test_duplicate_broadcast_is_ordered_twice():
    n = Net(batch_max_count=2)
    tx = fake_tx(0)
    n.send(tx)
    n.send(tx)
    [b] = n.osn.catch_up("ch1")
    assert b.txs == (tx, tx)  # filtered later by validation


def test_osns_agree_with_interleaved_catch_up():
    n = Net(batch_max_count=4)
    rng = random.Random(5)
    for i in range(60):
        n.send(fake_tx(i, pad=rng.randrange(40)), via=rng.randrange(3))
        o = rng.choice(n.osns)
        o.catch_up("ch1")
    for o in n.osns:
        o.catch_up("ch1")
    heights = {o.height("ch1") for o in n.osns}
    assert heights == {16}
    for s in range(16):
        blocks = [o.deliver("ch1", s) for o in n.osns]
        assert len({b.body for b in blocks}) == 1
        assert all(check_block_signature(b, n.msp) for b in blocks)
    chain = [n.osn.deliver("ch1", s) for s in range(16)]
    assert verify_chain(chain) is None


def test_late_osn_replays_to_same_chain():
    n = Net(batch_max_count=3)
    for i in range(20):
        n.send(fake_tx(i))
        n.osn.catch_up("ch1")
    late = OrderingNode(n.osn_signers[2])
    late.bootstrap_channel(n.cfg, n.log, n.genesis)
    late.catch_up("ch1")
    assert late.height("ch1") == n.osn.height("ch1")
    assert all(late.deliver("ch1", s).body == n.osn.deliver("ch1", s).body for s in range(late.height("ch1")))


def test_channels_are_independent():
    n = Net(batch_max_count=2)
    cfg2 = ChannelConfig("ch2", batch_max_count=1, roster=n.cfg.roster)
    log2 = TotalOrderLog()
    n.osn.bootstrap_channel(cfg2, log2)
    n.send(fake_tx(0))
    n.osn.broadcast("ch2", fake_tx(1), "client0")
    assert n.osn.catch_up("ch1") == []
    assert len(n.osn.catch_up("ch2")) == 1
    assert len(n.log) == 1 and len(log2) == 1


def test_retention_drops_old_blocks():
    log = TotalOrderLog()
    n = Net(batch_max_count=1)
    o = OrderingNode(n.osn_signers[1], retention=2)
    o.bootstrap_channel(n.cfg, log, n.genesis)
    for i in range(5):
        log.append(fake_tx(i))
    o.catch_up("ch1")
    assert o.deliver("ch1", 5) is not None and o.deliver("ch1", 2) is None


def test_cutter_rejects_log_gap():
    n = Net()
    c = BlockCutter(n.cfg, n.genesis)
    c.consume(0, fake_tx(0))
    with pytest.raises(FatalLogCorruption):
        c.consume(2, fake_tx(1))


def test_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig("x", batch_max_count=0)
    with pytest.raises(ValueError):
        ChannelConfig("x", batch_max_bytes=0)


@pytest.mark.parametrize("seed", range(5))
def test_cutter_matches_oracle(seed):
    rng = random.Random(seed)
    max_count, max_bytes = rng.randint(1, 8), rng.randint(300, 1500)
    n = Net(batch_max_count=max_count, batch_max_bytes=max_bytes)
    entries = []
    seq = 1
    for i in range(300):
        if rng.random() < 0.15:
            e = time_to_cut(max(1, seq + rng.randint(-2, 1)), f"osn{rng.randrange(3)}")
            n.log.append(e)
        else:
            e = fake_tx(i, pad=rng.randrange(200))
            n.send(e)
        entries.append(e)
        seq = n.osn.height("ch1") + (rng.random() < 0.5)
        if rng.random() < 0.3:
            n.osn.catch_up("ch1")
    n.osn.catch_up("ch1")
    want = oracle_cut(entries, max_count, max_bytes)
    got = [list(n.osn.deliver("ch1", s).txs) for s in range(1, n.osn.height("ch1"))]
    assert got == want
    assert all(isinstance(t, Transaction) and t.type == TxType.NORMAL for b in got for t in b)
    assert isinstance(n.osn.deliver("ch1", 1), Block)
