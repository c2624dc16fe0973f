import pytest

from evov.chaincode import (
    AlreadyInstalled, ChaincodeDefinition, ChaincodeRegistry, InvalidRange, SimulationAborted, SimulationFailed,
    UnknownChaincode, invoke_simulation, ns_key, range_query_string, split_key,
)
from evov.core import KVRead, KVWrite, Version, range_result_hash
from evov.ledger import StateView
from evov.policy import parse_policy

POL = parse_policy("org:Org1")


def snap(**kv):
    data = {ns_key("cc", k): (v.encode(), Version(1, i)) for i, (k, v) in enumerate(sorted(kv.items()))}
    return StateView(data, 2)


def run(handler, snapshot=None, args=(), **kw):
    return invoke_simulation(ChaincodeDefinition("cc", handler, POL), "op", args, snapshot or snap(), **kw)


def test_install_and_lookup_are_per_channel():
    reg = ChaincodeRegistry()
    d = ChaincodeDefinition("cc", lambda *a: b"", POL)
    reg.install(d, "ch1")
    assert reg.get("ch1", "cc") is d
    with pytest.raises(AlreadyInstalled):
        reg.install(d, "ch1")
    reg.install(d, "ch2")
    with pytest.raises(UnknownChaincode):
        reg.get("ch3", "cc")
    assert reg.installed("ch1") == ["cc"] and reg.installed("none") == []


def test_invalid_chaincode_id():
    with pytest.raises(ValueError):
        ChaincodeDefinition(ns_key("a", "b"), None, POL)


def test_read_of_absent_key_records_nil_once():
    def h(ctx, op, args):
        ctx.get_state("x")
        ctx.get_state("x")
        return b""
    _, rw = run(h)
    assert rw.reads == (KVRead(ns_key("cc", "x"), None),)


def test_read_records_committed_version():
    def h(ctx, op, args):
        return ctx.get_state("b")
    resp, rw = run(h, snap(a="1", b="2"))
    assert resp == b"2" and rw.reads == (KVRead(ns_key("cc", "b"), Version(1, 1)),)


def test_read_your_writes_without_dependency():
    def h(ctx, op, args):
        ctx.put_state("k", b"v")
        assert ctx.get_state("k") == b"v"
        ctx.del_state("k")
        assert ctx.get_state("k") is None
        return b""
    _, rw = run(h)
    assert rw.reads == () and rw.writes == (KVWrite(ns_key("cc", "k"), None),)


def test_last_write_wins_and_deletes():
    def h(ctx, op, args):
        ctx.put_state("k", b"1")
        ctx.put_state("k", b"2")
        ctx.del_state("a")
        return b""
    _, rw = run(h, snap(a="x"))
    assert dict((w.key, w.value) for w in rw.writes) == {ns_key("cc", "k"): b"2", ns_key("cc", "a"): None}


def test_range_query_sees_committed_rows_and_own_writes():
    def h(ctx, op, args):
        ctx.put_state("b2", b"new")
        ctx.del_state("b1")
        return ",".join(k for k, _ in ctx.range_query("b", "c")).encode()
    s = snap(a="1", b1="2", b3="3", c="4")
    resp, rw = run(h, s)
    assert resp == b"b2,b3"
    [rr] = rw.range_reads
    assert rr.query == range_query_string("cc", "b", "c")
    # the recorded hash covers committed rows only
    assert rr.result_hash == range_result_hash([(ns_key("cc", "b1"), Version(1, 1)), (ns_key("cc", "b3"), Version(1, 2))])


def test_range_bounds_are_half_open():
    def h(ctx, op, args):
        return ",".join(k for k, _ in ctx.range_query("a", "c")).encode()
    assert run(h, snap(a="1", b="2", c="3"))[0] == b"a,b"


def test_empty_range_and_inverted_range():
    def ok(ctx, op, args):
        return str(len(ctx.range_query("m", "m"))).encode()
    assert run(ok, snap(m="1"))[0] == b"0"

    def bad(ctx, op, args):
        ctx.range_query("z", "a")
    with pytest.raises(SimulationFailed, match="InvalidRange"):
        run(bad)
    assert issubclass(InvalidRange, Exception)


def test_handler_exception_becomes_simulation_failed():
    def h(ctx, op, args):
        raise KeyError("boom")
    with pytest.raises(SimulationFailed):
        run(h)


def test_non_bytes_response_or_value_fails():
    with pytest.raises(SimulationFailed):
        run(lambda ctx, op, args: "text")

    def h(ctx, op, args):
        ctx.put_state("k", "not bytes")
    with pytest.raises(SimulationFailed):
        run(h)


def test_step_budget_aborts_endless_loop():
    def h(ctx, op, args):
        while True:
            pass
    with pytest.raises(SimulationAborted):
        run(h, max_steps=10_000, deadline=None)


def test_deadline_aborts():
    def h(ctx, op, args):
        while True:
            pass
    with pytest.raises(SimulationAborted):
        run(h, max_steps=None, deadline=0.05)


def test_keys_are_namespaced():
    def h(ctx, op, args):
        ctx.put_state("k", b"v")
        return ctx.get_state("other") or b""
    s = StateView({ns_key("zz", "other"): (b"foreign", Version(1, 0))}, 2)
    resp, rw = run(h, s)
    assert resp == b""
    assert split_key(rw.writes[0].key) == ("cc", "k")


def test_snapshot_unchanged_by_simulation():
    s = snap(a="1", b="2")
    before = s.encoded()

    def h(ctx, op, args):
        ctx.put_state("a", b"9")
        ctx.del_state("b")
        ctx.range_query("", "~")
        return b""
    run(h, s)
    assert s.encoded() == before


def test_cross_chaincode_call_is_read_only():
    reg = ChaincodeRegistry()

    def other(ctx, op, args):
        if op == "write":
            ctx.put_state("x", b"1")
        return ctx.get_state("x") or b"none"
    reg.install(ChaincodeDefinition("other", other, POL), "ch")
    s = StateView({ns_key("other", "x"): (b"42", Version(1, 0))}, 2)

    def caller(ctx, op, args):
        return ctx.invoke_chaincode("other", op)
    defn = ChaincodeDefinition("cc", caller, POL)
    resp, rw = invoke_simulation(defn, "read", (), s, registry=reg, channel="ch")
    assert resp == b"42" and rw.reads == (KVRead(ns_key("other", "x"), Version(1, 0)),)
    with pytest.raises(SimulationFailed):
        invoke_simulation(defn, "write", (), s, registry=reg, channel="ch")
    with pytest.raises(SimulationFailed):
        invoke_simulation(defn, "read", (), s, registry=reg, channel="elsewhere")


def test_simulation_is_deterministic():
    def h(ctx, op, args):
        for k, v in ctx.range_query("", "~"):
            ctx.put_state(k + "!", v)
        return b""
    s = snap(a="1", b="2", c="3")
    assert run(h, s) == run(h, s)
