import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longctx.errors import DeadlockError, FabricError, TopologyError
from longctx.fabric import CommLedger, build_topology, run

MODES = ["stepped", "threads"]


def test_topology_ulysses_only():
    t = build_topology(4, 2, 1)
    assert t.dp_replicas == 2
    assert t.ulysses_groups == [(0, 1), (2, 3)]
    assert t.ring_groups == [(0,), (1,), (2,), (3,)]


def test_topology_hybrid():
    t = build_topology(4, 2, 2)
    assert t.dp_replicas == 1
    assert t.ulysses_groups == [(0, 1), (2, 3)]
    assert t.ring_groups == [(0, 2), (1, 3)]


@pytest.mark.parametrize("args", [(3, 2, 1), (4, 0, 1), (8, 3, 1)])
def test_topology_errors(args):
    with pytest.raises(TopologyError):
        build_topology(*args)


def enumerate_groups(n, pu, pr):
    # direct enumeration of the layout rule, independent of the library
    P = pu * pr
    uly, ring, dp = {}, {}, {}
    for rank in range(n):
        rep, local = divmod(rank, P)
        r, u = divmod(local, pu)
        uly.setdefault((rep, r), []).append(rank)
        ring.setdefault((rep, u), []).append(rank)
        dp.setdefault(local, []).append(rank)
    return [sorted(tuple(g) for g in d.values()) for d in (uly, ring, dp)]


@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 3]))
@settings(max_examples=40, deadline=None)
def test_groups_partition_ranks(pu, pr, reps):
    n = pu * pr * reps
    t = build_topology(n, pu, pr)
    families = (t.ulysses_groups, t.ring_groups, t.dp_groups)
    sizes = (pu, pr, reps)
    for fam, size in zip(families, sizes):
        flat = sorted(r for g in fam for r in g)
        assert flat == list(range(n))
        assert all(len(g) == size for g in fam)
    assert [sorted(f) for f in families] == enumerate_groups(n, pu, pr)


@pytest.mark.parametrize("mode", MODES)
def test_no_communication(mode):
    res = run(build_topology(4, 1, 1), lambda ctx: ctx.rank * 10, mode=mode)
    assert res.results == [0, 10, 20, 30]
    assert len(res.ledger) == 0


@pytest.mark.parametrize("mode", MODES)
def test_pair_exchange(mode):
    def prog(ctx):
        peer = 1 - ctx.rank
        return ctx.sendrecv(peer, np.full(1, float(ctx.rank)), peer, "x")

    res = run(build_topology(2, 1, 1), prog, mode=mode)
    assert [float(r[0]) for r in res.results] == [1.0, 0.0]
    assert [(e.rank, e.peer, e.primitive, e.bytes) for e in res.ledger] == [(0, 1, "p2p", 8), (1, 0, "p2p", 8)]


@pytest.mark.parametrize("mode", MODES)
def test_unmatched_send_deadlocks(mode):
    def prog(ctx):
        if ctx.rank == 0:
            ctx.send(1, b"hi", "p")

    with pytest.raises(DeadlockError) as info:
        run(build_topology(2, 1, 1), prog, mode=mode, timeout=2.0)
    assert 0 in info.value.blocked
    assert "send" in str(info.value)


@pytest.mark.parametrize("mode", MODES)
def test_send_recv_payload_intact(mode):
    payload = np.arange(32, dtype=np.float64)

    def prog(ctx):
        if ctx.rank == 0:
            ctx.send(1, payload, "p")
            return None
        return ctx.recv(0, "p")

    res = run(build_topology(2, 1, 1), prog, mode=mode)
    assert np.array_equal(res.results[1], payload)
    assert res.results[1] is not payload
    assert res.ledger.total() == 256


def test_self_send_rejected():
    with pytest.raises(FabricError):
        run(build_topology(2, 1, 1), lambda ctx: ctx.send(ctx.rank, b"x", "p"))


@pytest.mark.parametrize("mode", MODES)
def test_disjoint_pairs(mode):
    def prog(ctx):
        peer = ctx.rank ^ 1
        return ctx.sendrecv(peer, np.array([ctx.rank], dtype=float), peer, "p")

    res = run(build_topology(4, 1, 1), prog, mode=mode)
    assert [int(r[0]) for r in res.results] == [1, 0, 3, 2]


@pytest.mark.parametrize("mode", MODES)
def test_all_to_all_group_of_one(mode):
    res = run(build_topology(1, 1, 1), lambda ctx: ctx.all_to_all((0,), [np.ones(4)], "a"), mode=mode)
    assert np.array_equal(res.results[0][0], np.ones(4))
    assert res.ledger.total() == 0


@pytest.mark.parametrize("mode", MODES)
def test_all_to_all_pair(mode):
    def prog(ctx):
        shards = [np.full(8, 10.0 * ctx.rank + g) for g in range(2)]
        return ctx.all_to_all((0, 1), shards, "a")

    res = run(build_topology(2, 2, 1), prog, mode=mode)
    for me in range(2):
        got = [float(s[0]) for s in res.results[me]]
        assert got == [10.0 * src + me for src in range(2)]
    assert res.ledger.sent_by_rank() == {0: 64, 1: 64}
    assert res.ledger.by_primitive() == {"all_to_all": 128}


def test_all_to_all_shard_count_mismatch():
    with pytest.raises(FabricError):
        run(build_topology(2, 2, 1), lambda ctx: ctx.all_to_all((0, 1), [b"x"], "a"))


def test_partial_all_to_all_deadlocks():
    def prog(ctx):
        if ctx.rank == 0:
            ctx.all_to_all((0, 1), [b"a", b"b"], "a")

    with pytest.raises(DeadlockError):
        run(build_topology(2, 2, 1), prog)


@given(st.sampled_from([2, 3, 4]), st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_all_to_all_involution(n, seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, n, 3))
    group = tuple(range(n))

    def prog(ctx):
        once = ctx.all_to_all(group, list(data[ctx.rank]), "fwd")
        return ctx.all_to_all(group, once, "back")

    res = run(build_topology(n, n, 1), prog)
    for r in range(n):
        assert np.array_equal(np.stack(res.results[r]), data[r])


def ring_program(ctx):
    group = ctx.ring_group
    i = group.index(ctx.rank)
    nxt, prv = group[(i + 1) % len(group)], group[i - 1]
    acc = np.full(5, float(ctx.rank))
    block = acc.copy()
    for step in range(len(group) - 1):
        block = ctx.sendrecv(nxt, block, prv, f"s{step}")
        acc = acc + block
    with ctx.local_phase("local"):
        pass
    if len(ctx.ulysses_group) > 1:
        ctx.all_to_all(ctx.ulysses_group, [acc] * len(ctx.ulysses_group), "a")
    return acc


@pytest.mark.parametrize("shape", [(8, 2, 2), (8, 1, 4), (8, 4, 2)])
def test_modes_bitwise_identical_and_conserve_bytes(shape):
    topo = build_topology(*shape)
    a = run(topo, ring_program, mode="stepped")
    b = run(topo, ring_program, mode="threads")
    assert a.ledger == b.ledger
    assert all(np.array_equal(x, y) for x, y in zip(a.results, b.results))
    assert a.ledger.total_sent() == a.ledger.total_received()
    assert a.ledger.by_phase()["local"] == 0


def test_ledger_csv():
    res = run(build_topology(2, 2, 1), lambda ctx: ctx.all_to_all((0, 1), [b"ab", b"cd"], "a"))
    lines = res.ledger.to_csv().strip().splitlines()
    assert lines[0] == "rank,peer_or_group,primitive,phase,bytes"
    assert lines[1] == "0,grp(0 1)->1,all_to_all,a,2"
    assert CommLedger() == CommLedger()


def test_rank_exception_propagates():
    def prog(ctx):
        if ctx.rank == 1:
            raise KeyError("boom")
        return ctx.recv(1, "p")

    for mode in MODES:
        with pytest.raises(KeyError):
            run(build_topology(2, 1, 1), prog, mode=mode, timeout=2.0)


def test_unknown_mode():
    with pytest.raises(ValueError):
        run(build_topology(1, 1, 1), lambda ctx: None, mode="async")
