"""Simulated multi-rank communication fabric.

A *program* is a callable ``program(ctx) -> result`` executed once per
rank. Ranks talk only through the blocking primitives on
:class:`RankContext` (``send``/``recv``/``sendrecv``/``all_to_all``) and
every remote transfer is recorded in a :class:`CommLedger`.

Two execution modes produce identical results and ledgers:

``"stepped"``
    One rank runs at a time; whenever the running rank blocks or finishes,
    control passes to the lowest-numbered rank that can make progress.
    A state where unfinished ranks exist but none can progress is a
    deadlock.
``"threads"``
    Every rank runs freely in its own thread. Deadlock is detected when
    all unfinished ranks are blocked at once, with a wall-clock timeout
    as a backstop.
"""

import csv
import io
import threading
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DeadlockError, FabricError, TopologyError

MODES = ("stepped", "threads")
DEFAULT_TIMEOUT_S = 10.0


# -- topology -------------------------------------------------------------------


@dataclass(frozen=True)
class ProcessTopology:
    """Rank layout for hybrid sequence parallelism.

    Ranks are split into ``dp_replicas`` blocks of ``P = p_u * p_r``
    consecutive ranks. Inside a block, local index ``l`` maps to Ulysses
    coordinate ``l % p_u`` (fastest varying, so Ulysses peers are adjacent)
    and ring coordinate ``l // p_u``.
    """

    n_gpu: int
    p_u: int
    p_r: int

    def __post_init__(self):
        for name in ("n_gpu", "p_u", "p_r"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise TopologyError(f"{name} must be a positive integer, got {value!r}")
        if self.n_gpu % (self.p_u * self.p_r):
            raise TopologyError(
                f"p_u * p_r = {self.p_u * self.p_r} does not divide n_gpu = {self.n_gpu}"
            )

    @property
    def sp_size(self):
        return self.p_u * self.p_r

    @property
    def dp_replicas(self):
        return self.n_gpu // self.sp_size

    def coords(self, rank):
        """``(replica, ulysses_index, ring_index)`` of a rank."""
        if not 0 <= rank < self.n_gpu:
            raise TopologyError(f"rank {rank} outside [0, {self.n_gpu})")
        replica, local = divmod(rank, self.sp_size)
        ring_idx, uly_idx = divmod(local, self.p_u)
        return replica, uly_idx, ring_idx

    def sp_local_index(self, rank):
        return rank % self.sp_size

    def ulysses_group_of(self, rank):
        replica, _, r = self.coords(rank)
        base = replica * self.sp_size + r * self.p_u
        return tuple(range(base, base + self.p_u))

    def ring_group_of(self, rank):
        replica, u, _ = self.coords(rank)
        base = replica * self.sp_size + u
        return tuple(base + self.p_u * i for i in range(self.p_r))

    def dp_group_of(self, rank):
        local = self.sp_local_index(rank)
        return tuple(local + self.sp_size * i for i in range(self.dp_replicas))

    def sp_group_of(self, rank):
        replica = rank // self.sp_size
        return tuple(range(replica * self.sp_size, (replica + 1) * self.sp_size))

    def _family(self, fn):
        seen = []
        for rank in range(self.n_gpu):
            g = fn(rank)
            if g not in seen:
                seen.append(g)
        return seen

    @property
    def ulysses_groups(self):
        return self._family(self.ulysses_group_of)

    @property
    def ring_groups(self):
        return self._family(self.ring_group_of)

    @property
    def dp_groups(self):
        return self._family(self.dp_group_of)

    @property
    def sp_groups(self):
        return self._family(self.sp_group_of)


def build_topology(n_gpu, p_u, p_r):
    return ProcessTopology(n_gpu, p_u, p_r)


# -- ledger ---------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    rank: int
    peer: int
    primitive: str  # "p2p" | "all_to_all"
    phase: str
    bytes: int
    group: tuple = None
    seq: tuple = ()

    @property
    def peer_or_group(self):
        if self.group is None:
            return str(self.peer)
        return "grp(" + " ".join(map(str, self.group)) + f")->{self.peer}"


class CommLedger:
    """Sender-side record of every remote transfer.

    Entries are kept in canonical ``(rank, per-rank op sequence)`` order so
    the ledger is identical whatever the interleaving of ranks was.
    """

    CSV_COLUMNS = ("rank", "peer_or_group", "primitive", "phase", "bytes")

    def __init__(self, entries=(), received=None, local_phases=()):
        self.entries = sorted(entries, key=lambda e: (e.rank, e.seq))
        self.received = dict(sorted((received or {}).items()))
        self.local_phases = frozenset(local_phases)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return (
            isinstance(other, CommLedger)
            and self.entries == other.entries
            and self.received == other.received
            and self.local_phases == other.local_phases
        )

    def filter(self, rank=None, primitive=None, phase=None):
        out = []
        for e in self.entries:
            if rank is not None and e.rank != rank:
                continue
            if primitive is not None and e.primitive != primitive:
                continue
            if phase is not None:
                if callable(phase):
                    if not phase(e.phase):
                        continue
                elif e.phase != phase:
                    continue
            out.append(e)
        return out

    def total(self, rank=None, primitive=None, phase=None):
        return sum(e.bytes for e in self.filter(rank, primitive, phase))

    def sent_by_rank(self):
        out = defaultdict(int)
        for e in self.entries:
            out[e.rank] += e.bytes
        return dict(out)

    def by_primitive(self):
        out = defaultdict(int)
        for e in self.entries:
            out[e.primitive] += e.bytes
        return dict(sorted(out.items()))

    def by_phase(self):
        out = defaultdict(int)
        for e in self.entries:
            out[e.phase] += e.bytes
        for phase in self.local_phases:
            out.setdefault(phase, 0)
        return dict(sorted(out.items()))

    def total_sent(self):
        return sum(e.bytes for e in self.entries)

    def total_received(self):
        return sum(self.received.values())

    def rows(self):
        return [(e.rank, e.peer_or_group, e.primitive, e.phase, e.bytes) for e in self.entries]

    def to_csv(self, fh=None):
        """Write the ledger as CSV to ``fh`` (path or file object); returns the text if ``fh`` is None."""
        if fh is None:
            buf = io.StringIO()
            self.to_csv(buf)
            return buf.getvalue()
        if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
            with open(fh, "w", newline="") as f:
                return self.to_csv(f)
        writer = csv.writer(fh)
        writer.writerow(self.CSV_COLUMNS)
        writer.writerows(self.rows())
        return None


def payload_nbytes(payload):
    if isinstance(payload, np.ndarray):
        return int(payload.nbytes)
    if isinstance(payload, (bytes, bytearray, memoryview)):
        return len(payload)
    raise TypeError(f"payload must be a numpy array or bytes, got {type(payload).__name__}")


def _copy(payload):
    if isinstance(payload, np.ndarray):
        return payload.copy()
    return bytes(payload)


# -- engine ---------------------------------------------------------------------


class _Aborted(BaseException):
    """Unwinds rank threads after another rank failed or a deadlock was found."""


class _Op:
    __slots__ = ("kind", "rank", "peer", "phase", "payload", "result", "done", "seq", "group")

    def __init__(self, kind, rank, peer, phase, seq, payload=None, group=None):
        self.kind = kind
        self.rank = rank
        self.peer = peer
        self.phase = phase
        self.seq = seq
        self.payload = payload
        self.group = group
        self.result = None
        self.done = False

    def describe(self):
        if self.kind == "a2a":
            return f"all_to_all(group={list(self.group)}, phase={self.phase!r})"
        arrow = "to" if self.kind == "send" else "from"
        return f"{self.kind}({arrow}={self.peer}, phase={self.phase!r})"


class _Engine:
    def __init__(self, topology, mode, timeout):
        self.topology = topology
        self.mode = mode
        self.timeout = timeout
        self.cv = threading.Condition()
        n = topology.n_gpu
        self.state = ["ready"] * n  # ready | running | blocked | done
        self.waiting_on = [()] * n
        self.op_seq = [0] * n
        self.coll_calls = [defaultdict(int) for _ in range(n)]
        self.sends = defaultdict(deque)  # (src, dst, phase) -> ops
        self.recvs = defaultdict(deque)  # (src, dst, phase) -> ops
        self.collectives = {}  # (group, phase, call) -> {rank: op}
        self.entries = []
        self.received = defaultdict(int)
        self.local_phases = set()
        self.error = None
        self.turn = None

    # primitives, called with self.cv held

    def _next_seq(self, rank):
        self.op_seq[rank] += 1
        return self.op_seq[rank]

    def _deliver(self, send_op, recv_op):
        data = send_op.payload
        nbytes = payload_nbytes(data)
        recv_op.result = _copy(data)
        send_op.done = recv_op.done = True
        self.entries.append(LedgerEntry(send_op.rank, recv_op.rank, "p2p", send_op.phase, nbytes, None, (send_op.seq, 0)))
        self.received[recv_op.rank] += nbytes
        self.cv.notify_all()

    def post_send(self, rank, peer, payload, phase):
        if peer == rank:
            raise FabricError(f"rank {rank} cannot send to itself")
        self._check_rank(peer)
        payload_nbytes(payload)
        op = _Op("send", rank, peer, phase, self._next_seq(rank), payload=payload)
        waiting = self.recvs[(rank, peer, phase)]
        if waiting:
            self._deliver(op, waiting.popleft())
        else:
            self.sends[(rank, peer, phase)].append(op)
        return op

    def post_recv(self, rank, peer, phase):
        if peer == rank:
            raise FabricError(f"rank {rank} cannot receive from itself")
        self._check_rank(peer)
        op = _Op("recv", rank, peer, phase, self._next_seq(rank))
        waiting = self.sends[(peer, rank, phase)]
        if waiting:
            self._deliver(waiting.popleft(), op)
        else:
            self.recvs[(peer, rank, phase)].append(op)
        return op

    def post_all_to_all(self, rank, group, shards, phase):
        group = tuple(group)
        if rank not in group:
            raise FabricError(f"rank {rank} is not a member of group {list(group)}")
        if len(shards) != len(group):
            raise FabricError(f"all_to_all on a group of {len(group)} needs {len(group)} shards, got {len(shards)}")
        for s in shards:
            payload_nbytes(s)
        calls = self.coll_calls[rank]
        call = calls[(group, phase)]
        calls[(group, phase)] += 1
        op = _Op("a2a", rank, None, phase, self._next_seq(rank), payload=list(shards), group=group)
        key = (group, phase, call)
        members = self.collectives.setdefault(key, {})
        members[rank] = op
        if len(members) == len(group):
            del self.collectives[key]
            self._complete_all_to_all(group, members)
        return op

    def _complete_all_to_all(self, group, members):
        for dst_idx, dst in enumerate(group):
            out = []
            for src in group:
                shard = members[src].payload[dst_idx]
                if src == dst:
                    out.append(_copy(shard))
                    continue
                nbytes = payload_nbytes(shard)
                out.append(_copy(shard))
                self.entries.append(
                    LedgerEntry(src, dst, "all_to_all", members[src].phase, nbytes, group, (members[src].seq, dst_idx))
                )
                self.received[dst] += nbytes
            members[dst].result = out
        for op in members.values():
            op.done = True
        self.cv.notify_all()

    def _check_rank(self, peer):
        if not 0 <= peer < self.topology.n_gpu:
            raise FabricError(f"peer {peer} outside [0, {self.topology.n_gpu})")

    # blocking

    def _can_progress(self, rank):
        s = self.state[rank]
        if s == "ready":
            return True
        if s == "blocked":
            return all(op.done for op in self.waiting_on[rank])
        return False

    def _deadlock(self):
        blocked = {
            r: "; ".join(op.describe() for op in self.waiting_on[r] if not op.done)
            for r, s in enumerate(self.state)
            if s == "blocked"
        }
        desc = ", ".join(f"rank {r}: {d}" for r, d in blocked.items())
        return DeadlockError(f"deadlock: ranks blocked on unmatched transfers ({desc})", blocked)

    def _fail(self, exc):
        if self.error is None:
            self.error = exc
        self.cv.notify_all()

    def wait(self, rank, ops):
        if all(op.done for op in ops):
            return
        self.state[rank] = "blocked"
        self.waiting_on[rank] = tuple(ops)
        if self.mode == "stepped":
            self.turn = None
            self.cv.notify_all()
            while self.turn != rank and self.error is None:
                self.cv.wait()
            if self.error is not None:
                raise _Aborted()
        else:
            deadline = None
            while not all(op.done for op in ops):
                if self.error is not None:
                    raise _Aborted()
                live = [r for r, s in enumerate(self.state) if s != "done"]
                if all(self.state[r] == "blocked" and not self._can_progress(r) for r in live):
                    self._fail(self._deadlock())
                    raise _Aborted()
                if deadline is None:
                    deadline = time.monotonic() + self.timeout
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._fail(self._deadlock())
                    raise _Aborted()
                self.cv.wait(remaining)
            self.cv.notify_all()
        self.state[rank] = "running"
        self.waiting_on[rank] = ()

    # rank threads

    def rank_main(self, rank, program, results):
        ctx = RankContext(rank, self.topology, self)
        try:
            with self.cv:
                if self.mode == "stepped":
                    while self.turn != rank and self.error is None:
                        self.cv.wait()
                    if self.error is not None:
                        return
                self.state[rank] = "running"
            results[rank] = program(ctx)
        except _Aborted:
            return
        except BaseException as exc:  # noqa: BLE001 - re-raised by run()
            with self.cv:
                self.state[rank] = "done"
                try:
                    exc.rank = rank
                except AttributeError:
                    pass
                self._fail(exc)
                if self.mode == "stepped":
                    self.turn = None
            return
        with self.cv:
            self.state[rank] = "done"
            if self.mode == "stepped":
                self.turn = None
            self.cv.notify_all()

    def schedule(self):
        """Stepped-mode scheduler loop; runs on the calling thread."""
        with self.cv:
            while True:
                while self.turn is not None and self.error is None:
                    self.cv.wait()
                if self.error is not None:
                    return
                runnable = [r for r in range(self.topology.n_gpu) if self._can_progress(r)]
                if not runnable:
                    if all(s == "done" for s in self.state):
                        return
                    self._fail(self._deadlock())
                    return
                self.turn = runnable[0]
                self.cv.notify_all()

    def supervise(self):
        """Threads-mode watchdog: wake waiters so each re-checks for deadlock."""
        with self.cv:
            while self.error is None and not all(s == "done" for s in self.state):
                self.cv.wait(0.05)
                live = [r for r, s in enumerate(self.state) if s != "done"]
                if live and all(self.state[r] == "blocked" and not self._can_progress(r) for r in live):
                    self._fail(self._deadlock())
                    return


class RankContext:
    """Handle given to each rank's program."""

    def __init__(self, rank, topology, engine):
        self.rank = rank
        self.topology = topology
        self._engine = engine

    def __repr__(self):
        return f"RankContext(rank={self.rank}, topology={self.topology})"

    @property
    def ulysses_group(self):
        return self.topology.ulysses_group_of(self.rank)

    @property
    def ring_group(self):
        return self.topology.ring_group_of(self.rank)

    @property
    def dp_group(self):
        return self.topology.dp_group_of(self.rank)

    @property
    def coords(self):
        return self.topology.coords(self.rank)

    def send(self, peer, payload, phase):
        eng = self._engine
        with eng.cv:
            op = eng.post_send(self.rank, peer, payload, phase)
            eng.wait(self.rank, (op,))

    def recv(self, peer, phase):
        eng = self._engine
        with eng.cv:
            op = eng.post_recv(self.rank, peer, phase)
            eng.wait(self.rank, (op,))
        return op.result

    def sendrecv(self, send_to, payload, recv_from, phase):
        """Post a send and a receive together and block until both complete."""
        eng = self._engine
        with eng.cv:
            s = eng.post_send(self.rank, send_to, payload, phase)
            r = eng.post_recv(self.rank, recv_from, phase)
            eng.wait(self.rank, (s, r))
        return r.result

    def all_to_all(self, group, shards, phase):
        """Member ``g`` of ``group`` receives shard ``g`` from every member, in group order."""
        eng = self._engine
        with eng.cv:
            op = eng.post_all_to_all(self.rank, group, shards, phase)
            eng.wait(self.rank, (op,))
        return op.result

    @contextmanager
    def local_phase(self, name):
        """Label a block of purely local compute; it shows up in the ledger with 0 bytes."""
        with self._engine.cv:
            self._engine.local_phases.add(name)
        yield


@dataclass
class RunResult:
    results: list
    ledger: CommLedger


def run(topology, program, mode="stepped", timeout=DEFAULT_TIMEOUT_S):
    """Execute ``program`` on every rank of ``topology``.

    Returns per-rank results and the communication ledger. Raises
    :class:`DeadlockError` when ranks block forever, or re-raises the first
    exception thrown by a rank program.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    engine = _Engine(topology, mode, timeout)
    results = [None] * topology.n_gpu
    threads = [
        threading.Thread(target=engine.rank_main, args=(r, program, results), daemon=True, name=f"rank-{r}")
        for r in range(topology.n_gpu)
    ]
    for t in threads:
        t.start()
    if mode == "stepped":
        engine.schedule()
    else:
        engine.supervise()
    for t in threads:
        t.join(timeout=max(timeout, 1.0))
    if engine.error is not None:
        raise engine.error
    if any(t.is_alive() for t in threads):
        raise FabricError("rank threads failed to terminate")
    ledger = CommLedger(engine.entries, engine.received, engine.local_phases)
    return RunResult(results, ledger)
