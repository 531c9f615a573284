"""Sequence-parallel attention over the simulated fabric.

The global sequence of each data-parallel replica is cut into ``P``
contiguous row shards; SP-local rank ``l`` holds rows
``[l * S/P, (l + 1) * S/P)`` with all heads.

* Ulysses: an all-to-all inside the Ulysses group trades heads for rows,
  so each rank sees its group's whole row span for ``H / p_u`` heads.
* Ring: key/value blocks travel around the ring group; each rank merges
  online-softmax statistics of its queries against every block.
* USP: Ulysses first, then the ring over the gathered spans, then the
  reverse all-to-all.

Rotary time embeddings are applied to each rank's own rows (with global
timestamps) before any communication, so rotated Q/K are what travel.
The padding mask is replicated on every rank: SP-aware sampling hands all
ranks of a group the same batch, so no mask bytes cross the fabric.
"""

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionProblem, PartialAttn, block_stats, finalize, merge_stats, visibility_mask
from .errors import ShapeError
from .fabric import run
from .kernels import layer_norm, mlp2
from .rote import RoteConfig, TokenTimeline, rotate

PHASE_QKV = "qkv_a2a"
PHASE_OUT = "out_a2a"
PHASE_LN = "ln"
PHASE_FFN = "ffn"


def ring_phase(step):
    return f"ring_step_{step}"


@dataclass(frozen=True)
class ShardLayout:
    s_global: int
    h_total: int
    d_h: int
    p_u: int
    p_r: int

    def __post_init__(self):
        P = self.p_u * self.p_r
        if self.s_global % P:
            raise ShapeError(f"sequence length {self.s_global} is not divisible by P={P}; pad first")
        if self.h_total % self.p_u:
            raise ShapeError(f"{self.h_total} heads cannot be split evenly over p_u={self.p_u}")

    @classmethod
    def for_topology(cls, topology, s_global, h_total, d_h):
        return cls(s_global, h_total, d_h, topology.p_u, topology.p_r)

    @property
    def sp_size(self):
        return self.p_u * self.p_r

    @property
    def s_local(self):
        return self.s_global // self.sp_size

    @property
    def s_group(self):
        """Rows covered by one Ulysses group (also the ring block length)."""
        return self.s_global // self.p_r

    @property
    def h_local(self):
        return self.h_total // self.p_u

    def seq_shard(self, local_index):
        return local_index * self.s_local, self.s_local

    def head_shard(self, uly_index):
        return uly_index * self.h_local, self.h_local

    def group_span(self, ring_index):
        return ring_index * self.s_group, self.s_group


@dataclass
class SpInput:
    """One rank's slice of an attention problem.

    ``q``/``k``/``v`` are ``(H, S_local, d_h)``; ``taus`` are the global
    timestamps of the local rows (``None`` disables rotation);
    ``pad_mask`` covers the whole sequence.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    taus: np.ndarray
    pad_mask: np.ndarray
    causal: bool
    s_global: int
    row_start: int
    rote: RoteConfig = None


def shard_problem(problem, topology):
    """Per-rank :class:`SpInput` list; every DP replica gets the same problem."""
    H, S, d = problem.shape
    layout = ShardLayout.for_topology(topology, S, H, d)
    taus = None if problem.timeline is None else problem.timeline.taus
    inputs = []
    for rank in range(topology.n_gpu):
        start, n = layout.seq_shard(topology.sp_local_index(rank))
        rows = slice(start, start + n)
        inputs.append(
            SpInput(
                q=problem.q[:, rows].copy(),
                k=problem.k[:, rows].copy(),
                v=problem.v[:, rows].copy(),
                taus=None if taus is None else taus[rows].copy(),
                pad_mask=problem.pad_mask.copy(),
                causal=problem.causal,
                s_global=S,
                row_start=start,
                rote=problem.rote,
            )
        )
    return inputs


def gather_shards(shards, topology, replica=0, seq_axis=1):
    """Concatenate one replica's per-rank output shards back into the full sequence."""
    base = replica * topology.sp_size
    return np.concatenate([shards[base + l] for l in range(topology.sp_size)], axis=seq_axis)


def _rotated(inp):
    if inp.taus is None:
        return inp.q, inp.k
    cfg = inp.rote or RoteConfig(inp.q.shape[-1])
    return rotate(inp.q, inp.taus, cfg), rotate(inp.k, inp.taus, cfg)


def _ulysses_scatter(ctx, q, k, v):
    group = ctx.ulysses_group
    p_u = len(group)
    qkv = np.stack([q, k, v])
    h_local = q.shape[0] // p_u
    shards = [np.ascontiguousarray(qkv[:, g * h_local : (g + 1) * h_local]) for g in range(p_u)]
    received = ctx.all_to_all(group, shards, PHASE_QKV)
    qkv = np.concatenate(received, axis=2)
    return qkv[0], qkv[1], qkv[2]


def _ulysses_gather(ctx, out):
    group = ctx.ulysses_group
    p_u = len(group)
    s_local = out.shape[1] // p_u
    shards = [np.ascontiguousarray(out[:, g * s_local : (g + 1) * s_local]) for g in range(p_u)]
    received = ctx.all_to_all(group, shards, PHASE_OUT)
    return np.concatenate(received, axis=0)


def _ring_merge(ctx, q, k, v, q_rows, block_rows, pad_mask, causal, skip_masked):
    """Online-softmax attention of ``q`` over the blocks held by the ring group.

    ``block_rows[i]`` gives the global rows of the block that starts on ring
    member ``i``.
    """
    group = ctx.ring_group
    p_r = len(group)
    me = group.index(ctx.rank)
    nxt, prv = group[(me + 1) % p_r], group[(me - 1) % p_r]
    acc = PartialAttn.empty(q.shape[:2], v.shape[-1])
    kv = np.stack([k, v])
    for step in range(p_r):
        origin = (me - step) % p_r
        k_rows = block_rows[origin]
        mask = visibility_mask(q_rows, k_rows, causal, pad_mask[k_rows])
        if not (skip_masked and not mask.any()):
            acc = merge_stats(acc, block_stats(q, kv[0], kv[1], mask))
        if step < p_r - 1:
            kv = ctx.sendrecv(nxt, kv, prv, ring_phase(step))
    return finalize(acc, row_valid=pad_mask[q_rows])


def _check(ctx, inp):
    H, _, d = inp.q.shape
    layout = ShardLayout.for_topology(ctx.topology, inp.s_global, H, d)
    if inp.q.shape[1] != layout.s_local:
        raise ShapeError(f"rank {ctx.rank} holds {inp.q.shape[1]} rows, layout expects {layout.s_local}")
    return layout


def usp_attention(ctx, inp, skip_masked_blocks=False):
    """Hybrid Ulysses x Ring attention; returns this rank's ``(H, S_local, d_h)`` output."""
    layout = _check(ctx, inp)
    _, u, r = ctx.coords
    q, k = _rotated(inp)
    v = inp.v
    if layout.p_u > 1:
        q, k, v = _ulysses_scatter(ctx, q, k, v)
    start, n = layout.group_span(r)
    q_rows = np.arange(start, start + n)
    block_rows = [np.arange(i * n, (i + 1) * n) for i in range(layout.p_r)]
    out = _ring_merge(ctx, q, k, v, q_rows, block_rows, inp.pad_mask, inp.causal, skip_masked_blocks)
    out = out.astype(inp.v.dtype, copy=False)
    if layout.p_u > 1:
        out = _ulysses_gather(ctx, out)
    return out


def ulysses_attention(ctx, inp):
    """Ulysses-only attention. Keys are limited to the Ulysses group's row span,
    which is the whole sequence when ``p_r == 1``."""
    layout = _check(ctx, inp)
    _, _, r = ctx.coords
    q, k = _rotated(inp)
    v = inp.v
    if layout.p_u > 1:
        q, k, v = _ulysses_scatter(ctx, q, k, v)
    start, n = layout.group_span(r)
    rows = np.arange(start, start + n)
    mask = visibility_mask(rows, rows, inp.causal, inp.pad_mask[rows])
    out = finalize(block_stats(q, k, v, mask), row_valid=inp.pad_mask[rows]).astype(inp.v.dtype, copy=False)
    if layout.p_u > 1:
        out = _ulysses_gather(ctx, out)
    return out


def ring_attention(ctx, inp, skip_masked_blocks=False):
    """Ring-only attention over the ring group with all heads local. Keys are
    the shards held by ring members, which is the whole sequence when ``p_u == 1``."""
    layout = _check(ctx, inp)
    topo = ctx.topology
    q, k = _rotated(inp)
    block_rows = []
    for member in ctx.ring_group:
        s, n = layout.seq_shard(topo.sp_local_index(member))
        block_rows.append(np.arange(s, s + n))
    q_rows = np.arange(inp.row_start, inp.row_start + layout.s_local)
    out = _ring_merge(ctx, q, k, inp.v, q_rows, block_rows, inp.pad_mask, inp.causal, skip_masked_blocks)
    return out.astype(inp.v.dtype, copy=False)


def expected_comm(topology, s_global, h_total, d_h, elem_bytes=8):
    """Closed-form bytes sent per rank, by phase, for one USP forward."""
    layout = ShardLayout.for_topology(topology, s_global, h_total, d_h)
    p_u, p_r = layout.p_u, layout.p_r
    # (S_grp / p_u) * H * d_h * (p_u - 1) / p_u, kept in integers
    out_a2a = layout.s_local * layout.h_local * d_h * (p_u - 1) * elem_bytes
    expected = {}
    if p_u > 1:
        expected[PHASE_QKV] = 3 * out_a2a
        expected[PHASE_OUT] = out_a2a
    per_step = 2 * layout.s_group * layout.h_local * d_h * elem_bytes
    for step in range(p_r - 1):
        expected[ring_phase(step)] = per_step
    return expected


def compare_ledger(ledger, topology, s_global, h_total, d_h, elem_bytes=8, extra_zero_phases=()):
    """Per-rank, per-phase mismatches between a ledger and :func:`expected_comm` (empty if exact)."""
    expected = expected_comm(topology, s_global, h_total, d_h, elem_bytes)
    mismatches = []
    phases = set(expected) | {e.phase for e in ledger} | set(extra_zero_phases)
    for rank in range(topology.n_gpu):
        for phase in sorted(phases):
            got = ledger.total(rank=rank, phase=phase)
            want = expected.get(phase, 0)
            if got != want:
                mismatches.append((rank, phase, got, want))
    # all-to-all stays inside Ulysses groups, p2p inside ring groups
    for e in ledger:
        if e.primitive == "all_to_all" and e.peer not in topology.ulysses_group_of(e.rank):
            mismatches.append((e.rank, e.phase, "a2a outside ulysses group", e.peer))
        if e.primitive == "p2p" and e.peer not in topology.ring_group_of(e.rank):
            mismatches.append((e.rank, e.phase, "p2p outside ring group", e.peer))
    return mismatches


@dataclass
class SimulationResult:
    output: np.ndarray  # (H, S, d_h) for replica 0
    replica_outputs: list
    ledger: object
    rank_outputs: list


def simulate_attention(problem, topology, mode="stepped", strategy="usp", skip_masked_blocks=False, timeout=10.0):
    """Run SP attention for ``problem`` on every rank and reassemble the output."""
    H, S, d = problem.shape
    ShardLayout.for_topology(topology, S, H, d)
    inputs = shard_problem(problem, topology)
    fns = {
        "usp": lambda ctx: usp_attention(ctx, inputs[ctx.rank], skip_masked_blocks),
        "ulysses": lambda ctx: ulysses_attention(ctx, inputs[ctx.rank]),
        "ring": lambda ctx: ring_attention(ctx, inputs[ctx.rank], skip_masked_blocks),
    }
    if strategy not in fns:
        raise ValueError(f"unknown strategy {strategy!r}")
    res = run(topology, fns[strategy], mode=mode, timeout=timeout)
    replicas = [gather_shards(res.results, topology, b) for b in range(topology.dp_replicas)]
    return SimulationResult(replicas[0], replicas, res.ledger, res.results)


# -- transformer block ------------------------------------------------------------


@dataclass
class BlockWeights:
    n_heads: int
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    eps: float = 1e-5

    @property
    def d_model(self):
        return self.wq.shape[0]

    @property
    def d_head(self):
        return self.d_model // self.n_heads


def init_block_weights(d_model, n_heads, d_ff, seed=0, dtype=np.float64):
    if d_model % n_heads:
        raise ShapeError("d_model must be divisible by n_heads")
    rng = np.random.default_rng(seed)

    def w(rows, cols):
        return (rng.standard_normal((rows, cols)) / math.sqrt(rows)).astype(dtype)

    return BlockWeights(
        n_heads=n_heads,
        ln1_gamma=(1.0 + 0.1 * rng.standard_normal(d_model)).astype(dtype),
        ln1_beta=(0.1 * rng.standard_normal(d_model)).astype(dtype),
        wq=w(d_model, d_model),
        wk=w(d_model, d_model),
        wv=w(d_model, d_model),
        wo=w(d_model, d_model),
        ln2_gamma=(1.0 + 0.1 * rng.standard_normal(d_model)).astype(dtype),
        ln2_beta=(0.1 * rng.standard_normal(d_model)).astype(dtype),
        w1=w(d_model, d_ff),
        b1=(0.1 * rng.standard_normal(d_ff)).astype(dtype),
        w2=w(d_ff, d_model),
        b2=(0.1 * rng.standard_normal(d_model)).astype(dtype),
    )


def _split_heads(x, n_heads):
    S, D = x.shape
    return x.reshape(S, n_heads, D // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    H, S, d = x.shape
    return x.transpose(1, 0, 2).reshape(S, H * d)


def _qkv(x, wts):
    return tuple(_split_heads(x @ w, wts.n_heads) for w in (wts.wq, wts.wk, wts.wv))


def transformer_block(hidden, wts, timeline=None, causal=True, pad_mask=None):
    """Single-rank pre-norm block: ``h + attn(ln(h))`` then ``+ mlp(ln(.))``."""
    from .attention import reference_attention

    x = layer_norm(hidden, wts.ln1_gamma, wts.ln1_beta, wts.eps)
    q, k, v = _qkv(x, wts)
    attn = reference_attention(AttentionProblem(q, k, v, timeline=timeline, causal=causal, pad_mask=pad_mask))
    h = hidden + _merge_heads(attn) @ wts.wo
    x = layer_norm(h, wts.ln2_gamma, wts.ln2_beta, wts.eps)
    return h + mlp2(x, wts.w1, wts.b1, wts.w2, wts.b2)


def sp_transformer_block(ctx, hidden_shard, wts, taus, pad_mask, causal, s_global):
    """Sequence-parallel version of :func:`transformer_block` on one rank's rows.

    Only the attention exchanges data; layer norms and the MLP run on local
    rows under the ``ln``/``ffn`` phases and move zero bytes.
    """
    start, _ = ShardLayout.for_topology(ctx.topology, s_global, wts.n_heads, wts.d_head).seq_shard(
        ctx.topology.sp_local_index(ctx.rank)
    )
    with ctx.local_phase(PHASE_LN):
        x = layer_norm(hidden_shard, wts.ln1_gamma, wts.ln1_beta, wts.eps)
    q, k, v = _qkv(x, wts)
    inp = SpInput(q, k, v, taus, pad_mask, causal, s_global, start)
    h = hidden_shard + _merge_heads(usp_attention(ctx, inp)) @ wts.wo
    with ctx.local_phase(PHASE_LN):
        x = layer_norm(h, wts.ln2_gamma, wts.ln2_beta, wts.eps)
    with ctx.local_phase(PHASE_FFN):
        return h + mlp2(x, wts.w1, wts.b1, wts.w2, wts.b2)


def simulate_block(hidden, wts, topology, timeline=None, causal=True, pad_mask=None, mode="stepped"):
    """Run :func:`sp_transformer_block` on every rank; returns ``(output, ledger)`` for replica 0."""
    S = hidden.shape[0]
    layout = ShardLayout.for_topology(topology, S, wts.n_heads, wts.d_head)
    pad_mask = np.ones(S, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    taus = None
    if timeline is not None:
        taus = timeline.taus if isinstance(timeline, TokenTimeline) else np.asarray(timeline, dtype=np.float64)

    def program(ctx):
        s, n = layout.seq_shard(topology.sp_local_index(ctx.rank))
        local_taus = None if taus is None else taus[s : s + n]
        return sp_transformer_block(ctx, hidden[s : s + n], wts, local_taus, pad_mask, causal, S)

    res = run(topology, program, mode=mode)
    return gather_shards(res.results, topology, 0, seq_axis=0), res.ledger
