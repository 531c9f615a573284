"""Acceptance gate: one test per criterion, each reporting a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import time
from fractions import Fraction

import numpy as np

from longctx import frontend as fe
from longctx.attention import AttentionProblem, block_stats, finalize, merge_stats, reference_attention, visibility_mask
from longctx.cli import main as cli_main
from longctx.curriculum import BlendSpec, derive_stage2_blend, epoch_schedule, stage_config, validate_sample_for_stage
from longctx.fabric import build_topology
from longctx.packing import IGNORE_INDEX, PLACEHOLDER_ID, RawSample, collate, sp_aware_indices
from longctx.rote import RoteConfig, rotate
from longctx.sp_attention import init_block_weights, simulate_attention, simulate_block
from longctx.verify import load_config, run_verify

TOPOLOGIES = [(1, 1), (2, 1), (1, 2), (2, 2), (4, 1), (1, 4), (2, 4), (4, 2)]

RESULTS = []


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    return passed


def random_instance(rng, pu, pr, causal, padded):
    P = pu * pr
    H = int(rng.choice([4, 8, 16]))
    d = int(rng.choice([4, 8]))
    S = P * int(rng.integers(1, 64 // P + 1))
    q, k, v = rng.standard_normal((3, H, S, d))
    pad = np.ones(S, dtype=bool)
    if padded and S > 1:
        pad[S - int(rng.integers(1, S)) :] = False
    taus = np.cumsum(rng.choice([0.0, 0.04, 0.5], size=S)) + rng.uniform(0, 100)
    return AttentionProblem(q, k, v, timeline=taus, causal=causal, pad_mask=pad)


def test_criterion_1_usp_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for pu, pr in TOPOLOGIES:
        topo = build_topology(pu * pr, pu, pr)
        for causal in (False, True):
            for padded in (False, True):
                for _ in range(2):
                    prob = random_instance(rng, pu, pr, causal, padded)
                    out = simulate_attention(prob, topo).output
                    worst = max(worst, float(np.max(np.abs(out - reference_attention(prob)))))
                    count += 1
    elapsed = time.perf_counter() - t0
    ok = count >= 50 and worst < 1e-10 and elapsed < 60
    assert report(1, "USP equivalence", ok, f"{count} instances, max abs err {worst:.2e} < 1e-10, {elapsed:.2f}s < 60s")


def closed_form(pu, pr, S, H, d, elem):
    s_grp = Fraction(S, pr)
    qkv = 3 * (s_grp / pu) * H * d * Fraction(pu - 1, pu) * elem
    ring = (pr - 1) * 2 * s_grp * Fraction(H, pu) * d * elem
    return qkv, qkv / 3, ring


def test_criterion_2_ledger_closed_forms():
    bad = []
    S, H, d, elem = 32, 8, 4, 8
    rng = np.random.default_rng(7)
    for pu, pr in TOPOLOGIES:
        topo = build_topology(pu * pr, pu, pr)
        prob = AttentionProblem(*rng.standard_normal((3, H, S, d)), timeline=np.arange(S) * 0.04, causal=True)
        ledger = simulate_attention(prob, topo).ledger
        qkv, out, ring = closed_form(pu, pr, S, H, d, elem)
        for rank in range(topo.n_gpu):
            got = (
                ledger.total(rank=rank, phase="qkv_a2a"),
                ledger.total(rank=rank, phase="out_a2a"),
                ledger.total(rank=rank, phase=lambda ph: ph.startswith("ring_step_")),
            )
            if got != (qkv, out, ring):
                bad.append(((pu, pr), rank, got, (qkv, out, ring)))
        wts = init_block_weights(H * d, H, 64, seed=1)
        _, block_ledger = simulate_block(rng.standard_normal((S, H * d)), wts, topo, np.arange(S) * 0.04)
        phases = block_ledger.by_phase()
        if phases.get("ffn") != 0 or phases.get("ln") != 0:
            bad.append(((pu, pr), "ffn/ln", phases))
    assert report(2, "ledger closed forms", not bad, f"{len(TOPOLOGIES)} topologies, {len(bad)} mismatches")


def test_criterion_3_rote():
    rng = np.random.default_rng(3)
    cfg = RoteConfig(8)
    x = rng.standard_normal((32, 8))
    identity = float(np.max(np.abs(rotate(x, np.zeros(32), cfg) - x)))
    q, k = rng.standard_normal((16, 8)), rng.standard_normal((16, 8))
    taus = np.sort(rng.uniform(0, 60, 16))
    base = rotate(q, taus, cfg) @ rotate(k, taus, cfg).T
    shift = 0.0
    for delta in (0.04, 1.0, 100.0, 1000.0):
        moved = rotate(q, taus + delta, cfg) @ rotate(k, taus + delta, cfg).T
        shift = max(shift, float(np.max(np.abs(moved - base) / np.abs(base))))
    relative = 0.0
    for _ in range(1000):
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        tk = rng.uniform(0, 1000)
        tq = tk + rng.uniform(0, 1000)
        lhs = rotate(a, [tq], cfg) @ rotate(b, [tk], cfg)
        rhs = rotate(a, tq - tk, cfg) @ b
        relative = max(relative, abs(lhs - rhs))
    ok = identity == 0.0 and shift < 1e-6 and relative < 1e-9
    detail = f"identity err {identity:.1e}, shift rel err {shift:.2e} < 1e-6, relative err {relative:.2e} < 1e-9 over 1000 pairs"
    assert report(3, "RoTE", ok, detail)


def test_criterion_4_online_softmax():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        H, S, d = int(rng.integers(1, 4)), int(rng.integers(1, 33)), int(rng.choice([4, 8]))
        causal = bool(rng.integers(2))
        q, k, v = rng.standard_normal((3, H, S, d))
        ref = reference_attention(AttentionProblem(q, k, v, causal=causal))
        n_cuts = int(rng.integers(0, S))
        cuts = sorted(rng.choice(np.arange(1, S), size=n_cuts, replace=False).tolist()) if S > 1 else []
        pos = np.arange(S)
        parts = [
            block_stats(q, k[:, a:b], v[:, a:b], visibility_mask(pos, pos[a:b], causal))
            for a, b in zip([0] + cuts, cuts + [S])
        ]
        while len(parts) > 1:
            a = parts.pop(int(rng.integers(len(parts))))
            b = parts.pop(int(rng.integers(len(parts))))
            parts.append(merge_stats(a, b) if rng.random() < 0.5 else merge_stats(b, a))
        worst = max(worst, float(np.max(np.abs(finalize(parts[0]) - ref))))
    assert report(4, "online-softmax algebra", worst < 1e-12, f"200 problems, max abs err {worst:.2e} < 1e-12")


def test_criterion_5_token_arithmetic():
    clip = fe.AudioClip(0.1 * np.random.default_rng(5).standard_normal(30 * 16000))
    mel = fe.log_mel(clip)
    feats = fe.encode_stub(mel, dim=64)
    tokens = fe.pool_stride2(feats)
    stride = float(np.diff(tokens.timestamps.taus).max())
    long_clip = RawSample([PLACEHOLDER_ID], durations=[1800.0])
    mid1 = validate_sample_for_stage(long_clip, stage_config("mid1"))
    chain = (mel.n_frames, feats.n_tokens, feats.feature_rate, tokens.n_tokens, fe.audio_token_count(1800.0))
    ok = (
        chain == (3000, 1500, 50, 750, 45000)
        and abs(stride - 0.04) < 1e-12
        and bool(validate_sample_for_stage(long_clip, stage_config("mid2")))
        and not mid1
        and any("context cap 24576" in r for r in mid1.reasons)
    )
    detail = f"30s -> {chain[0]} frames -> {chain[1]} @{chain[2]}Hz -> {chain[3]} @{stride * 1000:.0f}ms; 30min -> {chain[4]}"
    assert report(5, "token arithmetic", ok, detail)


def test_criterion_6_packing():
    failures = []
    shapes = [(n, pu, pr) for pu, pr in TOPOLOGIES for n in (pu * pr, 2 * pu * pr, 4 * pu * pr)]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for n_gpu, pu, pr in shapes:
            topo = build_topology(n_gpu, pu, pr)
            n = int(rng.integers(topo.dp_replicas, 60))
            plan = sp_aware_indices(n, topo, seed=seed)
            for group in topo.sp_groups:
                if any(plan.per_rank[r] != plan.per_rank[group[0]] for r in group):
                    failures.append((seed, n_gpu, pu, pr, "sp group"))
            lists = [plan.per_rank[g[0]] for g in topo.sp_groups]
            flat = [i for lst in lists for i in lst]
            missing = set(range(n)) - set(flat)
            if len(flat) != len(set(flat)) or len(missing) >= topo.dp_replicas or missing != set(plan.dropped_tail):
                failures.append((seed, n_gpu, pu, pr, "coverage"))
        lengths = rng.integers(1, 80, size=int(rng.integers(1, 6))).tolist()
        max_ctx = int(rng.integers(8, 64))
        mult = int(rng.choice([1, 2, 4, 8]))
        b = collate([[7] * n for n in lengths], max_ctx=max_ctx, pad_multiple=mult)
        want = math.ceil(min(max(lengths), max_ctx) / mult) * mult
        if want > max_ctx:
            want = max_ctx // mult * mult
        if b.T != want or b.T > max_ctx or b.T % mult:
            failures.append((seed, "length law", b.T, want))
        if not np.array_equal(b.attention_mask == 0, b.labels == IGNORE_INDEX):
            failures.append((seed, "mask duality"))
    detail = f"100 seeds x {len(shapes)} topologies, {len(failures)} violations"
    assert report(6, "packing invariants", not failures, detail)


def test_criterion_7_curriculum():
    sched = epoch_schedule([BlendSpec("ds43k", 43000, 2.0)], seed=0)
    stage2 = derive_stage2_blend([BlendSpec("a", 100, 1.0), BlendSpec("b", 100, 0.3), BlendSpec("c", 100, 2.0, True)])
    caps = {s: (stage_config(s).max_ctx, stage_config(s).max_audio_s) for s in ("pre1", "pre2", "mid1", "mid2")}
    want_caps = {"pre1": (8192, 30), "pre2": (8192, 60), "mid1": (24576, 600), "mid2": (131072, 1800)}
    ok = len(sched) == 86000 and [b.beta for b in stage2] == [0.5, 0.15, 1.0] and caps == want_caps
    assert report(7, "curriculum", ok, f"{len(sched)} entries, stage-2 betas {[b.beta for b in stage2]}, caps {caps == want_caps}")


def test_criterion_8_determinism():
    cfg = load_config()
    both = run_verify(dict(cfg))
    stepped = run_verify(dict(cfg, modes=["stepped"]))
    threads = run_verify(dict(cfg, modes=["threads"]))
    same = [(a.name, a.metric, a.passed) for a in stepped.checks] == [(b.name, b.metric, b.passed) for b in threads.checks]
    mode_checks = {c.name: c.passed for c in both.checks if "determinism" in c.name}
    exit_code = cli_main(["verify"])
    ok = same and all(mode_checks.values()) and len(mode_checks) == 2 and both.passed and exit_code == 0
    detail = f"mode checks {mode_checks}, per-mode reports identical={same}, cmd_verify exit {exit_code}"
    assert report(8, "determinism", ok, detail)


if __name__ == "__main__":
    import sys

    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
