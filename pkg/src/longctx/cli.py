"""Command-line interface.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
All randomness in one invocation comes from ``numpy.random.default_rng(seed)``
(PCG64 bit generator seeded with the 64-bit ``--seed``).
"""

import argparse
import json
import os
import sys

import numpy as np

from . import curriculum, frontend, packing, tdmp
from .attention import AttentionProblem, reference_attention
from .errors import LongCtxError
from .fabric import MODES, build_topology
from .kernels import resolve_dtype
from .sp_attention import ShardLayout, compare_ledger, expected_comm, simulate_attention
from .verify import load_config, random_timeline, run_verify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# -- verify -------------------------------------------------------------------------


def cmd_verify(args):
    if args.config is not None and not os.path.exists(args.config):
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    report = run_verify(cfg, args.suite or None)
    if args.json:
        _emit(report.to_dict())
    else:
        for c in report.checks:
            print(c.line())
        print(f"overall: {'PASS' if report.passed else 'FAIL'} ({report.elapsed_s:.2f}s)")
    if args.report:
        _emit(report.to_dict(), args.report)
    return EXIT_OK if report.passed else EXIT_FAIL


# -- simulate -------------------------------------------------------------------------


def simulate_report(n_gpu, pu, pr, seq, heads, dh, causal, seed=0, padding=0, precision="float64", mode="stepped", tolerance=None):
    topo = build_topology(n_gpu if n_gpu is not None else pu * pr, pu, pr)
    dtype = resolve_dtype(precision)
    ShardLayout.for_topology(topo, seq, heads, dh)
    if not 0 <= padding < seq:
        raise UsageError("--padding must be in [0, seq)")
    rng = np.random.default_rng(seed)
    q, k, v = rng.standard_normal((3, heads, seq, dh)).astype(dtype)
    pad = np.ones(seq, dtype=bool)
    if padding:
        pad[seq - padding :] = False
    prob = AttentionProblem(q, k, v, timeline=random_timeline(rng, seq), causal=causal, pad_mask=pad)
    ref = reference_attention(prob)
    sim = simulate_attention(prob, topo, mode=mode)
    err = max(float(np.max(np.abs(out.astype(np.float64) - ref))) for out in sim.replica_outputs)
    tol = tolerance if tolerance is not None else (1e-10 if dtype == np.float64 else 1e-3)
    mism = compare_ledger(sim.ledger, topo, seq, heads, dh, dtype.itemsize)
    per_rank = expected_comm(topo, seq, heads, dh, dtype.itemsize)
    report = {
        "topology": {"n_gpu": topo.n_gpu, "p_u": pu, "p_r": pr, "dp_replicas": topo.dp_replicas},
        "problem": {"seq": seq, "heads": heads, "dh": dh, "causal": causal, "padding": padding, "seed": seed, "precision": str(dtype)},
        "mode": mode,
        "max_abs_err": err,
        "tolerance": tol,
        "ledger": {
            "total_bytes": sim.ledger.total_sent(),
            "by_primitive": sim.ledger.by_primitive(),
            "by_phase": sim.ledger.by_phase(),
            "per_rank": {str(r): b for r, b in sorted(sim.ledger.sent_by_rank().items())},
        },
        "closed_form": {
            "per_rank_by_phase": per_rank,
            "total_bytes": sum(per_rank.values()) * topo.n_gpu,
        },
        "ledger_mismatches": [list(map(str, m)) for m in mism],
        "pass": err < tol and not mism,
    }
    return report, sim.ledger


def cmd_simulate(args):
    report, ledger = simulate_report(
        args.n_gpu, args.pu, args.pr, args.seq, args.heads, args.dh, args.causal,
        seed=args.seed, padding=args.padding, precision=args.precision, mode=args.mode, tolerance=args.tolerance,
    )
    if args.ledger_csv:
        ledger.to_csv(args.ledger_csv)
    _emit(report, args.out)
    return EXIT_OK if report["pass"] else EXIT_FAIL


# -- pack ---------------------------------------------------------------------------------


def cmd_pack(args):
    topo = build_topology(args.n_gpu, args.pu, args.pr)
    samples = packing.load_manifest(args.manifest, args.placeholder_id)
    if not samples:
        raise UsageError("manifest is empty")
    plan = packing.sp_aware_indices(len(samples), topo, seed=args.seed, shuffle=not args.no_shuffle)
    pad_multiple = topo.sp_size if topo.sp_size > 1 else 1
    os.makedirs(args.out, exist_ok=True)
    steps = {}
    truncations = 0
    for rank in range(topo.n_gpu):
        batches = packing.rank_batches(
            samples, plan, rank, args.batch_size, args.max_ctx, pad_multiple, args.pad_id, args.ignore_index
        )
        for step, b in enumerate(batches):
            stem = os.path.join(args.out, f"rank{rank}_step{step}")
            tdmp.save(stem + "_ids.tdmp", b.token_ids)
            tdmp.save(stem + "_mask.tdmp", b.attention_mask)
            tdmp.save(stem + "_labels.tdmp", b.labels)
            tdmp.save(stem + "_taus.tdmp", np.stack([t.taus for t in b.timelines]))
            if rank % topo.sp_size == 0:
                truncations += b.truncated
            steps.setdefault(step, b.T)
    summary = {
        "n_samples": len(samples),
        "n_gpu": topo.n_gpu,
        "p_u": topo.p_u,
        "p_r": topo.p_r,
        "dp_replicas": topo.dp_replicas,
        "max_ctx": args.max_ctx,
        "pad_multiple": pad_multiple,
        "seed": args.seed,
        "T": [steps[s] for s in sorted(steps)],
        "truncations": truncations,
        "dropped_tail": plan.dropped_tail,
        "rank_indices": {str(r): lst for r, lst in enumerate(plan.per_rank)},
    }
    _emit(summary, os.path.join(args.out, "summary.json"))
    _emit(summary)
    return EXIT_OK


# -- blend ----------------------------------------------------------------------------------


def cmd_blend(args):
    blends = curriculum.load_blends(args.spec)
    cfg = curriculum.stage_config(args.stage)
    if args.derive_stage2:
        blends = curriculum.derive_stage2_blend(blends)
    sched = curriculum.epoch_schedule(blends, seed=args.seed)
    with open(args.out, "w") as fh:
        for name, idx in sched:
            fh.write(json.dumps({"dataset": name, "index": idx}) + "\n")
    summary = {
        "stage": cfg.stage,
        "max_audio_s": cfg.max_audio_s,
        "max_ctx": cfg.max_ctx,
        "seed": args.seed,
        "derived_stage2": args.derive_stage2,
        "betas": {b.name: b.beta for b in blends},
        "counts": curriculum.schedule_counts(sched),
        "total": len(sched),
        "schedule": args.out,
    }
    _emit(summary)
    return EXIT_OK


# -- mel ------------------------------------------------------------------------------------------


def read_wav(path):
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise UsageError("only mono WAV files are supported")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        data = data.astype(np.float64)
    else:
        raise UsageError(f"unsupported WAV sample format {data.dtype} (need PCM16 or float32)")
    return frontend.AudioClip(data, rate)


def cmd_mel(args):
    clip = read_wav(args.wav)
    mels, feats, tokens, taus = [], [], [], []
    projection = frontend.stub_projection(args.dim, args.seed)
    for i, chunk in enumerate(frontend.chunk_samples(clip.samples)):
        mel = frontend.log_mel(frontend.AudioClip(chunk))
        f = frontend.encode_stub(mel, args.dim, projection=projection)
        pooled = frontend.pool_stride2(f)
        mels.append(mel.values)
        feats.append(f.values)
        tokens.append(pooled.values)
        taus.append(pooled.timestamps.taus + i * frontend.CHUNK_SECONDS)
    os.makedirs(args.out, exist_ok=True)
    mel = np.concatenate(mels, axis=1)
    tdmp.save(os.path.join(args.out, "mel.tdmp"), mel)
    tdmp.save(os.path.join(args.out, "features.tdmp"), np.concatenate(feats))
    tdmp.save(os.path.join(args.out, "tokens.tdmp"), np.concatenate(tokens))
    tdmp.save(os.path.join(args.out, "token_taus.tdmp"), np.concatenate(taus))
    _emit(
        {
            "duration_s": clip.duration_s,
            "chunks": frontend.chunk_audio(clip.duration_s),
            "mel_shape": list(mel.shape),
            "features_shape": [sum(f.shape[0] for f in feats), args.dim],
            "feature_rate_hz": frontend.ENCODER_RATE,
            "tokens": sum(t.shape[0] for t in tokens),
            "token_rate_hz": frontend.TOKEN_RATE,
            "audio_token_count": frontend.audio_token_count(clip.duration_s),
        }
    )
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="longctx", description="Long-context audio training machinery: simulate, verify, pack, blend, mel.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run every invariant suite; exit 0 iff all pass")
    p.add_argument("--config", help="JSON config overriding the defaults (seed, topologies, sizes, precision, tolerances)")
    p.add_argument("--suite", action="append", choices=["sp", "block", "rote", "merge", "tokens", "packing", "curriculum"], help="restrict to a suite (repeatable)")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.add_argument("--report", help="also write the JSON report to this path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="run USP attention on a simulated fabric and audit the ledger")
    p.add_argument("--n-gpu", type=int, default=None, help="total ranks (default p_u * p_r)")
    p.add_argument("--pu", type=int, default=1, help="Ulysses degree")
    p.add_argument("--pr", type=int, default=1, help="Ring degree")
    p.add_argument("--seq", type=int, default=32, help="global sequence length (multiple of p_u * p_r)")
    p.add_argument("--heads", type=int, default=8, help="attention heads (multiple of p_u)")
    p.add_argument("--dh", type=int, default=4, help="head dimension (even)")
    p.add_argument("--causal", action="store_true", help="causal masking")
    p.add_argument("--padding", type=int, default=0, help="number of trailing padding positions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", default="float64", choices=["float64", "float32"])
    p.add_argument("--mode", default="stepped", choices=list(MODES), help="fabric execution mode")
    p.add_argument("--tolerance", type=float, default=None, help="max-abs error bound (default 1e-10 / 1e-3)")
    p.add_argument("--ledger-csv", help="write the communication ledger as CSV")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pack", help="plan SP-aware indices and write per-rank padded batches")
    p.add_argument("--manifest", required=True, help="JSONL manifest: {id, text_tokens, audio:[{duration_s}], labels}")
    p.add_argument("--n-gpu", type=int, required=True)
    p.add_argument("--pu", type=int, default=1)
    p.add_argument("--pr", type=int, default=1)
    p.add_argument("--max-ctx", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--no-shuffle", action="store_true", help="keep manifest order before partitioning")
    p.add_argument("--placeholder-id", type=int, default=packing.PLACEHOLDER_ID, help="token id marking an audio clip")
    p.add_argument("--pad-id", type=int, default=packing.PAD_ID)
    p.add_argument("--ignore-index", type=int, default=packing.IGNORE_INDEX)
    p.add_argument("--out", default="pack_out", help="output directory")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("blend", help="build one epoch's blend-weighted sample schedule")
    p.add_argument("--spec", required=True, help='JSON list of {"name","size","beta","long_audio"}')
    p.add_argument("--stage", default="mid1", help="pre1 | pre2 | mid1 | mid2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--derive-stage2", action="store_true", help="halve ordinary weights and set long-audio weights to 1")
    p.add_argument("--out", default="schedule.jsonl", help="schedule JSONL path")
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("mel", help="16 kHz mono WAV -> log-mel, stub features and pooled tokens (TDMP)")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", default="mel_out", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="seed of the stub encoder projection")
    p.add_argument("--dim", type=int, default=frontend.ENCODER_DIM)
    p.set_defaults(func=cmd_mel)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "batch_size", 1) < 1:
        parser.error("--batch-size must be positive")
    try:
        return args.func(args)
    except (UsageError, LongCtxError, OSError, ValueError) as exc:
        print(f"longctx {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
