"""Self-verification suites behind ``longctx verify``.

Each suite returns :class:`Check` records (name, pass flag, metric,
tolerance). The default configuration reproduces the acceptance bar:
USP-vs-reference equivalence, exact ledger closed forms, rotary-time
invariants, online-softmax algebra, token arithmetic, packing and blend
invariants, and bitwise agreement of the two fabric execution modes.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import curriculum, frontend, packing
from .attention import AttentionProblem, block_stats, finalize, merge_stats, reference_attention, visibility_mask
from .errors import ConfigError
from .fabric import MODES, build_topology
from .kernels import resolve_dtype
from .rote import RoteConfig, TokenTimeline, rotate
from .sp_attention import (
    PHASE_FFN,
    PHASE_LN,
    compare_ledger,
    init_block_weights,
    simulate_attention,
    simulate_block,
    transformer_block,
)

TOPOLOGIES = ((1, 1), (2, 1), (1, 2), (2, 2), (4, 1), (1, 4), (2, 4), (4, 2))

DEFAULT_CONFIG = {
    "seed": 0,
    "topologies": [list(t) for t in TOPOLOGIES],
    "instances": 56,
    "max_seq": 64,
    "heads": [4, 8, 16],
    "dh": [4, 8],
    "precision": "float64",
    "tolerance": None,  # None -> 1e-10 (float64) / 1e-3 (float32)
    "merge_problems": 200,
    "merge_tolerance": 1e-12,
    "rote_pairs": 1000,
    "rote_tolerance": 1e-9,
    "shift_deltas": [0.04, 1.0, 100.0, 1000.0],
    "shift_tolerance": 1e-6,
    "packing_seeds": 100,
    "modes": list(MODES),
}

_DEFAULT_TOL = {"float64": 1e-10, "float32": 1e-3}


@dataclass
class Check:
    name: str
    passed: bool
    metric: float
    tolerance: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: metric={self.metric:.3g} tol={self.tolerance:.3g} {self.detail}".rstrip()


@dataclass
class VerifyReport:
    checks: list = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {
            "passed": self.passed,
            "elapsed_s": round(self.elapsed_s, 3),
            "checks": [asdict(c) for c in self.checks],
        }


def load_config(path=None):
    """Merge a JSON config file over :data:`DEFAULT_CONFIG`."""
    cfg = dict(DEFAULT_CONFIG)
    if path is None:
        return _normalise(cfg)
    try:
        with open(path) as fh:
            user = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(user) - set(DEFAULT_CONFIG) - {"seeds"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seeds" in user:
        seeds = user.pop("seeds")
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("'seeds' must be a non-empty list")
        user.setdefault("seed", seeds[0])
    cfg.update(user)
    return _normalise(cfg)


def _normalise(cfg):
    try:
        resolve_dtype(cfg["precision"])
        cfg["topologies"] = [tuple(int(x) for x in t) for t in cfg["topologies"]]
        for pu, pr in cfg["topologies"]:
            build_topology(pu * pr, pu, pr)
        if cfg["tolerance"] is None:
            cfg["tolerance"] = _DEFAULT_TOL[str(resolve_dtype(cfg["precision"]))]
        cfg["tolerance"] = float(cfg["tolerance"])
        for m in cfg["modes"]:
            if m not in MODES:
                raise ConfigError(f"unknown fabric mode {m!r}")
        if int(cfg["instances"]) < 1 or int(cfg["max_seq"]) < 1:
            raise ConfigError("instances and max_seq must be positive")
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


# -- problem generators ----------------------------------------------------------


def random_timeline(rng, n):
    """Non-decreasing timestamps: a 40 ms audio run, a text run, or jittered gaps."""
    kind = rng.integers(3)
    if kind == 0:
        return TokenTimeline(rng.uniform(0, 100) + np.arange(n) * 0.04)
    if kind == 1:
        return TokenTimeline(np.cumsum(rng.choice([0.0, 0.04, 0.5], size=n)))
    return TokenTimeline(np.cumsum(rng.exponential(0.3, size=n)))


def random_pad_mask(rng, n):
    mask = np.ones(n, dtype=bool)
    style = rng.integers(3)
    if style == 1:
        mask[n - rng.integers(0, n) :] = False
    elif style == 2:
        mask = rng.random(n) < 0.7
    if not mask.any():
        mask[rng.integers(n)] = True
    return mask


def random_problem(rng, sp_size, max_seq=64, heads=(4, 8, 16), dh=(4, 8), padded=None, causal=None, dtype=np.float64):
    H = int(rng.choice(heads))
    d = int(rng.choice(dh))
    S = sp_size * int(rng.integers(1, max(1, max_seq // sp_size) + 1))
    q, k, v = rng.standard_normal((3, H, S, d))
    if causal is None:
        causal = bool(rng.integers(2))
    if padded is None:
        padded = bool(rng.integers(2))
    pad = random_pad_mask(rng, S) if padded else np.ones(S, dtype=bool)
    return AttentionProblem(
        q.astype(dtype), k.astype(dtype), v.astype(dtype), timeline=random_timeline(rng, S), causal=causal, pad_mask=pad
    )


def _instances(cfg):
    rng = np.random.default_rng(cfg["seed"])
    dtype = resolve_dtype(cfg["precision"])
    topos = cfg["topologies"]
    n = int(cfg["instances"])
    for i in range(n):
        pu, pr = topos[i % len(topos)]
        # cover each (causal, padded) corner on every topology
        corner = (i // len(topos)) % 4
        yield (pu, pr), random_problem(
            rng,
            pu * pr,
            cfg["max_seq"],
            cfg["heads"],
            cfg["dh"],
            padded=bool(corner & 1),
            causal=bool(corner & 2),
            dtype=dtype,
        )


# -- suites -----------------------------------------------------------------------


def suite_sp(cfg):
    """Equivalence, ledger closed forms and mode determinism for USP attention."""
    dtype = resolve_dtype(cfg["precision"])
    elem = dtype.itemsize
    max_err, ledger_bad, mode_bad, count = 0.0, [], [], 0
    t0 = time.perf_counter()
    for (pu, pr), prob in _instances(cfg):
        topo = build_topology(pu * pr, pu, pr)
        ref = reference_attention(prob)
        runs = {m: simulate_attention(prob, topo, mode=m) for m in cfg["modes"]}
        first = runs[cfg["modes"][0]]
        max_err = max(max_err, float(np.max(np.abs(first.output.astype(np.float64) - ref))))
        H, S, d = prob.shape
        mism = compare_ledger(first.ledger, topo, S, H, d, elem)
        if mism:
            ledger_bad.append(((pu, pr), mism[:3]))
        for m, r in runs.items():
            if not (np.array_equal(r.output, first.output) and r.ledger == first.ledger):
                mode_bad.append(((pu, pr), m))
        count += 1
    elapsed = time.perf_counter() - t0
    tol = cfg["tolerance"]
    return [
        Check(
            "usp_equivalence",
            max_err < tol,
            max_err,
            tol,
            f"{count} instances over {len(cfg['topologies'])} topologies in {elapsed:.2f}s",
        ),
        Check("ledger_closed_form", not ledger_bad, float(len(ledger_bad)), 0.0, str(ledger_bad[:2]) if ledger_bad else ""),
        Check(
            "fabric_mode_determinism",
            not mode_bad,
            float(len(mode_bad)),
            0.0,
            f"modes={cfg['modes']}" + (f" mismatches={mode_bad[:3]}" if mode_bad else ""),
        ),
    ]


def suite_block(cfg):
    """Sequence-parallel transformer block vs single-rank block; LN/FFN move no bytes."""
    rng = np.random.default_rng(cfg["seed"] + 1)
    dtype = resolve_dtype(cfg["precision"])
    tol = 1e-9 if dtype == np.float64 else 1e-3
    worst, local_bytes, bad_ledgers, mode_bad = 0.0, 0, 0, 0
    for pu, pr in cfg["topologies"]:
        topo = build_topology(pu * pr, pu, pr)
        H, d_h = 8, 4
        S = topo.sp_size * 4
        wts = init_block_weights(H * d_h, H, 64, seed=int(rng.integers(2**31)), dtype=dtype)
        hidden = rng.standard_normal((S, H * d_h)).astype(dtype)
        tl = random_timeline(rng, S)
        ref = transformer_block(hidden, wts, tl, causal=True)
        runs = [simulate_block(hidden, wts, topo, tl, causal=True, mode=m) for m in cfg["modes"]]
        out, ledger = runs[0]
        mode_bad += sum(not (np.array_equal(o, out) and lg == ledger) for o, lg in runs[1:])
        worst = max(worst, float(np.max(np.abs(out - ref))))
        local_bytes += ledger.total(phase=PHASE_FFN) + ledger.total(phase=PHASE_LN)
        if compare_ledger(ledger, topo, S, H, d_h, dtype.itemsize, extra_zero_phases=(PHASE_LN, PHASE_FFN)):
            bad_ledgers += 1
    return [
        Check("sp_block_equivalence", worst < tol, worst, tol),
        Check("ffn_ln_zero_bytes", local_bytes == 0 and bad_ledgers == 0, float(local_bytes), 0.0),
        Check("block_mode_determinism", mode_bad == 0, float(mode_bad), 0.0, f"modes={cfg['modes']}"),
    ]


def suite_rote(cfg):
    rng = np.random.default_rng(cfg["seed"] + 2)
    checks = []
    cfg8 = RoteConfig(8)
    x = rng.standard_normal((16, 8))
    ident = float(np.max(np.abs(rotate(x, np.zeros(16), cfg8) - x)))
    checks.append(Check("rote_identity_at_zero", ident == 0.0, ident, 0.0))

    worst = 0.0
    for _ in range(20):
        S, d = int(rng.integers(2, 33)), int(rng.choice([4, 8, 16]))
        rc = RoteConfig(d)
        q, k = rng.standard_normal((2, S, d))
        taus = np.sort(rng.uniform(0, 30, S))
        base = rotate(q, taus, rc) @ rotate(k, taus, rc).T
        scale = np.max(np.abs(base))
        for delta in cfg["shift_deltas"]:
            moved = rotate(q, taus + delta, rc) @ rotate(k, taus + delta, rc).T
            worst = max(worst, float(np.max(np.abs(moved - base)) / scale))
    tol = cfg["shift_tolerance"]
    checks.append(Check("rote_shift_invariance", worst < tol, worst, tol, f"deltas={cfg['shift_deltas']}"))

    worst = 0.0
    for _ in range(int(cfg["rote_pairs"])):
        d = int(rng.choice([4, 8, 16, 64]))
        rc = RoteConfig(d)
        q, k = rng.standard_normal((2, d))
        t_k = rng.uniform(0, 1800)
        t_q = t_k + rng.uniform(0, 1800)
        lhs = rotate(q, t_q, rc) @ rotate(k, t_k, rc)
        rhs = rotate(q, t_q - t_k, rc) @ k
        worst = max(worst, abs(float(lhs - rhs)))
    tol = cfg["rote_tolerance"]
    checks.append(Check("rote_relative_rotation", worst < tol, worst, tol, f"{cfg['rote_pairs']} pairs"))
    return checks


def _random_merge(parts, rng):
    parts = [parts[i] for i in rng.permutation(len(parts))]
    while len(parts) > 1:
        i = int(rng.integers(len(parts) - 1))
        a, b = parts[i], parts[i + 1]
        merged = merge_stats(a, b) if rng.integers(2) else merge_stats(b, a)
        parts[i : i + 2] = [merged]
    return parts[0]


def suite_merge(cfg):
    rng = np.random.default_rng(cfg["seed"] + 3)
    worst = 0.0
    for _ in range(int(cfg["merge_problems"])):
        prob = random_problem(rng, 1, cfg["max_seq"], cfg["heads"], cfg["dh"])
        ref = reference_attention(prob)
        q, k = prob.rotated_qk()
        H, S, d = prob.shape
        pos = np.arange(S)
        n_cuts = int(rng.integers(0, min(S, 8)))
        cuts = np.sort(rng.choice(np.arange(1, S), size=n_cuts, replace=False)) if S > 1 and n_cuts else []
        bounds = [0, *map(int, cuts), S]
        parts = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            mask = visibility_mask(pos, pos[a:b], prob.causal, prob.pad_mask[a:b])
            parts.append(block_stats(q, k[:, a:b], prob.v[:, a:b], mask))
        out = finalize(_random_merge(parts, rng), row_valid=prob.pad_mask)
        worst = max(worst, float(np.max(np.abs(out - ref))))
    tol = cfg["merge_tolerance"]
    return [Check("online_softmax_merge", worst < tol, worst, tol, f"{cfg['merge_problems']} problems")]


def suite_tokens(cfg):
    rng = np.random.default_rng(cfg["seed"] + 4)
    clip = frontend.AudioClip(0.1 * rng.standard_normal(30 * frontend.SAMPLE_RATE))
    mel = frontend.log_mel(clip)
    feats = frontend.encode_stub(mel, seed=cfg["seed"])
    tokens = frontend.pool_stride2(feats)
    expected_taus = np.arange(750) * 0.04
    long_sample = packing.RawSample([packing.PLACEHOLDER_ID], [1800.0])
    facts = {
        "frames_30s": (frontend.frame_count(480000), 3000),
        "mel_shape": (mel.values.shape, (128, 3000)),
        "features_50hz": ((feats.n_tokens, feats.dim, feats.feature_rate), (1500, 1280, 50)),
        "tokens_25hz": ((tokens.n_tokens, tokens.feature_rate), (750, 25)),
        "tokens_30min": (frontend.audio_token_count(1800), 45000),
        "mid2_accepts_30min": (bool(curriculum.validate_sample_for_stage(long_sample, curriculum.stage_config("mid2"))), True),
        "mid1_rejects_30min": (bool(curriculum.validate_sample_for_stage(long_sample, curriculum.stage_config("mid1"))), False),
    }
    bad = [k for k, (got, want) in facts.items() if got != want]
    tau_err = float(np.max(np.abs(tokens.timestamps.taus - expected_taus)))
    ok = not bad and tau_err < 1e-9
    return [Check("token_arithmetic", ok, float(len(bad)), 0.0, f"failed={bad} tau_err={tau_err:.1e}" if not ok else "30s->3000->1500->750; 30min->45000")]


def suite_packing(cfg):
    rng = np.random.default_rng(cfg["seed"] + 5)
    problems = []
    for seed in range(int(cfg["packing_seeds"])):
        for pu, pr in cfg["topologies"]:
            P = pu * pr
            topo = build_topology(P * int(rng.integers(1, 5)), pu, pr)
            n = int(rng.integers(topo.dp_replicas, 200))
            plan = packing.sp_aware_indices(n, topo, seed=seed, shuffle=bool(seed % 2))
            for group in topo.sp_groups:
                if any(plan.per_rank[r] != plan.per_rank[group[0]] for r in group):
                    problems.append(("sp_group_mismatch", seed, (pu, pr)))
            reps = plan.replica_lists(topo)
            flat = [i for lst in reps for i in lst]
            if len(set(flat)) != len(flat):
                problems.append(("replicas_overlap", seed, (pu, pr)))
            if sorted(flat + plan.dropped_tail) != list(range(n)) or len(plan.dropped_tail) >= topo.dp_replicas:
                problems.append(("coverage", seed, (pu, pr)))
            if len({len(x) for x in reps}) != 1:
                problems.append(("unequal_lengths", seed, (pu, pr)))

        lengths = rng.integers(1, 40, size=int(rng.integers(1, 6)))
        max_ctx = int(rng.integers(4, 48))
        mult = int(rng.choice([1, 2, 4, 8]))
        if max_ctx < mult:
            max_ctx = mult
        batch = packing.collate([rng.integers(1, 1000, size=int(L)) for L in lengths], max_ctx, mult)
        T = batch.T
        if T > max_ctx or T % mult:
            problems.append(("length_law", seed, T))
        if T != packing.padded_length(int(lengths.max()), max_ctx, mult):
            problems.append(("length_rule", seed, T))
        pad = batch.attention_mask == 0
        if np.any(batch.labels[pad] != packing.IGNORE_INDEX):
            problems.append(("mask_label_duality", seed, T))
        for row, L in enumerate(batch.lengths):
            if not np.all(batch.attention_mask[row, :L] == 1) or np.any(batch.attention_mask[row, L:]):
                problems.append(("mask_real_tokens", seed, row))
    return [Check("packing_invariants", not problems, float(len(problems)), 0.0, str(problems[:3]) if problems else "")]


def suite_curriculum(cfg):
    issues = []
    doubled = curriculum.BlendSpec("ds43k", 43000, 2.0)
    sched = curriculum.epoch_schedule([doubled], seed=cfg["seed"])
    if len(sched) != 86000:
        issues.append(f"schedule length {len(sched)}")
    mixed = [
        curriculum.BlendSpec("short", 1000, 1.0),
        curriculum.BlendSpec("zero", 10, 0.0),
        curriculum.BlendSpec("long", 500, 2.0, is_long_audio=True),
    ]
    derived = curriculum.derive_stage2_blend(mixed)
    if [b.beta for b in derived] != [0.5, 0.0, 1.0]:
        issues.append(f"stage2 betas {[b.beta for b in derived]}")
    caps = {s: (c.max_audio_s, c.max_ctx) for s, c in curriculum.STAGES.items()}
    want = {"pre1": (30.0, 8192), "pre2": (60.0, 8192), "mid1": (600.0, 24576), "mid2": (1800.0, 131072)}
    if caps != want:
        issues.append(f"stage caps {caps}")
    s2 = curriculum.epoch_schedule(derived, seed=cfg["seed"])
    if curriculum.schedule_counts(s2) != {"short": 500, "long": 500}:
        issues.append("stage2 schedule counts")
    return [Check("curriculum", not issues, float(len(issues)), 0.0, "; ".join(issues))]


SUITES = {
    "sp": suite_sp,
    "block": suite_block,
    "rote": suite_rote,
    "merge": suite_merge,
    "tokens": suite_tokens,
    "packing": suite_packing,
    "curriculum": suite_curriculum,
}


def run_verify(cfg=None, suites=None):
    cfg = cfg or load_config()
    report = VerifyReport()
    t0 = time.perf_counter()
    for name in suites or SUITES:
        report.checks.extend(SUITES[name](cfg))
    report.elapsed_s = time.perf_counter() - t0
    for c in report.checks:
        if not math.isfinite(c.metric):
            c.passed = False
    return report
