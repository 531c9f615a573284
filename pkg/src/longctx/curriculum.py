"""Blend-weight epoch scheduling and per-stage caps."""

import json
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import ConfigError, EmptyEpochError
from .frontend import audio_token_count


@dataclass(frozen=True)
class BlendSpec:
    name: str
    size: int
    beta: float
    is_long_audio: bool = False

    def __post_init__(self):
        if self.size < 0:
            raise ValueError(f"{self.name}: size must be >= 0")
        if self.beta < 0:
            raise ValueError(f"{self.name}: blend weight must be >= 0")

    @property
    def epoch_count(self):
        """``round(beta * size)``, halves rounded up, computed in decimal."""
        exact = Decimal(repr(float(self.beta))) * self.size
        return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class StageConfig:
    stage: str
    max_audio_s: float
    max_ctx: int


# context caps use binary K (8K = 8192)
STAGES = {
    "pre1": StageConfig("pre1", 30.0, 8 * 1024),
    "pre2": StageConfig("pre2", 60.0, 8 * 1024),
    "mid1": StageConfig("mid1", 600.0, 24 * 1024),
    "mid2": StageConfig("mid2", 1800.0, 128 * 1024),
}


def stage_config(stage):
    try:
        return STAGES[stage]
    except KeyError:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}") from None


def derive_stage2_blend(stage1):
    """Halve ordinary blend weights and pin long-audio datasets to 1.0."""
    return [replace(b, beta=1.0 if b.is_long_audio else b.beta / 2) for b in stage1]


def dataset_indices(blend, rng):
    """Exactly ``blend.epoch_count`` indices into one dataset.

    Whole passes are full permutations (fresh shuffle per pass); the
    fractional remainder is a seeded subset without replacement.
    """
    count = blend.epoch_count
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    full, rest = divmod(count, blend.size)
    parts = [rng.permutation(blend.size) for _ in range(full)]
    if rest:
        parts.append(rng.permutation(blend.size)[:rest])
    return np.concatenate(parts)


def epoch_schedule(blends, seed=0):
    """Shuffled stream of ``(dataset name, index)`` for one epoch.

    All randomness comes from ``numpy.random.default_rng(seed)`` (PCG64).
    """
    blends = list(blends)
    if sum(b.epoch_count for b in blends) == 0:
        raise EmptyEpochError("every dataset contributes zero samples this epoch")
    rng = np.random.default_rng(seed)
    ds_ids, idx = [], []
    for i, b in enumerate(blends):
        picks = dataset_indices(b, rng)
        ds_ids.append(np.full(picks.shape[0], i, dtype=np.int64))
        idx.append(picks)
    ds_ids = np.concatenate(ds_ids)
    idx = np.concatenate(idx)
    order = rng.permutation(ds_ids.shape[0])
    names = [b.name for b in blends]
    return [(names[d], int(j)) for d, j in zip(ds_ids[order], idx[order])]


def schedule_counts(schedule):
    counts = {}
    for name, _ in schedule:
        counts[name] = counts.get(name, 0) + 1
    return counts


@dataclass(frozen=True)
class StageVerdict:
    accepted: bool
    reasons: tuple = ()

    def __bool__(self):
        return self.accepted


def validate_sample_for_stage(sample, cfg):
    """Accept or reject a raw sample against a stage's audio-length and context caps."""
    reasons = []
    for d in sample.durations:
        if d > cfg.max_audio_s:
            reasons.append(f"clip of {d:g} s exceeds {cfg.max_audio_s:g} s")
    n = sample.n_text_tokens + sum(audio_token_count(d) for d in sample.durations)
    if n > cfg.max_ctx:
        reasons.append(f"expanded length {n} exceeds context cap {cfg.max_ctx}")
    return StageVerdict(not reasons, tuple(reasons))


def load_blends(path):
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ConfigError("blend spec must be a JSON list")
    try:
        return [
            BlendSpec(str(item["name"]), int(item["size"]), float(item["beta"]), bool(item.get("long_audio", False)))
            for item in raw
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad blend entry: {exc}") from exc
