"""Rotary Time Embeddings.

Positional rotation of query/key pairs driven by each token's absolute
timestamp (seconds) instead of its index. Dimension pair ``(2j, 2j+1)`` of
a row with timestamp ``tau`` is rotated by

    theta = -angle_scale * tau * base ** (-2j / head_dim)

using ``[[cos, -sin], [sin, cos]]``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError

AUDIO_TOKEN_STRIDE_S = 0.04
DEFAULT_TEXT_STRIDE_S = 0.04


@dataclass(frozen=True)
class RoteConfig:
    head_dim: int
    base: float = 10000.0
    angle_scale: float = 2.0 * math.pi

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be a positive even number, got {self.head_dim}")
        if not self.base > 1:
            raise ConfigError(f"base must exceed 1, got {self.base}")


class TokenTimeline:
    """Non-decreasing, non-negative, finite per-token timestamps in seconds."""

    __slots__ = ("taus",)

    def __init__(self, taus):
        taus = np.asarray(taus, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(taus)):
            raise ValueError("timestamps must be finite")
        if taus.size and taus.min() < 0:
            raise ValueError("timestamps must be non-negative")
        if taus.size > 1 and np.any(np.diff(taus) < 0):
            raise ValueError("timestamps must be non-decreasing")
        taus.setflags(write=False)
        self.taus = taus

    def __len__(self):
        return self.taus.shape[0]

    def __getitem__(self, item):
        if isinstance(item, slice):
            return TokenTimeline(self.taus[item])
        return float(self.taus[item])

    def __eq__(self, other):
        return isinstance(other, TokenTimeline) and np.array_equal(self.taus, other.taus)

    def __repr__(self):
        return f"TokenTimeline(n={len(self)})"

    def shifted(self, delta):
        return TokenTimeline(self.taus + delta)

    def strictly_increasing(self):
        return bool(np.all(np.diff(self.taus) > 0))


def inv_frequencies(cfg):
    j = np.arange(cfg.head_dim // 2, dtype=np.float64)
    return cfg.base ** (-2.0 * j / cfg.head_dim)


def rotation_angles(taus, cfg):
    taus = np.asarray(taus, dtype=np.float64).reshape(-1)
    return -cfg.angle_scale * np.outer(taus, inv_frequencies(cfg))


def rotate(x, timeline, cfg):
    """Rotate the last axis of ``x`` by time-driven angles.

    ``x`` has shape ``(..., S, head_dim)``; ``timeline`` is a
    :class:`TokenTimeline`, a length-``S`` array, or a scalar applied to
    every row.
    """
    x = np.asarray(x)
    if x.ndim < 1 or x.shape[-1] != cfg.head_dim:
        raise ShapeError(f"last axis must be head_dim={cfg.head_dim}, got shape {x.shape}")
    taus = timeline.taus if isinstance(timeline, TokenTimeline) else np.asarray(timeline, dtype=np.float64)
    if taus.ndim == 0:
        n_rows = x.shape[-2] if x.ndim >= 2 else 1
        taus = np.full(n_rows, float(taus))
    if x.ndim >= 2 and taus.shape[0] != x.shape[-2]:
        raise ShapeError(f"timeline has {taus.shape[0]} entries for {x.shape[-2]} rows")
    if x.ndim == 1 and taus.shape[0] != 1:
        raise ShapeError("a single vector needs exactly one timestamp")
    theta = rotation_angles(taus, cfg)
    if x.ndim == 1:
        theta = theta[0]
    cos = np.cos(theta).astype(x.dtype, copy=False)
    sin = np.sin(theta).astype(x.dtype, copy=False)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@dataclass(frozen=True)
class TextSegment:
    n_tokens: int


@dataclass(frozen=True)
class AudioSegment:
    duration_s: float


def _coerce_segment(seg):
    if isinstance(seg, (TextSegment, AudioSegment)):
        return seg
    kind = seg.get("kind")
    if kind == "text":
        return TextSegment(int(seg["n_tokens"]))
    if kind == "audio":
        return AudioSegment(float(seg["duration_s"]))
    raise ValueError(f"unknown segment kind {kind!r}")


def build_timeline(segments, text_stride=DEFAULT_TEXT_STRIDE_S, start=0.0):
    """Timestamps for a mixed text/audio token stream.

    Audio tokens tick at the 40 ms encoder stride from the running clock.
    Text tokens have no physical time, so a virtual clock advances
    ``text_stride`` per token. After each segment the clock sits one stride
    past the last emitted timestamp.
    """
    # deferred import: frontend imports this module for TokenTimeline
    from .frontend import audio_token_count

    segments = [_coerce_segment(s) for s in segments]
    if not segments:
        raise EmptyInputError("no segments given")
    clock = float(start)
    parts = []
    for seg in segments:
        if isinstance(seg, AudioSegment):
            n, stride = audio_token_count(seg.duration_s), AUDIO_TOKEN_STRIDE_S
        else:
            if seg.n_tokens < 0:
                raise ValueError("text segment token count must be >= 0")
            n, stride = seg.n_tokens, text_stride
        if n == 0:
            continue
        taus = clock + np.arange(n, dtype=np.float64) * stride
        parts.append(taus)
        clock = float(taus[-1]) + stride
    taus = np.concatenate(parts) if parts else np.zeros(0)
    return TokenTimeline(taus)
