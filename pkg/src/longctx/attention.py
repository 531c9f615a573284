"""Single-rank reference attention and online-softmax block statistics.

Arrays are laid out ``(heads, seq, head_dim)``. Masks are boolean with
``True`` meaning "this key is visible to this query".
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRowError, ShapeError
from .kernels import softmax_rows
from .rote import RoteConfig, TokenTimeline, rotate


def visibility_mask(q_pos, k_pos, causal=False, k_valid=None):
    """Boolean ``(len(q_pos), len(k_pos))`` mask from global positions."""
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    mask = np.ones((q_pos.shape[0], k_pos.shape[0]), dtype=bool)
    if causal:
        mask &= k_pos[None, :] <= q_pos[:, None]
    if k_valid is not None:
        mask &= np.asarray(k_valid, dtype=bool)[None, :]
    return mask


@dataclass
class AttentionProblem:
    """One sequence of multi-head attention.

    ``q``, ``k``, ``v`` have shape ``(H, S, d_h)``. When ``timeline`` is set,
    queries and keys are rotated by time before the dot product.
    ``pad_mask`` marks real (non-padding) positions.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    timeline: TokenTimeline = None
    causal: bool = False
    pad_mask: np.ndarray = None
    rote: RoteConfig = None

    def __post_init__(self):
        self.q, self.k, self.v = (np.asarray(a) for a in (self.q, self.k, self.v))
        if self.q.ndim != 3 or self.q.shape != self.k.shape or self.q.shape != self.v.shape:
            raise ShapeError(f"q/k/v must share shape (H, S, d_h); got {self.q.shape}, {self.k.shape}, {self.v.shape}")
        H, S, d = self.q.shape
        if self.pad_mask is None:
            self.pad_mask = np.ones(S, dtype=bool)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.pad_mask.shape != (S,):
            raise ShapeError(f"pad_mask must have length {S}")
        if not self.pad_mask.any():
            raise ValueError("pad_mask must mark at least one real position")
        if self.timeline is not None:
            if not isinstance(self.timeline, TokenTimeline):
                self.timeline = TokenTimeline(self.timeline)
            if len(self.timeline) != S:
                raise ShapeError(f"timeline has {len(self.timeline)} entries for S={S}")
            if self.rote is None:
                self.rote = RoteConfig(d)

    @property
    def shape(self):
        return self.q.shape

    def rotated_qk(self):
        if self.timeline is None:
            return self.q, self.k
        return rotate(self.q, self.timeline, self.rote), rotate(self.k, self.timeline, self.rote)


def reference_attention(problem):
    """Exact softmax attention; padded query rows come out as zeros."""
    q, k = problem.rotated_qk()
    v = problem.v
    H, S, d = q.shape
    pos = np.arange(S)
    mask = visibility_mask(pos, pos, problem.causal, problem.pad_mask)
    rows = np.flatnonzero(problem.pad_mask)
    out = np.zeros_like(v)
    scale = 1.0 / math.sqrt(d)
    for h in range(H):
        logits = (q[h] @ k[h].T) * scale
        logits = np.where(mask, logits, -np.inf)[rows]
        out[h, rows] = softmax_rows(logits) @ v[h]
    return out


@dataclass
class PartialAttn:
    """Online-softmax running statistics for a set of query rows.

    ``m`` is the running max logit, ``l`` the normaliser relative to ``m``,
    ``o`` the unnormalised value accumulator. Rows that have seen no
    visible key carry ``m = -inf``, ``l = 0``, ``o = 0``.
    """

    m: np.ndarray  # (..., Sq)
    l: np.ndarray  # (..., Sq)
    o: np.ndarray  # (..., Sq, d_v)
    meta: dict = field(default_factory=dict, compare=False)

    @classmethod
    def empty(cls, rows_shape, d_v):
        rows_shape = tuple(rows_shape)
        return cls(
            m=np.full(rows_shape, -np.inf),
            l=np.zeros(rows_shape),
            o=np.zeros(rows_shape + (d_v,)),
        )

    def is_empty(self):
        return self.l == 0


def block_stats(q_rows, k_block, v_block, mask_block=None, scale=None):
    """Statistics of ``q_rows`` attending to one key/value block.

    Rotation (if any) must already be applied. The logit scale defaults to
    ``1/sqrt(d_h)``. Statistics are accumulated in float64.
    """
    q_rows, k_block, v_block = (np.asarray(a) for a in (q_rows, k_block, v_block))
    if q_rows.shape[-1] != k_block.shape[-1] or k_block.shape[-2] != v_block.shape[-2]:
        raise ShapeError(f"inconsistent block shapes {q_rows.shape}, {k_block.shape}, {v_block.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q_rows.shape[-1])
    logits = (q_rows @ np.swapaxes(k_block, -1, -2)).astype(np.float64) * scale
    if mask_block is not None:
        logits = np.where(mask_block, logits, -np.inf)
    m = logits.max(axis=-1)
    live = np.isfinite(m)
    m_safe = np.where(live, m, 0.0)
    p = np.exp(logits - m_safe[..., None])  # masked -> exp(-inf) = 0
    l = p.sum(axis=-1)
    o = p @ v_block.astype(np.float64)
    return PartialAttn(m=m, l=l, o=o)


def merge_stats(a, b):
    if a.m.shape != b.m.shape or a.o.shape != b.o.shape:
        raise ShapeError(f"cannot merge stats of shapes {a.o.shape} and {b.o.shape}")
    m = np.maximum(a.m, b.m)
    live = np.isfinite(m)
    m_safe = np.where(live, m, 0.0)
    alpha = np.where(np.isfinite(a.m), np.exp(a.m - m_safe), 0.0)
    beta = np.where(np.isfinite(b.m), np.exp(b.m - m_safe), 0.0)
    return PartialAttn(
        m=m,
        l=a.l * alpha + b.l * beta,
        o=a.o * alpha[..., None] + b.o * beta[..., None],
    )


def finalize(p, row_valid=None):
    """Normalise accumulated values.

    Rows flagged invalid by ``row_valid`` (padding) are returned as zeros;
    any remaining empty row raises :class:`DegenerateRowError`.
    """
    valid = np.ones(p.l.shape, dtype=bool) if row_valid is None else np.broadcast_to(row_valid, p.l.shape)
    empty = (p.l == 0) & valid
    if empty.any():
        raise DegenerateRowError(f"{int(empty.sum())} query rows saw no visible key")
    denom = np.where(valid, p.l, 1.0)
    out = p.o / denom[..., None]
    return np.where(valid[..., None], out, 0.0)
