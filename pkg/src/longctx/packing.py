"""Batch construction for sequence-parallel training.

Three stages: SP-aware index sampling, audio placeholder expansion and
padding/truncation into a :class:`PackedBatch`.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, TooLongError
from .frontend import audio_token_count
from .rote import DEFAULT_TEXT_STRIDE_S, AudioSegment, TextSegment, TokenTimeline, build_timeline

IGNORE_INDEX = -100
PAD_ID = 0
PLACEHOLDER_ID = -1


@dataclass
class SampleIndexPlan:
    per_rank: list
    dp_replicas: int
    seed: int
    shuffle: bool
    dropped_tail: list = field(default_factory=list)

    def replica_lists(self, topology):
        return [self.per_rank[group[0]] for group in topology.sp_groups]

    def steps(self, batch_size):
        n = len(self.per_rank[0]) if self.per_rank else 0
        return math.ceil(n / batch_size)


def sp_aware_indices(n_samples, topology, seed=0, shuffle=True):
    """Epoch index plan in which every rank of an SP group gets the same list.

    The (optionally shuffled) order is dealt round-robin to the
    ``N_GPU / P`` replicas; the ``n_samples % dp_replicas`` trailing indices
    are dropped so that all replicas take the same number of steps.
    """
    dp = topology.dp_replicas
    if n_samples < dp:
        raise ValueError(f"{n_samples} samples cannot feed {dp} data-parallel replicas")
    order = np.arange(n_samples)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n_samples)
    usable = n_samples - n_samples % dp
    replica_lists = [order[r:usable:dp].tolist() for r in range(dp)]
    per_rank = [list(replica_lists[rank // topology.sp_size]) for rank in range(topology.n_gpu)]
    return SampleIndexPlan(per_rank, dp, seed, shuffle, order[usable:].tolist())


@dataclass
class RawSample:
    """Token ids with audio placeholders, one clip duration per placeholder."""

    token_ids: list
    durations: list = field(default_factory=list)
    labels: list = None
    id: object = None
    placeholder_id: int = PLACEHOLDER_ID

    def __post_init__(self):
        self.token_ids = [int(t) for t in self.token_ids]
        self.durations = [float(d) for d in self.durations]
        n_ph = sum(1 for t in self.token_ids if t == self.placeholder_id)
        if n_ph != len(self.durations):
            raise ValueError(f"sample {self.id!r}: {n_ph} audio placeholders but {len(self.durations)} durations")
        if any(not d > 0 for d in self.durations):
            raise ValueError(f"sample {self.id!r}: clip durations must be positive")
        if self.labels is None:
            self.labels = list(self.token_ids)
        self.labels = [int(t) for t in self.labels]
        if len(self.labels) != len(self.token_ids):
            raise ValueError(f"sample {self.id!r}: labels and token ids differ in length")

    @property
    def n_text_tokens(self):
        return len(self.token_ids) - len(self.durations)

    def expanded_length(self):
        return self.n_text_tokens + sum(audio_token_count(d) for d in self.durations)


@dataclass
class ExpandedSample:
    token_ids: np.ndarray
    labels: np.ndarray
    timeline: TokenTimeline
    audio_spans: list  # [(start, stop), ...]
    id: object = None

    def __len__(self):
        return self.token_ids.shape[0]


def expand_audio_tokens(sample, audio_token_id=None, ignore_index=IGNORE_INDEX, text_stride=DEFAULT_TEXT_STRIDE_S):
    """Replace each placeholder by ``ceil(25 * duration)`` audio-token ids.

    Labels on audio positions become ``ignore_index``; the timeline gives
    audio tokens a 40 ms stride and text tokens a virtual clock.
    """
    if audio_token_id is None:
        audio_token_id = sample.placeholder_id
    ids, labels, spans, segments = [], [], [], []
    clips = iter(sample.durations)
    run = 0
    for tok, lab in zip(sample.token_ids, sample.labels):
        if tok != sample.placeholder_id:
            ids.append(tok)
            labels.append(lab)
            run += 1
            continue
        if run:
            segments.append(TextSegment(run))
            run = 0
        duration = next(clips)
        n = audio_token_count(duration)
        spans.append((len(ids), len(ids) + n))
        ids.extend([audio_token_id] * n)
        labels.extend([ignore_index] * n)
        segments.append(AudioSegment(duration))
    if run:
        segments.append(TextSegment(run))
    timeline = build_timeline(segments, text_stride=text_stride) if segments else TokenTimeline([])
    return ExpandedSample(np.asarray(ids, dtype=np.int64), np.asarray(labels, dtype=np.int64), timeline, spans, sample.id)


@dataclass
class PackedBatch:
    token_ids: np.ndarray  # (B, T)
    attention_mask: np.ndarray  # (B, T), 1 on real tokens
    labels: np.ndarray  # (B, T)
    timelines: list
    T: int
    lengths: list  # kept length of each row
    truncated: int = 0

    @property
    def batch_size(self):
        return self.token_ids.shape[0]


def padded_length(max_len, max_ctx, pad_multiple=1):
    """``min(max_len, max_ctx)`` rounded up to ``pad_multiple``, never above ``max_ctx``."""
    if max_ctx < 1 or pad_multiple < 1:
        raise ConfigError("max_ctx and pad_multiple must be positive")
    T = -(-min(max_len, max_ctx) // pad_multiple) * pad_multiple
    if T > max_ctx:
        T = (max_ctx // pad_multiple) * pad_multiple
        if T == 0:
            raise ConfigError(f"max_ctx={max_ctx} is smaller than pad_multiple={pad_multiple}")
    return T


def _as_expanded(s):
    if isinstance(s, ExpandedSample):
        return s
    if isinstance(s, RawSample):
        return expand_audio_tokens(s)
    if isinstance(s, tuple) and len(s) == 2:
        ids, labels = (np.asarray(x, dtype=np.int64) for x in s)
    else:
        ids = np.asarray(s, dtype=np.int64)
        labels = ids.copy()
    n = ids.shape[0]
    return ExpandedSample(ids, labels, TokenTimeline(np.arange(n) * DEFAULT_TEXT_STRIDE_S), [])


def _cut_point(sample, limit):
    cut = min(len(sample), limit)
    for start, stop in sample.audio_spans:
        if start < cut < stop:
            cut = start
    return cut


def collate(samples, max_ctx, pad_multiple=1, pad_id=PAD_ID, ignore_index=IGNORE_INDEX):
    """Pad/truncate a batch to a common length ``T``.

    Long rows are cut from the right; a cut that would split an audio span
    moves back to the span start. A single audio span longer than
    ``max_ctx`` cannot be placed at all and raises :class:`TooLongError`.
    """
    samples = [_as_expanded(s) for s in samples]
    if not samples:
        raise EmptyInputError("cannot collate an empty batch")
    for s in samples:
        for start, stop in s.audio_spans:
            if stop - start > max_ctx:
                raise TooLongError(f"sample {s.id!r}: one audio clip expands to {stop - start} tokens > max_ctx={max_ctx}")
    T = padded_length(max(len(s) for s in samples), max_ctx, pad_multiple)
    B = len(samples)
    ids = np.full((B, T), pad_id, dtype=np.int64)
    labels = np.full((B, T), ignore_index, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.int64)
    timelines, lengths, truncated = [], [], 0
    for i, s in enumerate(samples):
        n = _cut_point(s, T)
        truncated += n < len(s)
        ids[i, :n] = s.token_ids[:n]
        labels[i, :n] = s.labels[:n]
        mask[i, :n] = 1
        taus = np.empty(T)
        taus[:n] = s.timeline.taus[:n]
        taus[n:] = taus[n - 1] if n else 0.0
        timelines.append(TokenTimeline(taus))
        lengths.append(n)
    return PackedBatch(ids, mask, labels, timelines, T, lengths, truncated)


# -- manifests ----------------------------------------------------------------


def parse_manifest_line(obj, placeholder_id=PLACEHOLDER_ID):
    return RawSample(
        token_ids=obj["text_tokens"],
        durations=[clip["duration_s"] for clip in obj.get("audio", [])],
        labels=obj.get("labels"),
        id=obj.get("id"),
        placeholder_id=placeholder_id,
    )


def load_manifest(path, placeholder_id=PLACEHOLDER_ID):
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(parse_manifest_line(json.loads(line), placeholder_id))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
    return samples


def rank_batches(samples, plan, rank, batch_size, max_ctx, pad_multiple=1, pad_id=PAD_ID, ignore_index=IGNORE_INDEX):
    """Collated batches one rank consumes over the epoch, in step order."""
    indices = plan.per_rank[rank]
    batches = []
    for start in range(0, len(indices), batch_size):
        chunk = [samples[i] for i in indices[start : start + batch_size]]
        batches.append(collate(chunk, max_ctx, pad_multiple, pad_id, ignore_index))
    return batches
