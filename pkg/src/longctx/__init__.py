"""Desk-scale long-context training machinery for audio language models.

Hybrid Ulysses x Ring sequence-parallel attention on a simulated fabric,
rotary time embeddings, the audio-to-token frontend, SP-aware batch
packing and blend-weight curricula.
"""

from .attention import AttentionProblem, PartialAttn, block_stats, finalize, merge_stats, reference_attention
from .curriculum import BlendSpec, StageConfig, derive_stage2_blend, epoch_schedule, stage_config, validate_sample_for_stage
from .errors import DeadlockError, DegenerateRowError, LongCtxError, ShapeError, TopologyError
from .fabric import CommLedger, ProcessTopology, build_topology, run
from .frontend import (
    AudioClip,
    EncoderFeatures,
    MelSpectrogram,
    audio_token_count,
    chunk_audio,
    encode_stub,
    frame_count,
    log_mel,
    make_frontend,
    pool_stride2,
    project_to_llm,
)
from .packing import PackedBatch, RawSample, collate, expand_audio_tokens, sp_aware_indices
from .rote import RoteConfig, TokenTimeline, build_timeline, inv_frequencies, rotate
from .sp_attention import (
    ShardLayout,
    SpInput,
    expected_comm,
    ring_attention,
    simulate_attention,
    sp_transformer_block,
    ulysses_attention,
    usp_attention,
)

__version__ = "0.1.0"
