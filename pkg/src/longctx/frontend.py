"""Audio-to-token frontend.

16 kHz waveform -> 128-bin log-mel at 100 Hz -> stub encoder features at
50 Hz -> stride-2 pooled tokens at 25 Hz (40 ms) -> adaptor projection.

The trained encoder is replaced by a seeded linear map so that every
shape, rate and timestamp contract holds without model weights. The
stages are also exposed as scikit-learn transformers (see
:func:`make_frontend`) so they compose with ``Pipeline`` and ``clone``.
"""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline
from sklearn.utils.validation import check_is_fitted

from .errors import ChunkFirstError, EmptyInputError, ShapeError, UnsupportedRateError
from .kernels import mlp2
from .rote import TokenTimeline

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 400
N_MELS = 128
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
FRAME_RATE = 100
ENCODER_RATE = 50
TOKEN_RATE = 25
CHUNK_SECONDS = 30
ENCODER_DIM = 1280
MAX_CHUNK_SAMPLES = CHUNK_SECONDS * SAMPLE_RATE


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedRateError(
                f"only {SAMPLE_RATE} Hz audio is accepted, got {self.sample_rate} Hz (resample first)"
            )
        if samples.size == 0:
            raise EmptyInputError("audio clip has no samples")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self):
        return self.samples.shape[0] / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames), natural-log power
    frame_rate: int = FRAME_RATE

    @property
    def n_mels(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class EncoderFeatures:
    values: np.ndarray  # (n_tokens, dim)
    feature_rate: int
    timestamps: TokenTimeline

    def __post_init__(self):
        if self.feature_rate not in (ENCODER_RATE, TOKEN_RATE):
            raise ValueError(f"feature_rate must be 50 or 25 Hz, got {self.feature_rate}")
        if self.values.ndim != 2 or self.values.shape[0] != len(self.timestamps):
            raise ShapeError("features and timestamps disagree on token count")

    @property
    def n_tokens(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class AdaptedTokens:
    values: np.ndarray  # (n_tokens, llm_dim)
    timestamps: TokenTimeline

    @property
    def n_tokens(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class AdaptorWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self):
        return self.w1.shape[0]

    @property
    def out_dim(self):
        return self.w2.shape[1]


def _exact(x):
    # decimal reading of the float, so 0.04 s is exactly one 40 ms token
    return Fraction(repr(float(x)))


def frame_count(n_samples, win=WIN_LENGTH, hop=HOP_LENGTH):
    """Number of centre-padded frames kept for ``n_samples`` samples: ``ceil(n / hop)``."""
    if n_samples < 1:
        raise EmptyInputError("cannot frame zero-length audio")
    if hop < 1 or win < 1:
        raise ValueError("win and hop must be positive")
    return -(-int(n_samples) // int(hop))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels=N_MELS, f_min=F_MIN, f_max=F_MAX):
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE, f_min=F_MIN, f_max=F_MAX):
    """Triangular HTK-scale filters, shape ``(n_mels, n_fft // 2 + 1)``, unnormalised."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def power_spectrogram(samples):
    """Hann-windowed STFT power, shape ``(n_fft // 2 + 1, frame_count)``."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    n_frames = frame_count(n)
    padded = np.pad(samples, WIN_LENGTH // 2, mode="reflect")
    idx = np.arange(n_frames)[:, None] * HOP_LENGTH + np.arange(WIN_LENGTH)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WIN_LENGTH) / WIN_LENGTH)
    spec = np.fft.rfft(padded[idx] * window, n=N_FFT, axis=1)
    return (spec.real**2 + spec.imag**2).T


_FILTERBANK = mel_filterbank()


def log_mel(clip):
    """128 x frame_count natural-log mel power of a clip no longer than 30 s."""
    if not isinstance(clip, AudioClip):
        clip = AudioClip(clip)
    if clip.samples.shape[0] > MAX_CHUNK_SAMPLES:
        raise ChunkFirstError(
            f"clip is {clip.duration_s:.3f} s; split into {CHUNK_SECONDS} s chunks before log_mel"
        )
    mel_power = _FILTERBANK @ power_spectrogram(clip.samples)
    return MelSpectrogram(np.log(np.maximum(mel_power, LOG_FLOOR)))


def chunk_audio(duration_s, chunk_s=CHUNK_SECONDS):
    """Split a duration into greedy non-overlapping 30 s chunks; the tail is not padded."""
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    n_full = int(duration_s // chunk_s)
    rest = duration_s - n_full * chunk_s
    chunks = [float(chunk_s)] * n_full
    if rest > 0:
        chunks.append(rest)
    return chunks


def chunk_samples(samples, chunk_s=CHUNK_SECONDS, sample_rate=SAMPLE_RATE):
    step = chunk_s * sample_rate
    samples = np.asarray(samples)
    return [samples[i : i + step] for i in range(0, samples.shape[0], step)]


def audio_token_count(duration_s):
    """Post-pooling token count, ``ceil(duration * 25)``."""
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    return math.ceil(_exact(duration_s) * TOKEN_RATE)


def _pool_pairs(x):
    # average consecutive rows; an odd trailing row passes through
    n = x.shape[0]
    half = n // 2
    out = np.empty((half + n % 2,) + x.shape[1:], dtype=x.dtype)
    out[:half] = 0.5 * (x[0 : 2 * half : 2] + x[1 : 2 * half : 2])
    if n % 2:
        out[half] = x[-1]
    return out


def stub_projection(dim=ENCODER_DIM, seed=0, n_mels=N_MELS):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_mels, dim)) / math.sqrt(n_mels)


def encode_stub(mel, dim=ENCODER_DIM, seed=0, projection=None):
    """Deterministic stand-in for the audio encoder: 2x frame pooling then a seeded linear map."""
    if projection is None:
        projection = stub_projection(dim, seed, mel.n_mels)
    elif projection.shape != (mel.n_mels, dim):
        raise ShapeError(f"projection must be {(mel.n_mels, dim)}, got {projection.shape}")
    pooled = _pool_pairs(mel.values.T)
    taus = np.arange(pooled.shape[0]) / ENCODER_RATE
    return EncoderFeatures(pooled @ projection, ENCODER_RATE, TokenTimeline(taus))


def pool_stride2(features):
    if features.feature_rate != ENCODER_RATE:
        raise ValueError(f"stride-2 pooling expects 50 Hz features, got {features.feature_rate} Hz")
    values = _pool_pairs(features.values)
    taus = features.timestamps.taus[0::2]
    return EncoderFeatures(values, TOKEN_RATE, TokenTimeline(taus))


def init_adaptor(in_dim, hidden_dim, out_dim, seed=0):
    rng = np.random.default_rng(seed)
    return AdaptorWeights(
        w1=rng.standard_normal((in_dim, hidden_dim)) / math.sqrt(in_dim),
        b1=np.zeros(hidden_dim),
        w2=rng.standard_normal((hidden_dim, out_dim)) / math.sqrt(hidden_dim),
        b2=np.zeros(out_dim),
    )


def project_to_llm(features, weights):
    if features.dim != weights.in_dim:
        raise ShapeError(f"features have dim {features.dim}, adaptor expects {weights.in_dim}")
    values = mlp2(features.values, weights.w1, weights.b1, weights.w2, weights.b2)
    return AdaptedTokens(values, features.timestamps)


# -- scikit-learn transformers -------------------------------------------------


def check_clip(X):
    """Accept an :class:`AudioClip` or a 1-D 16 kHz waveform."""
    if isinstance(X, AudioClip):
        return X
    return AudioClip(np.asarray(X))


class LogMelSpectrogram(TransformerMixin, BaseEstimator):
    """Waveform -> :class:`MelSpectrogram`. Stateless."""

    def fit(self, X, y=None):
        check_clip(X)
        self.n_mels_ = N_MELS
        return self

    def transform(self, X):
        return log_mel(check_clip(X))


class StubEncoder(TransformerMixin, BaseEstimator):
    """:class:`MelSpectrogram` -> 50 Hz :class:`EncoderFeatures`."""

    def __init__(self, dim=ENCODER_DIM, seed=0):
        self.dim = dim
        self.seed = seed

    def fit(self, X, y=None):
        if not isinstance(X, MelSpectrogram):
            raise TypeError("StubEncoder expects a MelSpectrogram")
        self.projection_ = stub_projection(self.dim, self.seed, X.n_mels)
        return self

    def transform(self, X):
        check_is_fitted(self, "projection_")
        return encode_stub(X, self.dim, projection=self.projection_)


class StridePool(TransformerMixin, BaseEstimator):
    """50 Hz features -> 25 Hz tokens."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return pool_stride2(X)


class AudioAdaptor(TransformerMixin, BaseEstimator):
    """Two-layer MLP from encoder width to LLM embedding width."""

    def __init__(self, hidden_dim=2048, out_dim=896, seed=0):
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.seed = seed

    def fit(self, X, y=None):
        self.n_features_in_ = X.dim
        self.weights_ = init_adaptor(X.dim, self.hidden_dim, self.out_dim, self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        return project_to_llm(X, self.weights_)


def make_frontend(dim=ENCODER_DIM, hidden_dim=2048, out_dim=896, seed=0):
    """Full frontend as a scikit-learn ``Pipeline`` (waveform in, adapted tokens out)."""
    return Pipeline(
        [
            ("mel", LogMelSpectrogram()),
            ("encoder", StubEncoder(dim=dim, seed=seed)),
            ("pool", StridePool()),
            ("adaptor", AudioAdaptor(hidden_dim=hidden_dim, out_dim=out_dim, seed=seed)),
        ]
    )
