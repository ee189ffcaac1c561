"""Log mel spectrograms, chunking on the shift grid, and feature normalization."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import AudioBuffer
from .errors import EmptyInputError, FormatError, TruncationError

FEATURE_CACHE_MAGIC = b"FSMEL1"


@dataclass(frozen=True)
class FeatureConfig:
    frame_len_ms: float = 50.0
    frame_hop_ms: float = 10.0
    n_mels: int = 40
    fmin_hz: float = 0.0
    fmax_hz: float = 0.0  # 0 means Nyquist
    chunk_len_ms: float = 320.0
    chunk_shift_ms: float = 160.0
    log_floor: float = 1e-10

    @classmethod
    def sad(cls, **overrides) -> "FeatureConfig":
        return replace(cls(frame_len_ms=50.0, chunk_len_ms=320.0, chunk_shift_ms=160.0), **overrides)

    @classmethod
    def sid(cls, **overrides) -> "FeatureConfig":
        return replace(cls(frame_len_ms=25.0, chunk_len_ms=1280.0, chunk_shift_ms=160.0), **overrides)

    @property
    def chunk_frames(self) -> int:
        return int(round(self.chunk_len_ms / self.frame_hop_ms))

    @property
    def shift_frames(self) -> int:
        return int(round(self.chunk_shift_ms / self.frame_hop_ms))

    @property
    def shift_s(self) -> float:
        return self.chunk_shift_ms / 1000.0

    def band_edges(self, sample_rate_hz: int) -> tuple[float, float]:
        return self.fmin_hz, (self.fmax_hz or sample_rate_hz / 2)

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(float(v) for v in asdict(self).values())

    @classmethod
    def from_tuple(cls, values: Sequence[float]) -> "FeatureConfig":
        kw = {}
        for f, v in zip(fields(cls), values):
            kw[f.name] = int(v) if f.type in ("int", int) else float(v)
        return cls(**kw)

    def validate(self, sample_rate_hz: int | None = None) -> None:
        for name in ("chunk_len_ms", "chunk_shift_ms"):
            ratio = getattr(self, name) / self.frame_hop_ms
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"{name}={getattr(self, name)} is not a multiple of frame_hop_ms={self.frame_hop_ms}")
        if self.shift_frames < 1 or self.chunk_frames < 1:
            raise ValueError("chunk and shift must each span at least one frame")
        if self.shift_frames > self.chunk_frames:
            raise ValueError("chunk_shift_ms must not exceed chunk_len_ms")
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")
        if not self.log_floor >= 0:
            raise ValueError("log_floor must be non-negative")
        if sample_rate_hz is not None:
            lo, hi = self.band_edges(sample_rate_hz)
            if not 0 <= lo < hi <= sample_rate_hz / 2:
                raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got [{lo}, {hi}] at {sample_rate_hz} Hz")
            for name in ("frame_len_ms", "frame_hop_ms"):
                n = getattr(self, name) * sample_rate_hz / 1000
                if abs(n - round(n)) > 1e-9 or round(n) < 1:
                    raise ValueError(f"{name} is not a whole number of samples at {sample_rate_hz} Hz")


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [n_frames, n_mels]
    frame_hop_ms: float
    frame_len_ms: float
    id: str = ""

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class ChunkBatch:
    chunks: np.ndarray  # [n_chunks, chunk_frames, n_mels]
    chunk_start_times_s: np.ndarray
    shift_s: float
    source_id: str = ""

    def __len__(self):
        return self.chunks.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    """Triangular filters of unit peak, centres equally spaced in mel.

    Returns an array of shape ``[n_mels, n_fft // 2 + 1]``.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers_hz(cfg: FeatureConfig, sample_rate_hz: int) -> np.ndarray:
    lo, hi = cfg.band_edges(sample_rate_hz)
    return mel_to_hz(np.linspace(hz_to_mel(lo), hz_to_mel(hi), cfg.n_mels + 2))[1:-1]


def frame_count(n_samples: int, frame_samples: int, hop_samples: int) -> int:
    if n_samples < frame_samples:
        return 0
    return (n_samples - frame_samples) // hop_samples + 1


def chunk_count(n_frames: int, chunk_frames: int, shift_frames: int) -> int:
    if n_frames < chunk_frames:
        return 0
    return (n_frames - chunk_frames) // shift_frames + 1


def mel_spectrogram(audio: AudioBuffer, cfg: FeatureConfig) -> MelSpectrogram:
    """Hamming-windowed power spectrum per frame, mel-warped, then log."""
    fs = audio.sample_rate_hz
    cfg.validate(fs)
    frame = int(round(cfg.frame_len_ms * fs / 1000))
    hop = int(round(cfg.frame_hop_ms * fs / 1000))
    n_frames = frame_count(len(audio.samples), frame, hop)
    if n_frames == 0:
        raise EmptyInputError(
            f"{audio.id or 'audio'}: {len(audio.samples)} samples is shorter than one {frame}-sample frame")
    n_fft = 1 << (frame - 1).bit_length()
    frames = sliding_window_view(audio.samples, frame)[::hop][:n_frames]
    power = np.abs(np.fft.rfft(frames * np.hamming(frame), n_fft)) ** 2
    fb = mel_filterbank(cfg.n_mels, n_fft, fs, *cfg.band_edges(fs))
    values = np.log(power @ fb.T + cfg.log_floor)
    return MelSpectrogram(values, cfg.frame_hop_ms, cfg.frame_len_ms, audio.id)


def chunk(spec: MelSpectrogram, cfg: FeatureConfig) -> ChunkBatch:
    """Overlapping windows of ``chunk_frames`` rows every ``shift_frames`` rows.

    Trailing frames that cannot fill a chunk are dropped.
    """
    if abs(spec.frame_hop_ms - cfg.frame_hop_ms) > 1e-9:
        raise ValueError(f"spectrogram hop {spec.frame_hop_ms}ms does not match config hop {cfg.frame_hop_ms}ms")
    cf, sf = cfg.chunk_frames, cfg.shift_frames
    n = chunk_count(spec.n_frames, cf, sf)
    n_mels = spec.values.shape[1]
    if n == 0:
        chunks = np.zeros((0, cf, n_mels))
    else:
        view = sliding_window_view(spec.values, cf, axis=0)[::sf][:n]
        chunks = np.ascontiguousarray(view.transpose(0, 2, 1))
    return ChunkBatch(chunks, np.arange(n) * cfg.shift_s, cfg.shift_s, spec.id)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n_mels: int) -> "NormStats":
        return cls(np.zeros(n_mels), np.ones(n_mels))


def compute_norm_stats(rows: np.ndarray | Sequence[np.ndarray]) -> NormStats:
    """Per-band mean and std over every row of the given ``[..., n_mels]`` arrays.

    Bands with (numerically) zero spread get std 1.
    """
    if isinstance(rows, np.ndarray):
        rows = [rows]
    flat = [np.asarray(r, dtype=np.float64).reshape(-1, r.shape[-1]) for r in rows]
    n = sum(len(f) for f in flat)
    if n == 0:
        raise EmptyInputError("no rows to compute normalization statistics from")
    mean = sum(f.sum(axis=0) for f in flat) / n
    var = sum(((f - mean) ** 2).sum(axis=0) for f in flat) / n
    std = np.sqrt(var)
    # constant bands: spread at rounding-noise level counts as zero
    std[std <= 1e-9 * np.maximum(1.0, np.abs(mean))] = 1.0
    return NormStats(mean, std)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    std = np.where(stats.std > 0, stats.std, 1.0)
    return (values - stats.mean) / std


def per_feature_normalize(batch: ChunkBatch, stats: NormStats) -> ChunkBatch:
    return replace(batch, chunks=normalize(batch.chunks, stats))


class ChunkIndex:
    """Chunks addressed as (spectrogram, start row) pairs; sliced on demand.

    Supports ``len()`` and integer-array indexing, so training code can treat it
    like a ``[n, chunk_frames, n_mels]`` array without materializing it.
    """

    def __init__(self, spectrograms: Sequence[np.ndarray], starts: Sequence[tuple[int, int]], chunk_frames: int):
        self.spectrograms = list(spectrograms)
        self.starts = np.asarray(starts, dtype=np.int64).reshape(-1, 2)
        self.chunk_frames = chunk_frames
        n_mels = self.spectrograms[0].shape[1] if self.spectrograms else 0
        self.shape = (len(self.starts), chunk_frames, n_mels)

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(len(self))[idx])
        out = np.empty((len(idx),) + self.shape[1:])
        for i, k in enumerate(idx):
            s, r = self.starts[k]
            out[i] = self.spectrograms[s][r:r + self.chunk_frames]
        return out


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

def save_features(path: str | Path, spec: MelSpectrogram) -> None:
    """Binary blob: magic, u32 n_frames, u32 n_mels, f32 hop_ms, f32 LE rows."""
    n, m = spec.values.shape
    header = FEATURE_CACHE_MAGIC + struct.pack("<IIf", n, m, spec.frame_hop_ms)
    Path(path).write_bytes(header + spec.values.astype("<f4").tobytes())


def load_features(path: str | Path, frame_len_ms: float = 0.0) -> MelSpectrogram:
    path = Path(path)
    data = path.read_bytes()
    if data[:6] != FEATURE_CACHE_MAGIC:
        raise FormatError(f"{path}: bad feature cache magic {data[:6]!r}")
    if len(data) < 18:
        raise TruncationError(f"{path}: header truncated at byte {len(data)}")
    n, m, hop = struct.unpack_from("<IIf", data, 6)
    need = 18 + 4 * n * m
    if len(data) < need:
        raise TruncationError(f"{path}: payload truncated at byte {len(data)}, expected {need}")
    values = np.frombuffer(data, dtype="<f4", count=n * m, offset=18).reshape(n, m).astype(np.float64)
    return MelSpectrogram(values, float(hop), frame_len_ms, path.stem)
