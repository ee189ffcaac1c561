import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkcnn.audio import AudioBuffer
from chunkcnn.dsp import (
    ChunkIndex,
    FeatureConfig,
    MelSpectrogram,
    NormStats,
    chunk,
    chunk_count,
    compute_norm_stats,
    frame_count,
    hz_to_mel,
    load_features,
    mel_centers_hz,
    mel_filterbank,
    mel_spectrogram,
    per_feature_normalize,
    save_features,
)
from chunkcnn.errors import EmptyInputError, FormatError, TruncationError

FS = 8000


def test_frame_count_one_second_sad():
    audio = AudioBuffer(np.random.default_rng(0).standard_normal(8000) * 0.1, FS)
    spec = mel_spectrogram(audio, FeatureConfig.sad())
    assert spec.values.shape == (96, 40)
    assert (8000 - 400) // 80 + 1 == 96


def test_mel_of_700hz():
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2), abs=1e-12)
    assert hz_to_mel(700.0) == pytest.approx(781.1728, abs=1e-4)


def _direct_dft_power(frame, n_fft):
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(len(frame))[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    return np.abs(basis @ frame) ** 2


def test_sine_peaks_in_nearest_band():
    cfg = FeatureConfig.sad()
    t = np.arange(4000) / FS
    audio = AudioBuffer(0.5 * np.sin(2 * np.pi * 1000.0 * t), FS)
    spec = mel_spectrogram(audio, cfg)
    centers = mel_centers_hz(cfg, FS)
    nearest = int(np.argmin(np.abs(centers - 1000.0)))
    # independent route: per-frame direct DFT through the same filterbank
    fb = mel_filterbank(cfg.n_mels, 512, FS, 0.0, FS / 2)
    win = np.hamming(400)
    for i in range(spec.n_frames):
        frame = audio.samples[i * 80:i * 80 + 400] * win
        oracle = np.log(fb @ _direct_dft_power(frame, 512) + cfg.log_floor)
        assert np.allclose(oracle, spec.values[i], atol=1e-8)
        assert int(np.argmax(oracle)) == nearest
    assert np.all(spec.values.argmax(axis=1) == nearest)


def test_short_audio_rejected():
    with pytest.raises(EmptyInputError):
        mel_spectrogram(AudioBuffer(np.zeros(399), FS), FeatureConfig.sad())


@settings(max_examples=60, deadline=None)
@given(n_samples=st.integers(0, 6000), frame_ms=st.sampled_from([25, 50]),
       chunk_frames=st.integers(2, 40), shift_frames=st.integers(1, 40))
def test_frame_and_chunk_counts(n_samples, frame_ms, chunk_frames, shift_frames):
    shift_frames = min(shift_frames, chunk_frames)
    cfg = FeatureConfig(frame_len_ms=frame_ms, chunk_len_ms=10.0 * chunk_frames,
                        chunk_shift_ms=10.0 * shift_frames, n_mels=8)
    frame = frame_ms * 8
    expected_frames = (n_samples - frame) // 80 + 1 if n_samples >= frame else 0
    assert frame_count(n_samples, frame, 80) == expected_frames
    if expected_frames == 0:
        return
    spec = mel_spectrogram(AudioBuffer(np.random.default_rng(n_samples).standard_normal(n_samples), FS), cfg)
    assert spec.n_frames == expected_frames
    batch = chunk(spec, cfg)
    want = (expected_frames - chunk_frames) // shift_frames + 1 if expected_frames >= chunk_frames else 0
    assert len(batch) == want == chunk_count(expected_frames, chunk_frames, shift_frames)
    assert np.allclose(batch.chunk_start_times_s, np.arange(want) * shift_frames * 0.01)


def test_chunk_arithmetic_and_identity_slice():
    values = np.random.default_rng(1).standard_normal((96, 40))
    batch = chunk(MelSpectrogram(values, 10.0, 50.0), FeatureConfig.sad())
    assert batch.chunks.shape == (5, 32, 40)
    assert np.array_equal(batch.chunks[0], values[:32])


def test_chunks_reproduce_source_rows():
    values = np.random.default_rng(2).standard_normal((200, 40))
    cfg = FeatureConfig.sad()
    batch = chunk(MelSpectrogram(values, 10.0, 50.0), cfg)
    last = (len(batch) - 1) * 16 + 32
    for r in range(last):
        for k in range(len(batch)):
            if k * 16 <= r < k * 16 + 32:
                assert np.array_equal(batch.chunks[k, r - k * 16], values[r])


def test_too_few_frames_gives_empty_batch():
    batch = chunk(MelSpectrogram(np.zeros((31, 40)), 10.0, 50.0), FeatureConfig.sad())
    assert batch.chunks.shape == (0, 32, 40)


def test_filterbank_coverage_and_shape():
    for n_fft, fs in ((512, 8000), (256, 8000), (512, 16000)):
        fb = mel_filterbank(40, n_fft, fs, 0.0, fs / 2)
        freqs = np.arange(n_fft // 2 + 1) * fs / n_fft
        inner = (freqs > 0) & (freqs < fs / 2)
        assert np.all(fb.sum(axis=0)[inner] > 0)
        assert np.all(fb >= 0)
        for row in fb:
            nz = np.flatnonzero(row)
            peak = int(np.argmax(row))
            assert np.all(np.diff(row[nz[0]:peak + 1]) >= 0)
            assert np.all(np.diff(row[peak:nz[-1] + 1]) <= 0)


def test_amplitude_scaling_is_additive_in_log_domain():
    cfg = FeatureConfig.sad(log_floor=0.0)
    x = np.random.default_rng(3).standard_normal(4000) * 0.1
    base = mel_spectrogram(AudioBuffer(x, FS), cfg).values
    for alpha in (0.01, 0.5, 3.0):
        scaled = mel_spectrogram(AudioBuffer(alpha * x, FS), cfg).values
        assert np.allclose(scaled - base, 2 * np.log(alpha), atol=1e-9)


def _batch(values):
    return chunk(MelSpectrogram(values, 10.0, 50.0), FeatureConfig.sad())


def test_normalize_with_own_stats():
    batch = _batch(np.random.default_rng(4).normal(3.0, 2.0, (300, 40)))
    stats = compute_norm_stats(batch.chunks)
    out = per_feature_normalize(batch, stats).chunks.reshape(-1, 40)
    assert np.allclose(out.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(out.std(axis=0), 1, atol=1e-9)


def test_identity_stats():
    batch = _batch(np.random.default_rng(5).standard_normal((100, 40)))
    out = per_feature_normalize(batch, NormStats.identity(40))
    assert np.array_equal(out.chunks, batch.chunks)


def test_constant_band_normalizes_to_zero():
    values = np.random.default_rng(6).standard_normal((100, 40))
    values[:, 7] = 4.2
    batch = _batch(values)
    stats = compute_norm_stats(batch.chunks)
    assert stats.std[7] == 1.0
    assert np.allclose(per_feature_normalize(batch, stats).chunks[..., 7], 0.0, atol=1e-12)


def test_chunk_index_matches_materialized_chunks():
    values = np.random.default_rng(7).standard_normal((120, 40))
    batch = _batch(values)
    idx = ChunkIndex([values], [(0, k * 16) for k in range(len(batch))], 32)
    assert len(idx) == len(batch)
    pick = np.array([3, 0, 2])
    assert np.array_equal(idx[pick], batch.chunks[pick])


def test_config_grid_validation():
    with pytest.raises(ValueError):
        FeatureConfig(chunk_len_ms=325.0).validate()
    with pytest.raises(ValueError):
        FeatureConfig(chunk_len_ms=160.0, chunk_shift_ms=320.0).validate()
    with pytest.raises(ValueError):
        FeatureConfig(fmax_hz=5000.0).validate(8000)
    assert FeatureConfig.sid().chunk_frames == 128
    assert FeatureConfig.sid().shift_frames == 16
    assert FeatureConfig.sad().chunk_frames == 32


def test_feature_cache_roundtrip(tmp_path):
    values = np.random.default_rng(8).standard_normal((50, 40))
    p = tmp_path / "u.fsmel"
    save_features(p, MelSpectrogram(values, 10.0, 25.0, "u"))
    data = p.read_bytes()
    assert data[:6] == b"FSMEL1"
    back = load_features(p)
    assert back.frame_hop_ms == 10.0
    assert np.array_equal(back.values, values.astype(np.float32).astype(np.float64))
    p.write_bytes(data[:-5])
    with pytest.raises(TruncationError):
        load_features(p)
    p.write_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(FormatError):
        load_features(p)
