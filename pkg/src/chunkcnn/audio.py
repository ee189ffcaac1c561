"""PCM WAV input/output and the synthetic labeled corpus generator."""

from __future__ import annotations

import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ChunkCNNError, FormatError, TruncationError, UnsupportedFormatError
from .segments import NONSPEECH, SPEECH, Segment, SegmentList, write_segments

SAMPLE_RATE_HZ = 8000
PCM_SCALE = 32768.0
ROLES = ("train", "dev", "eval")


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate_hz


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def read_wav(path: str | Path) -> AudioBuffer:
    """Read a mono 16-bit PCM RIFF/WAVE file.

    Samples are scaled by 1/32768, so -32768 maps to exactly -1.0.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise TruncationError(f"{path}: file is {len(data)} bytes, shorter than the RIFF header")
    if data[0:4] != b"RIFF":
        raise FormatError(f"{path}: bad RIFF chunk id {data[0:4]!r}")
    if data[8:12] != b"WAVE":
        raise FormatError(f"{path}: bad RIFF form type {data[8:12]!r}, expected b'WAVE'")

    fmt = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if chunk_id == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise FormatError(f"{path}: fmt chunk size {size} too small")
            fmt = struct.unpack_from("<HHIIHH", data, body)
            audio_format, channels, rate, byte_rate, block_align, bits = fmt
            if audio_format != 1:
                raise UnsupportedFormatError(
                    f"{path}: audio_format={audio_format}, only PCM (1) is supported")
            if channels != 1:
                raise UnsupportedFormatError(f"{path}: channels={channels}, only mono is supported")
            if bits != 16:
                raise UnsupportedFormatError(
                    f"{path}: bits_per_sample={bits}, only 16-bit is supported")
            if rate == 0:
                raise FormatError(f"{path}: sample_rate=0 in fmt chunk")
            if block_align != 2:
                raise FormatError(f"{path}: block_align={block_align}, expected 2")
        elif chunk_id == b"data":
            if fmt is None:
                raise FormatError(f"{path}: data chunk precedes fmt chunk")
            if body + size > len(data):
                raise TruncationError(
                    f"{path}: data chunk declares {size} bytes at offset {body} "
                    f"but file ends at byte {len(data)}")
            if size % 2:
                raise FormatError(f"{path}: data chunk size {size} is not a whole number of samples")
            pcm = np.frombuffer(data, dtype="<i2", count=size // 2, offset=body)
            return AudioBuffer(pcm.astype(np.float64) / PCM_SCALE, fmt[2], path.stem)
        pos = body + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: no fmt chunk")
    raise FormatError(f"{path}: no data chunk")


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    """Write ``audio`` as mono 16-bit PCM. Values are rounded and clipped."""
    pcm = np.clip(np.round(audio.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    rate = audio.sample_rate_hz
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, rate, rate * 2, 2, 16,
        b"data", len(payload),
    )
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def default_train_seconds(n_speakers: int, lo: float = 60.0, hi: float = 500.0) -> tuple[float, ...]:
    """Geometrically spaced per-speaker training durations from ``lo`` to ``hi``."""
    return tuple(float(round(x)) for x in np.geomspace(lo, hi, n_speakers))


@dataclass
class SynthSpec:
    """Parameters of a synthetic corpus; ``seed`` determines every sample."""

    n_speakers: int = 8
    per_speaker_train_seconds: float | Sequence[float] | None = None
    utterance_duration_range: tuple[float, float] = (2.0, 20.0)
    test_duration_range: tuple[float, float] = (1.0, 20.0)
    n_dev_utterances: int = 32
    n_eval_utterances: int = 80
    snr_db_range: tuple[float, float] = (5.0, 20.0)
    seed: int = 7
    sample_rate_hz: int = SAMPLE_RATE_HZ
    tasks: tuple[str, ...] = ("sad", "sid")
    sad_files: tuple[int, int, int] = (60, 10, 10)
    sad_file_seconds: float = 60.0
    sad_burst_range: tuple[float, float] = (1.0, 3.0)
    sad_gap_range: tuple[float, float] = (0.5, 2.0)
    sad_short_burst_prob: float = 0.0
    sad_voices: int = 16
    min_chunk_seconds: float = 1.28

    def __post_init__(self):
        if self.per_speaker_train_seconds is None:
            self.per_speaker_train_seconds = default_train_seconds(self.n_speakers)
        self.validate()

    def train_seconds(self) -> list[float]:
        per = self.per_speaker_train_seconds
        if np.isscalar(per):
            return [float(per)] * self.n_speakers
        return [float(x) for x in per]

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise ValueError(f"n_speakers must be >= 2, got {self.n_speakers}")
        if len(self.train_seconds()) != self.n_speakers:
            raise ValueError("per_speaker_train_seconds needs one entry per speaker")
        lo, hi = self.utterance_duration_range
        if lo < self.min_chunk_seconds:
            raise ValueError(
                f"utterance_duration_range min {lo}s is shorter than one chunk "
                f"({self.min_chunk_seconds}s)")
        if hi < 2 * lo:
            raise ValueError("utterance_duration_range max must be at least twice its min")
        for name in ("test_duration_range", "snr_db_range", "sad_burst_range", "sad_gap_range"):
            a, b = getattr(self, name)
            if a > b:
                raise ValueError(f"{name} is reversed: {a} > {b}")
        if self.test_duration_range[0] <= 0 or self.sad_burst_range[0] <= 0 or self.sad_gap_range[0] <= 0:
            raise ValueError("duration ranges must be positive")
        if self.sample_rate_hz <= 0 or self.sample_rate_hz % 1000:
            raise ValueError("sample_rate_hz must be a positive multiple of 1000")
        unknown = set(self.tasks) - {"sad", "sid"}
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")


class ManifestEntry(NamedTuple):
    file_id: str
    path: str
    duration_s: float
    role: str


@dataclass(frozen=True)
class Voice:
    """Harmonic source with one two-pole resonance and a spectral tilt."""

    f0_hz: float
    resonance_hz: float
    bandwidth_hz: float
    tilt: float
    syllable_rate_hz: float


@dataclass
class _RenderJob:
    path: Path
    n_samples: int
    sample_rate_hz: int
    seed: tuple[int, ...]
    snr_db: float
    # (start_sample, end_sample, voice) per speech stretch
    speech: list[tuple[int, int, Voice]] = field(default_factory=list)
    gaps: list[tuple[int, int]] = field(default_factory=list)


def make_voices(n: int, rng: np.random.Generator) -> list[Voice]:
    """Draw ``n`` voices with fundamentals stratified over 80-300 Hz."""
    edges = np.linspace(80.0, 300.0, n + 1)
    f0 = rng.uniform(edges[:-1], edges[1:])
    f0 = f0[rng.permutation(n)]
    res_edges = np.linspace(400.0, 2600.0, n + 1)
    res = rng.uniform(res_edges[:-1], res_edges[1:])[rng.permutation(n)]
    return [
        Voice(
            f0_hz=float(f0[i]),
            resonance_hz=float(res[i]),
            bandwidth_hz=float(rng.uniform(80.0, 250.0)),
            tilt=float(rng.uniform(0.4, 1.4)),
            syllable_rate_hz=float(rng.uniform(3.0, 6.0)),
        )
        for i in range(n)
    ]


def _resonance_gain(freq: np.ndarray, voice: Voice, fs: int) -> np.ndarray:
    r = math.exp(-math.pi * voice.bandwidth_hz / fs)
    theta = 2 * math.pi * voice.resonance_hz / fs
    z1 = np.exp(-1j * 2 * np.pi * freq / fs)
    return 1.0 / np.abs(1 - 2 * r * math.cos(theta) * z1 + r * r * z1 * z1)


def render_voice(voice: Voice, n_samples: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Voiced stretch: harmonic series, slow f0 drift, syllabic amplitude modulation."""
    t = np.arange(n_samples) / fs
    drift = 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(voice.f0_hz * drift) / fs
    n_harm = max(1, int((fs / 2) / (voice.f0_hz * 1.05)))
    h = np.arange(1, n_harm + 1)
    amps = h ** (-voice.tilt) * _resonance_gain(h * voice.f0_hz, voice, fs)
    amps /= np.sqrt(np.sum(amps ** 2))
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    out = np.zeros(n_samples)
    for k in range(n_harm):
        out += amps[k] * np.sin(h[k] * phase + offsets[k])
    env = 0.35 + 0.65 * (0.5 - 0.5 * np.cos(2 * np.pi * voice.syllable_rate_hz * t + rng.uniform(0, 2 * np.pi)))
    return out * env


def pink_noise(n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS noise with a 1/f power spectrum."""
    if n_samples == 0:
        return np.zeros(0)
    spec = np.fft.rfft(rng.standard_normal(n_samples))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    noise = np.fft.irfft(spec / np.sqrt(f), n_samples)
    return noise / np.sqrt(np.mean(noise ** 2))


def band_noise(n_samples: int, lo_hz: float, hi_hz: float, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS white noise restricted to [lo_hz, hi_hz]."""
    spec = np.fft.rfft(rng.standard_normal(n_samples))
    f = np.fft.rfftfreq(n_samples, 1.0 / fs)
    spec[(f < lo_hz) | (f > hi_hz)] = 0
    noise = np.fft.irfft(spec, n_samples)
    rms = np.sqrt(np.mean(noise ** 2))
    return noise / rms if rms > 0 else noise


def _render(job: _RenderJob) -> None:
    fs = job.sample_rate_hz
    rng = np.random.default_rng(np.random.SeedSequence(job.seed))
    speech = np.zeros(job.n_samples)
    mask = np.zeros(job.n_samples, dtype=bool)
    for a, b, voice in job.speech:
        speech[a:b] = render_voice(voice, b - a, fs, rng)
        mask[a:b] = True
    speech_power = float(np.mean(speech[mask] ** 2)) if mask.any() else 0.01
    noise_rms = math.sqrt(speech_power / 10 ** (job.snr_db / 10))
    mix = speech + noise_rms * pink_noise(job.n_samples, rng)
    # Non-speech distractors: band-limited noise events inside some gaps.
    for a, b in job.gaps:
        if b - a > fs // 10 and rng.random() < 0.5:
            lo = rng.uniform(100.0, fs / 4)
            hi = min(fs / 2, lo + rng.uniform(300.0, 1500.0))
            mix[a:b] += noise_rms * rng.uniform(1.0, 3.0) * band_noise(b - a, lo, hi, fs, rng)
    peak = np.max(np.abs(mix)) if job.n_samples else 0.0
    if peak > 0:
        mix *= 0.9 / peak
    write_wav(job.path, AudioBuffer(mix, fs, job.path.stem))


def _ms(rng: np.random.Generator, lo_s: float, hi_s: float) -> int:
    return int(round(rng.uniform(lo_s, hi_s) * 1000))


def _plan_sad_file(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int, str]]:
    """Alternating gap/burst layout in integer milliseconds tiling the file."""
    total = int(round(spec.sad_file_seconds * 1000))
    out = []
    t = 0
    speech = bool(rng.integers(2))
    while t < total:
        if speech:
            d = _ms(rng, *spec.sad_burst_range)
            pieces = [(d, SPEECH)]
        else:
            d = _ms(rng, *spec.sad_gap_range)
            pieces = [(d, NONSPEECH)]
            if d >= 500 and rng.random() < spec.sad_short_burst_prob:
                g1 = (d - 100) // 2
                pieces = [(g1, NONSPEECH), (100, SPEECH), (d - 100 - g1, NONSPEECH)]
        for dur, label in pieces:
            end = min(total, t + dur)
            if end > t:
                out.append((t, end, label))
            t = end
        speech = not speech
    return out


def _split_duration(target_ms: int, lo_ms: int, hi_ms: int, rng: np.random.Generator) -> list[int]:
    """Utterance lengths within [lo, hi] summing exactly to ``target_ms``."""
    if target_ms <= hi_ms:
        return [target_ms]
    out = []
    remaining = target_ms
    while remaining > hi_ms + lo_ms:
        d = int(rng.integers(lo_ms, hi_ms + 1))
        out.append(d)
        remaining -= d
    if remaining <= hi_ms:
        out.append(remaining)
    else:
        half = remaining // 2
        out += [half, remaining - half]
    return out


def synth_corpus(spec: SynthSpec, out_dir: str | Path, workers: int = 1) -> list[ManifestEntry]:
    """Generate WAV files, label TSVs and ``manifest.tsv`` under ``out_dir``.

    Layout (paths relative to ``out_dir``)::

        manifest.tsv                 file_id, path, duration_s, role
        sad/<role>/<file_id>.wav     SAD audio; labels in sad_<role>.tsv
        sid/<role>/<file_id>.wav     SID audio; labels in sid_<role>.tsv
    """
    out_dir = Path(out_dir)
    fs = spec.sample_rate_hz
    spms = fs // 1000
    manifest: list[ManifestEntry] = []
    jobs: list[_RenderJob] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for role in ROLES:
            if "sad" in spec.tasks:
                (out_dir / "sad" / role).mkdir(parents=True, exist_ok=True)
            if "sid" in spec.tasks:
                (out_dir / "sid" / role).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ChunkCNNError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    def snr(rng):
        return float(rng.uniform(*spec.snr_db_range))

    if "sad" in spec.tasks:
        pool = make_voices(spec.sad_voices, np.random.default_rng([spec.seed, 1]))
        for r, role in enumerate(ROLES):
            labels = []
            for i in range(spec.sad_files[r]):
                file_id = f"sad_{role}_{i:03d}"
                rng = np.random.default_rng([spec.seed, 2, r, i])
                layout = _plan_sad_file(spec, rng)
                job = _RenderJob(out_dir / "sad" / role / f"{file_id}.wav", layout[-1][1] * spms, fs,
                                 (spec.seed, 3, r, i), snr(rng))
                for a, b, label in layout:
                    if label == SPEECH:
                        job.speech.append((a * spms, b * spms, pool[int(rng.integers(len(pool)))]))
                    else:
                        job.gaps.append((a * spms, b * spms))
                jobs.append(job)
                segs = [Segment(a / 1000, b / 1000, label) for a, b, label in layout]
                labels.append(SegmentList(file_id, segs, layout[-1][1] / 1000))
                manifest.append(ManifestEntry(file_id, f"sad/{role}/{file_id}.wav", layout[-1][1] / 1000, role))
            write_segments(out_dir / f"sad_{role}.tsv", labels)

    if "sid" in spec.tasks:
        voices = make_voices(spec.n_speakers, np.random.default_rng([spec.seed, 11]))
        speakers = [f"spk{k:02d}" for k in range(spec.n_speakers)]
        lo_ms, hi_ms = (int(round(x * 1000)) for x in spec.utterance_duration_range)
        rows: dict[str, list[tuple[str, str]]] = {role: [] for role in ROLES}
        for k, seconds in enumerate(spec.train_seconds()):
            rng = np.random.default_rng([spec.seed, 12, k])
            for j, d in enumerate(_split_duration(int(round(seconds * 1000)), lo_ms, hi_ms, rng)):
                file_id = f"sid_train_{speakers[k]}_{j:04d}"
                jobs.append(_RenderJob(out_dir / "sid" / "train" / f"{file_id}.wav", d * spms, fs,
                                       (spec.seed, 13, k, j), snr(rng), [(0, d * spms, voices[k])]))
                rows["train"].append((file_id, speakers[k]))
                manifest.append(ManifestEntry(file_id, f"sid/train/{file_id}.wav", d / 1000, "train"))
        for r, (role, count) in enumerate((("dev", spec.n_dev_utterances), ("eval", spec.n_eval_utterances))):
            rng = np.random.default_rng([spec.seed, 14, r])
            who = rng.permutation(np.arange(count) % spec.n_speakers)
            for j in range(count):
                k = int(who[j])
                d = _ms(rng, *spec.test_duration_range)
                file_id = f"sid_{role}_{j:04d}"
                jobs.append(_RenderJob(out_dir / "sid" / role / f"{file_id}.wav", d * spms, fs,
                                       (spec.seed, 15, r, j), snr(rng), [(0, d * spms, voices[k])]))
                rows[role].append((file_id, speakers[k]))
                manifest.append(ManifestEntry(file_id, f"sid/{role}/{file_id}.wav", d / 1000, role))
        for role in ROLES:
            write_speaker_labels(out_dir / f"sid_{role}.tsv", rows[role])

    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                list(ex.map(_render, jobs, chunksize=4))
        else:
            for job in jobs:
                _render(job)
    except OSError as exc:
        raise ChunkCNNError(f"cannot write corpus file: {exc}") from exc
    write_manifest(out_dir / "manifest.tsv", manifest)
    return manifest


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            f.write(f"{e.file_id}\t{e.path}\t{e.duration_s:.3f}\t{e.role}\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4 or parts[3] not in ROLES:
                raise FormatError(f"{path}:{lineno}: malformed manifest row")
            out.append(ManifestEntry(parts[0], parts[1], float(parts[2]), parts[3]))
    return out


def write_speaker_labels(path: str | Path, rows: Sequence[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt, spk in rows:
            f.write(f"{utt}\t{spk}\n")


def read_speaker_labels(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected utterance_id<TAB>speaker_id")
            out[parts[0]] = parts[1]
    return out
