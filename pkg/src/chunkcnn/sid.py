"""Speaker identification: chunk hypotheses, utterance voting, top-N scoring."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .audio import AudioBuffer
from .dsp import ChunkBatch, FeatureConfig, MelSpectrogram, chunk, chunk_count, mel_spectrogram, normalize
from .errors import EmptyInputError, FormatError, ShapeError, TaskError
from .nn import CnnModel, forward

log = logging.getLogger(__name__)

TOP_K = 5


@dataclass
class RankedHypothesis:
    per_chunk: list[list[tuple[str, float]]]
    final: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def speakers(self) -> list[str]:
        return [spk for spk, _, _ in self.final]


@dataclass
class SidTrial:
    utterance_id: str
    reference_speaker: str
    system_topn: tuple[str, ...] | None
    utterance_duration_s: float = 0.0

    def hit(self, n: int = TOP_K) -> bool:
        return bool(self.system_topn) and self.reference_speaker in self.system_topn[:n]


def wrap_pad(values: np.ndarray, n_rows: int) -> np.ndarray:
    """Repeat rows cyclically until there are at least ``n_rows``."""
    if len(values) >= n_rows:
        return values
    if len(values) == 0:
        raise EmptyInputError("cannot pad an empty spectrogram")
    return values[np.arange(n_rows) % len(values)]


def sid_spectrogram(audio: AudioBuffer, cfg: FeatureConfig) -> MelSpectrogram:
    """Mel spectrogram wrap-padded to at least one chunk."""
    spec = mel_spectrogram(audio, cfg)
    spec.values = wrap_pad(spec.values, cfg.chunk_frames)
    return spec


def sid_chunks(audio: AudioBuffer, cfg: FeatureConfig | None = None) -> ChunkBatch:
    """Chunks on the SID grid; utterances shorter than a chunk are wrap-padded."""
    cfg = cfg or FeatureConfig.sid()
    return chunk(sid_spectrogram(audio, cfg), cfg)


def top_candidates(posteriors: np.ndarray, labels: Sequence[str], k: int = TOP_K) -> list[list[tuple[str, float]]]:
    """Per row, the ``k`` highest posteriors; ties go to the lower class index."""
    k = min(k, posteriors.shape[1])
    order = np.argsort(-posteriors, axis=1, kind="stable")[:, :k]
    return [[(labels[c], float(row[c])) for c in idx] for row, idx in zip(posteriors, order)]


def hypothesize(model: CnnModel, batch: ChunkBatch, k: int = TOP_K) -> list[list[tuple[str, float]]]:
    """Chunk-level top-``k`` speaker lists for un-normalized chunks."""
    if model.task != "sid":
        raise TaskError(f"model was trained for {model.task!r}, not 'sid'")
    if batch.chunks.shape[1:] != tuple(model.input_geometry):
        raise ShapeError(f"chunk geometry {batch.chunks.shape[1:]} does not match model {model.input_geometry}")
    post = forward(model, normalize(batch.chunks, model.norm_stats))
    return top_candidates(post, model.class_labels, k)


def vote(per_chunk: Sequence[Sequence[tuple[str, float]]], use_posteriors: bool = True,
         k: int = TOP_K) -> list[tuple[str, int, float]]:
    """Utterance-level ranking from the bag of chunk hypotheses.

    Speakers are ordered by appearance count, then by summed posterior, then
    by id. With ``use_posteriors=False`` the posterior tie-break is skipped.
    """
    if not per_chunk:
        raise EmptyInputError("no chunk hypotheses to vote over")
    scores: dict[str, list[float]] = defaultdict(list)
    for hyps in per_chunk:
        for spk, p in hyps:
            scores[spk].append(p)
    # fsum makes the sums independent of chunk order
    tally = [(spk, len(ps), math.fsum(ps)) for spk, ps in scores.items()]
    if use_posteriors:
        tally.sort(key=lambda t: (-t[1], -t[2], t[0]))
    else:
        tally.sort(key=lambda t: (-t[1], t[0]))
    return tally[:k]


def identify(model: CnnModel, audio: AudioBuffer, use_posteriors: bool = True) -> RankedHypothesis:
    per_chunk = hypothesize(model, sid_chunks(audio, model.feature_config))
    return RankedHypothesis(per_chunk, vote(per_chunk, use_posteriors))


# ---------------------------------------------------------------------------
# Scoring and reports
# ---------------------------------------------------------------------------

def score_topn(trials: Sequence[SidTrial], n: int = TOP_K) -> float:
    """Fraction of trials whose reference speaker is among the first ``n`` candidates."""
    if not 1 <= n <= TOP_K:
        raise ValueError(f"n must be in 1..{TOP_K}")
    if not trials:
        raise ValueError("no trials to score")
    for t in trials:
        if not t.system_topn:
            log.warning("no system output for %s; counted as a miss", t.utterance_id)
    return sum(t.hit(n) for t in trials) / len(trials)


def topn_accuracies(trials: Sequence[SidTrial]) -> list[float]:
    """Accuracy for n = 1..5."""
    return [score_topn(trials, n) for n in range(1, TOP_K + 1)]


def make_trials(refs: Mapping[str, str], sys_out: Mapping[str, Sequence[str]],
                durations: Mapping[str, float] | None = None) -> list[SidTrial]:
    durations = durations or {}
    return [SidTrial(utt, spk, tuple(sys_out[utt]) if utt in sys_out else None, durations.get(utt, 0.0))
            for utt, spk in refs.items()]


def duration_bins(bin_s: float = 2.0, max_s: float = 20.0) -> list[tuple[float, float]]:
    n = int(round(max_s / bin_s))
    return [(i * bin_s, (i + 1) * bin_s) for i in range(n)]


def duration_binned_report(trials: Sequence[SidTrial], bin_s: float = 2.0, max_s: float = 20.0):
    """Rows ``(bin_label, hit_rate, miss_rate, count)`` for top-5 hits by test duration.

    The last bin is closed and absorbs longer utterances; empty bins carry
    ``None`` rates.
    """
    bins = duration_bins(bin_s, max_s)
    hits = [0] * len(bins)
    counts = [0] * len(bins)
    for t in trials:
        i = min(int(t.utterance_duration_s // bin_s), len(bins) - 1)
        counts[i] += 1
        hits[i] += t.hit(TOP_K)
    rows = []
    for i, (lo, hi) in enumerate(bins):
        label = f"[{lo:g},{hi:g}]" if i == len(bins) - 1 else f"[{lo:g},{hi:g})"
        if counts[i]:
            rate = hits[i] / counts[i]
            rows.append((label, rate, 1.0 - rate, counts[i]))
        else:
            rows.append((label, None, None, 0))
    return rows


def speaker_accuracy_report(trials: Sequence[SidTrial], train_seconds: Mapping[str, float]):
    """Rows ``(speaker, train_seconds, n_trials, top5_accuracy)`` sorted by speaker."""
    by_spk: dict[str, list[bool]] = defaultdict(list)
    for t in trials:
        by_spk[t.reference_speaker].append(t.hit(TOP_K))
    rows = []
    for spk in sorted(set(by_spk) | set(train_seconds)):
        h = by_spk.get(spk, [])
        rows.append((spk, float(train_seconds.get(spk, 0.0)), len(h), (sum(h) / len(h)) if h else None))
    return rows


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def write_duration_report(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("bin\thit_rate\tmiss_rate\tcount\n")
        for label, hit, miss, n in rows:
            f.write(f"{label}\t{_fmt(hit)}\t{_fmt(miss)}\t{n}\n")


def write_speaker_report(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("speaker_id\ttrain_seconds\tn_trials\ttop5_accuracy\n")
        for spk, secs, n, acc in rows:
            f.write(f"{spk}\t{secs:.3f}\t{n}\t{_fmt(acc)}\n")


def write_system_output(path: str | Path, results: Iterable[tuple[str, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt, speakers in results:
            f.write("\t".join([utt, *speakers]) + "\n")


def read_system_output(path: str | Path) -> dict[str, tuple[str, ...]]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2 or len(parts) > TOP_K + 1:
                raise FormatError(f"{path}:{lineno}: expected utterance id and 1-{TOP_K} speakers")
            if len(set(parts[1:])) != len(parts) - 1:
                raise FormatError(f"{path}:{lineno}: duplicate speaker in ranked list")
            out[parts[0]] = tuple(parts[1:])
    return out


def training_chunks(spectrograms: Sequence[np.ndarray], chunk_frames: int, shift_frames: int):
    """``(spectrogram index, start row)`` for every chunk of every (padded) spectrogram."""
    starts = []
    for s, values in enumerate(spectrograms):
        n = chunk_count(len(values), chunk_frames, shift_frames)
        starts += [(s, k * shift_frames) for k in range(n)]
    return starts
