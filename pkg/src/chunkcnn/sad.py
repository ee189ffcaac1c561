"""Speech activity detection: label alignment, inference, and DCF scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .audio import AudioBuffer
from .dsp import chunk, chunk_count, mel_spectrogram, normalize
from .errors import EmptyInputError, ScoringError, SegmentValidationError, TaskError
from .nn import CnnModel, forward
from .segments import NONSPEECH, SPEECH, Segment, SegmentList, merge_segments

SAD_CLASSES = [SPEECH, NONSPEECH]  # class 0 = speech, class 1 = non-speech
COLLAR_S = 0.250
SHORT_SEGMENT_S = 0.2
P_FN_WEIGHT = 0.75
P_FP_WEIGHT = 0.25
# Allowed mismatch between system and reference end times (TSV times carry ms precision).
COVERAGE_TOL = 1e-3
_TIE_TOL = 1e-9


def dcf(p_fn: float, p_fp: float) -> float:
    return P_FN_WEIGHT * p_fn + P_FP_WEIGHT * p_fp


# ---------------------------------------------------------------------------
# Training labels
# ---------------------------------------------------------------------------

def _speech_time_fn(ref: SegmentList):
    """Cumulative speech time and cumulative covered time as functions of t."""
    knots = [0.0]
    speech = [0.0]
    covered = [0.0]
    for seg in ref.segments:
        if seg.start > knots[-1]:
            knots.append(seg.start)
            speech.append(speech[-1])
            covered.append(covered[-1])
        knots.append(seg.end)
        speech.append(speech[-1] + (seg.duration if seg.label == SPEECH else 0.0))
        covered.append(covered[-1] + seg.duration)
    k = np.asarray(knots)
    return (lambda t: np.interp(t, k, speech)), (lambda t: np.interp(t, k, covered))


def align_labels(ref: SegmentList, n_chunks: int, shift_s: float) -> np.ndarray:
    """Class index per chunk: the majority reference label over its leading shift region.

    Region k is ``[k*shift_s, (k+1)*shift_s)``. An exact tie goes to speech.
    """
    ref.validate(tiling=True)
    if n_chunks == 0:
        return np.zeros(0, dtype=np.int64)
    starts = np.arange(n_chunks) * shift_s
    ends = np.arange(1, n_chunks + 1) * shift_s
    speech_at, covered_at = _speech_time_fn(ref)
    sp = speech_at(ends) - speech_at(starts)
    ns = (covered_at(ends) - covered_at(starts)) - sp
    return np.where(sp >= ns - _TIE_TOL, 0, 1).astype(np.int64)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def regions_to_segments(region_labels: Sequence[int], shift_s: float, duration_s: float,
                        file_id: str = "") -> SegmentList:
    """Label ``[k*shift, (k+1)*shift)`` with class ``region_labels[k]`` and merge runs.

    The tail past the last region inherits its label; with no regions the whole
    file is non-speech.
    """
    labels = [SAD_CLASSES[int(c)] for c in region_labels]
    if not labels:
        return SegmentList(file_id, [Segment(0.0, duration_s, NONSPEECH)], duration_s)
    segs = []
    for k, label in enumerate(labels):
        start = k * shift_s
        end = duration_s if k == len(labels) - 1 else min((k + 1) * shift_s, duration_s)
        if end > start:
            segs.append(Segment(start, end, label))
    return SegmentList(file_id, merge_segments(segs), duration_s)


def remove_short_segments(sl: SegmentList, min_duration_s: float) -> SegmentList:
    """Relabel interior segments shorter than ``min_duration_s`` (shortest first) and merge."""
    segs = merge_segments(sl.segments)
    while len(segs) > 2:
        interior = [(s.duration, i) for i, s in enumerate(segs[1:-1], 1) if s.duration < min_duration_s]
        if not interior:
            break
        _, i = min(interior)
        s = segs[i]
        flipped = NONSPEECH if s.label == SPEECH else SPEECH
        segs = merge_segments(segs[:i] + [Segment(s.start, s.end, flipped)] + segs[i + 1:])
    return SegmentList(sl.file_id, segs, sl.file_duration_s)


def chunk_posteriors(model: CnnModel, audio: AudioBuffer) -> np.ndarray:
    cfg = model.feature_config
    spec = mel_spectrogram(audio, cfg)
    spec.values = normalize(spec.values, model.norm_stats)
    batch = chunk(spec, cfg)
    if len(batch) == 0:
        return np.zeros((0, model.n_classes))
    return forward(model, batch.chunks)


def infer_segments(model: CnnModel, audio: AudioBuffer, average_posteriors: bool = False,
                   min_segment_s: float = 0.0) -> SegmentList:
    """Speech/non-speech segmentation tiling ``[0, duration]``.

    Each chunk's argmax decides its leading shift region. With
    ``average_posteriors`` a region instead takes the mean posterior of the two
    chunks that overlap it.
    """
    if model.task != "sad":
        raise TaskError(f"model was trained for {model.task!r}, not 'sad'")
    post = chunk_posteriors(model, audio)
    if average_posteriors and len(post) > 1:
        post = post.copy()
        post[1:] = 0.5 * (post[1:] + post[:-1])
    regions = post.argmax(axis=1) if len(post) else []
    out = regions_to_segments(regions, model.feature_config.shift_s, audio.duration_seconds, audio.id)
    if min_segment_s > 0:
        out = remove_short_segments(out, min_segment_s)
    return out


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

@dataclass
class FileScore:
    file_id: str
    fn_s: float
    fp_s: float
    scored_speech_s: float
    scored_nonspeech_s: float
    short_segment_count: int

    @property
    def p_fn(self) -> float:
        return self.fn_s / self.scored_speech_s if self.scored_speech_s > 0 else 0.0

    @property
    def p_fp(self) -> float:
        return self.fp_s / self.scored_nonspeech_s if self.scored_nonspeech_s > 0 else 0.0

    @property
    def dcf(self) -> float:
        return dcf(self.p_fn, self.p_fp)


@dataclass
class DcfReport:
    p_fn: float
    p_fp: float
    dcf: float
    fn_s: float
    fp_s: float
    scored_speech_s: float
    scored_nonspeech_s: float
    per_file: dict[str, FileScore] = field(default_factory=dict)

    @property
    def short_segment_count(self) -> dict[str, int]:
        return {k: v.short_segment_count for k, v in self.per_file.items()}


def transitions(ref: SegmentList) -> list[float]:
    """Interior times where the reference label changes."""
    segs = merge_segments(ref.segments)
    return [a.end for a, b in zip(segs, segs[1:]) if a.label != b.label]


def short_segment_count(ref: SegmentList, threshold_s: float = SHORT_SEGMENT_S) -> int:
    return sum(1 for s in merge_segments(ref.segments) if s.duration < threshold_s)


def _label_at(segs: list[Segment], points: np.ndarray) -> np.ndarray:
    """1 where the segment covering each point is speech."""
    ends = np.array([s.end for s in segs])
    is_speech = np.array([s.label == SPEECH for s in segs] + [segs[-1].label == SPEECH])
    return is_speech[np.searchsorted(ends, points, side="right")]


def score_file(ref: SegmentList, sys: SegmentList, collar_s: float = COLLAR_S) -> FileScore:
    """Exact interval-arithmetic error times for one file."""
    try:
        ref.validate(tiling=True)
        if not sys.segments:
            raise ScoringError(f"{ref.file_id}: system output is empty")
        sys.validate(tiling=False)
    except SegmentValidationError as exc:
        raise ScoringError(f"{ref.file_id}: {exc}") from None
    duration = ref.file_duration_s
    if abs(sys.segments[0].start) > COVERAGE_TOL or abs(sys.segments[-1].end - duration) > COVERAGE_TOL:
        raise ScoringError(
            f"{ref.file_id}: system covers [{sys.segments[0].start:.3f},{sys.segments[-1].end:.3f}], "
            f"reference covers [0,{duration:.3f}]")
    for a, b in zip(sys.segments, sys.segments[1:]):
        if b.start - a.end > COVERAGE_TOL:
            raise ScoringError(f"{ref.file_id}: system gap [{a.end:.3f},{b.start:.3f})")

    bounds = transitions(ref)
    excluded = []
    for b in bounds:
        lo, hi = max(0.0, b - collar_s), min(duration, b + collar_s)
        if excluded and lo <= excluded[-1][1]:
            excluded[-1][1] = max(excluded[-1][1], hi)
        else:
            excluded.append([lo, hi])

    cuts = {0.0, duration}
    cuts.update(s.end for s in ref.segments)
    cuts.update(min(max(s.end, 0.0), duration) for s in sys.segments)
    for lo, hi in excluded:
        cuts.update((lo, hi))
    cuts = np.array(sorted(c for c in cuts if 0.0 <= c <= duration))
    lengths = np.diff(cuts)
    mids = 0.5 * (cuts[:-1] + cuts[1:])

    keep = np.ones(len(mids), dtype=bool)
    if excluded:
        ex = np.asarray(excluded)
        j = np.searchsorted(ex[:, 0], mids, side="right") - 1
        keep = ~((j >= 0) & (mids < ex[np.maximum(j, 0), 1]))
    ref_sp = _label_at(ref.segments, mids)
    sys_sp = _label_at(sys.segments, mids)
    w = np.where(keep, lengths, 0.0)
    return FileScore(
        ref.file_id,
        fn_s=math.fsum(w[ref_sp & ~sys_sp]),
        fp_s=math.fsum(w[~ref_sp & sys_sp]),
        scored_speech_s=math.fsum(w[ref_sp]),
        scored_nonspeech_s=math.fsum(w[~ref_sp]),
        short_segment_count=short_segment_count(ref),
    )


def score_dcf(refs: Mapping[str, SegmentList], syss: Mapping[str, SegmentList],
              collar_s: float = COLLAR_S) -> DcfReport:
    """Pooled DCF over every system file; error times are summed before dividing."""
    missing = [f for f in syss if f not in refs]
    if missing:
        raise ScoringError(f"no reference for system file(s): {', '.join(sorted(missing))}")
    absent = [f for f in refs if f not in syss]
    if absent:
        raise ScoringError(f"no system output for reference file(s): {', '.join(sorted(absent))}")
    per_file = {fid: score_file(refs[fid], syss[fid], collar_s) for fid in refs}
    fn = math.fsum(f.fn_s for f in per_file.values())
    fp = math.fsum(f.fp_s for f in per_file.values())
    sp = math.fsum(f.scored_speech_s for f in per_file.values())
    ns = math.fsum(f.scored_nonspeech_s for f in per_file.values())
    p_fn = fn / sp if sp > 0 else 0.0
    p_fp = fp / ns if ns > 0 else 0.0
    return DcfReport(p_fn, p_fp, dcf(p_fn, p_fp), fn, fp, sp, ns, per_file)


def sad_report(refs: Mapping[str, SegmentList], syss: Mapping[str, SegmentList],
               collar_s: float = COLLAR_S) -> list[tuple[str, float, int]]:
    """Rows of ``(file_id, dcf, short_segment_count)`` for each reference file."""
    report = score_dcf(refs, syss, collar_s)
    return [(fid, f.dcf, f.short_segment_count) for fid, f in report.per_file.items()]


def write_sad_report(path: str | Path, rows: Iterable[tuple[str, float, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("file_id\tdcf\tshort_segment_count\n")
        for fid, d, n in rows:
            f.write(f"{fid}\t{d:.6f}\t{n}\n")


def training_chunks(refs: Mapping[str, SegmentList], spectrograms: Mapping[str, np.ndarray],
                    chunk_frames: int, shift_frames: int, shift_s: float):
    """``(spectrogram index, start row)`` pairs and labels for every file's chunks."""
    starts, labels = [], []
    for s, (fid, values) in enumerate(spectrograms.items()):
        if fid not in refs:
            raise EmptyInputError(f"no reference segments for {fid}")
        n = chunk_count(len(values), chunk_frames, shift_frames)
        starts += [(s, k * shift_frames) for k in range(n)]
        labels.append(align_labels(refs[fid], n, shift_s))
    return starts, np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)

