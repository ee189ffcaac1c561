"""Timed speech / non-speech segment lists and their TSV form.

TSV rows are ``file_id<TAB>start_s<TAB>end_s<TAB>label`` with ``label`` in
``{S, NS}``; times are written with millisecond precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .errors import FormatError, SegmentValidationError

SPEECH = "speech"
NONSPEECH = "nonspeech"
LABELS = (SPEECH, NONSPEECH)

_TO_TSV = {SPEECH: "S", NONSPEECH: "NS"}
_FROM_TSV = {v: k for k, v in _TO_TSV.items()}

# Seconds of slack allowed when checking that segments abut.
TILING_TOL = 1e-6


class Segment(NamedTuple):
    start: float
    end: float
    label: str

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class SegmentList:
    file_id: str
    segments: list[Segment] = field(default_factory=list)
    file_duration_s: float | None = None

    def __post_init__(self):
        if self.file_duration_s is None:
            self.file_duration_s = self.segments[-1].end if self.segments else 0.0

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def merged(self) -> "SegmentList":
        return SegmentList(self.file_id, merge_segments(self.segments), self.file_duration_s)

    def validate(self, tiling: bool = True) -> None:
        """Check ordering and, if ``tiling``, gap-free coverage of the file.

        Raises SegmentValidationError listing every offending interval.
        """
        problems = []
        for seg in self.segments:
            if seg.label not in LABELS:
                problems.append(f"[{seg.start:.3f},{seg.end:.3f}) bad label {seg.label!r}")
            if not seg.end > seg.start:
                problems.append(f"[{seg.start:.3f},{seg.end:.3f}) empty or reversed")
        for a, b in zip(self.segments, self.segments[1:]):
            if b.start < a.end - TILING_TOL:
                problems.append(f"[{a.start:.3f},{a.end:.3f}) overlaps [{b.start:.3f},{b.end:.3f})")
            elif tiling and b.start > a.end + TILING_TOL:
                problems.append(f"gap [{a.end:.3f},{b.start:.3f})")
        if tiling:
            if not self.segments:
                problems.append("no segments")
            else:
                if abs(self.segments[0].start) > TILING_TOL:
                    problems.append(f"gap [0.000,{self.segments[0].start:.3f})")
                end = self.segments[-1].end
                if abs(end - self.file_duration_s) > TILING_TOL:
                    problems.append(
                        f"coverage ends at {end:.3f}, file lasts {self.file_duration_s:.3f}"
                    )
        if problems:
            raise SegmentValidationError(f"{self.file_id}: " + "; ".join(problems))


def merge_segments(segments: Iterable[Segment]) -> list[Segment]:
    """Merge runs of adjacent segments that carry the same label."""
    out: list[Segment] = []
    for seg in segments:
        if out and out[-1].label == seg.label and abs(out[-1].end - seg.start) <= TILING_TOL:
            out[-1] = Segment(out[-1].start, seg.end, seg.label)
        else:
            out.append(Segment(*seg))
    return out


def read_segments(path: str | Path) -> dict[str, SegmentList]:
    """Read a segment TSV into per-file lists (file order preserved)."""
    out: dict[str, SegmentList] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            file_id, start, end, label = parts
            if label not in _FROM_TSV:
                raise FormatError(f"{path}:{lineno}: label must be S or NS, got {label!r}")
            try:
                seg = Segment(float(start), float(end), _FROM_TSV[label])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            out.setdefault(file_id, SegmentList(file_id, [])).segments.append(seg)
    for sl in out.values():
        sl.segments.sort(key=lambda s: s.start)
        sl.file_duration_s = sl.segments[-1].end
    return out


def write_segments(path: str | Path, lists: Iterable[SegmentList]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sl in lists:
            for seg in sl.segments:
                f.write(f"{sl.file_id}\t{seg.start:.3f}\t{seg.end:.3f}\t{_TO_TSV[seg.label]}\n")
