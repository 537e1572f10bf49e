"""Recording data model and the text formats shared by every stage.

Embedding files hold one segment per line::

    <onset> <duration> <v1> ... <vD>

with ``#`` comment lines ignored. RTTM output uses the usual ten-field
``SPEAKER`` records with times printed to three decimals.
"""

from __future__ import annotations

import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# 9 significant digits keeps the text round-trip below 1e-7 relative error.
NUM_FMT = "{:.9g}"


class FormatError(ValueError):
    """Raised when an input file does not follow its expected layout."""

    def __init__(self, path, lineno: int | None, message: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True, order=True)
class SegmentSpan:
    onset: float
    duration: float

    def __post_init__(self):
        if not (math.isfinite(self.onset) and math.isfinite(self.duration)):
            raise ValueError(f"non-finite segment span ({self.onset}, {self.duration})")
        if self.onset < 0:
            raise ValueError(f"segment onset must be >= 0, got {self.onset}")
        if self.duration <= 0:
            raise ValueError(f"segment duration must be > 0, got {self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class RecordingEmbeddings:
    """One recording: a segment timeline and an ``N x D`` embedding matrix."""

    recording_id: str
    segments: list[SegmentSpan]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if len(self.segments) == 0:
            raise ValueError(f"recording {self.recording_id!r} has no segments")
        if self.matrix.shape[0] != len(self.segments):
            raise ValueError(
                f"recording {self.recording_id!r}: {self.matrix.shape[0]} rows "
                f"for {len(self.segments)} segments"
            )
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError(f"recording {self.recording_id!r} has non-finite embeddings")
        keys = [(s.onset, s.duration) for s in self.segments]
        if any(a > b for a, b in zip(keys, keys[1:])):
            raise ValueError("segments must be sorted by (onset, duration)")

    @classmethod
    def from_unsorted(cls, recording_id: str, segments: Sequence[SegmentSpan], matrix) -> "RecordingEmbeddings":
        """Build a recording, sorting segments and matrix rows together."""
        matrix = np.asarray(matrix, dtype=np.float64)
        order = sorted(range(len(segments)), key=lambda i: (segments[i].onset, segments[i].duration))
        return cls(recording_id, [segments[i] for i in order], matrix[order] if len(order) else matrix)

    @property
    def n(self) -> int:
        return len(self.segments)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def with_matrix(self, matrix: np.ndarray) -> "RecordingEmbeddings":
        return RecordingEmbeddings(self.recording_id, list(self.segments), matrix)


@dataclass
class SpeakerSegmentation:
    """Reference or hypothesis diarization: labelled speaker turns."""

    recording_id: str
    turns: list[tuple[SegmentSpan, str]] = field(default_factory=list)

    def __post_init__(self):
        for _, label in self.turns:
            if not label:
                raise ValueError("speaker label must be nonempty")
        self.turns = sorted(self.turns, key=lambda t: (t[0].onset, t[0].duration, t[1]))

    @property
    def speakers(self) -> list[str]:
        return sorted({label for _, label in self.turns})


def format_row(values: Iterable[float]) -> str:
    return " ".join(NUM_FMT.format(float(v)) for v in values)


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_floats(path, lineno: int, fields: Sequence[str]) -> list[float]:
    try:
        values = [float(f) for f in fields]
    except ValueError as exc:
        raise FormatError(path, lineno, f"bad number ({exc})") from None
    if not all(math.isfinite(v) for v in values):
        raise FormatError(path, lineno, "non-finite value")
    return values


def read_embeddings(path, recording_id: str | None = None) -> RecordingEmbeddings:
    """Parse an embedding text file.

    The recording id defaults to the file stem. Segments are re-sorted by
    onset (ties by duration) together with their rows.
    """
    path = Path(path)
    if recording_id is None:
        recording_id = path.stem
    spans: list[SegmentSpan] = []
    rows: list[list[float]] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) < 3:
                raise FormatError(path, lineno, "expected onset, duration and at least one value")
            values = _parse_floats(path, lineno, fields)
            if dim is None:
                dim = len(values) - 2
            elif len(values) - 2 != dim:
                raise FormatError(path, lineno, f"dimension mismatch: expected {dim}, got {len(values) - 2}")
            try:
                spans.append(SegmentSpan(values[0], values[1]))
            except ValueError as exc:
                raise FormatError(path, lineno, str(exc)) from None
            rows.append(values[2:])
    if not spans:
        raise FormatError(path, None, "empty recording (no segments)")
    return RecordingEmbeddings.from_unsorted(recording_id, spans, np.array(rows))


def format_embeddings(rec: RecordingEmbeddings) -> str:
    lines = [f"# recording {rec.recording_id} N={rec.n} D={rec.dim}"]
    for span, row in zip(rec.segments, rec.matrix):
        lines.append(f"{NUM_FMT.format(span.onset)} {NUM_FMT.format(span.duration)} {format_row(row)}")
    return "\n".join(lines) + "\n"


def write_embeddings(rec: RecordingEmbeddings, path) -> None:
    atomic_write_text(path, format_embeddings(rec))


def format_rttm(seg: SpeakerSegmentation) -> str:
    return "".join(
        f"SPEAKER {seg.recording_id} 1 {span.onset:.3f} {span.duration:.3f} <NA> <NA> {label} <NA> <NA>\n"
        for span, label in seg.turns
    )


def write_rttm(seg: SpeakerSegmentation, path) -> None:
    atomic_write_text(path, format_rttm(seg))


def read_rttm(path, recording_id: str | None = None) -> SpeakerSegmentation:
    """Read ``SPEAKER`` records from an RTTM file.

    Other record types are skipped with a warning. If the file names several
    recordings, pass ``recording_id`` to select one; otherwise the first id
    seen is used (or the file stem for an empty file).
    """
    path = Path(path)
    turns_by_rec: dict[str, list[tuple[SegmentSpan, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith(("#", ";")):
                continue
            fields = line.split()
            if fields[0] != "SPEAKER":
                logger.warning("%s:%d: skipping %s record", path, lineno, fields[0])
                continue
            if len(fields) not in (9, 10):
                raise FormatError(path, lineno, f"SPEAKER record needs 10 fields, got {len(fields)}")
            onset, duration = _parse_floats(path, lineno, fields[3:5])
            try:
                span = SegmentSpan(onset, duration)
            except ValueError as exc:
                raise FormatError(path, lineno, str(exc)) from None
            turns_by_rec.setdefault(fields[1], []).append((span, fields[7]))
    if recording_id is None:
        recording_id = next(iter(turns_by_rec), path.stem)
    return SpeakerSegmentation(recording_id, turns_by_rec.get(recording_id, []))


def uniform_segments(total_duration: float, window: float, shift: float) -> list[SegmentSpan]:
    """Full sliding windows of ``window`` seconds every ``shift`` seconds.

    Windows are emitted while they fit inside ``total_duration``. The audio
    left after the last full window is always shorter than ``shift`` and is
    not windowed.
    """
    if window <= 0 or shift <= 0:
        raise ValueError("window and shift must be positive")
    if total_duration < window:
        raise ValueError(f"total duration {total_duration} is shorter than one window ({window})")
    n_full = int(np.floor((total_duration - window) / shift + 1e-9)) + 1
    return [SegmentSpan(k * shift, window) for k in range(n_full)]
