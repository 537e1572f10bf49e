"""Diarization error rate with optimal speaker mapping, collars and overlap control."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from diarclust.core_io import SegmentSpan, SpeakerSegmentation


@dataclass
class DerReport:
    recording_id: str
    scored_speech: float
    missed_speech: float
    false_alarm: float
    speaker_confusion: float

    @property
    def der(self) -> float | None:
        """Error fraction, or ``None`` when nothing was scored."""
        if self.scored_speech <= 0:
            return None
        return (self.missed_speech + self.false_alarm + self.speaker_confusion) / self.scored_speech

    def line(self) -> str:
        der = "NA" if self.der is None else f"{100 * self.der:.2f}"
        return (
            f"{self.recording_id} {self.scored_speech:.3f} {self.missed_speech:.3f} "
            f"{self.false_alarm:.3f} {self.speaker_confusion:.3f} {der}"
        )


def aggregate_reports(reports: Sequence[DerReport], label: str = "TOTAL") -> DerReport:
    """Sum durations across recordings before dividing."""
    return DerReport(
        label,
        sum(r.scored_speech for r in reports),
        sum(r.missed_speech for r in reports),
        sum(r.false_alarm for r in reports),
        sum(r.speaker_confusion for r in reports),
    )


def format_report(reports: Sequence[DerReport]) -> str:
    lines = [r.line() for r in reports]
    lines.append(aggregate_reports(reports).line())
    return "\n".join(lines) + "\n"


def _merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(s, e) for s, e in merged]


def _speaker_intervals(seg: SpeakerSegmentation) -> dict[str, list[tuple[float, float]]]:
    by_spk: dict[str, list[tuple[float, float]]] = {}
    for span, label in seg.turns:
        by_spk.setdefault(label, []).append((span.onset, span.end))
    return {spk: _merge_intervals(iv) for spk, iv in sorted(by_spk.items())}


def _activity(intervals: list[tuple[float, float]], points: np.ndarray) -> np.ndarray:
    starts = np.array([s for s, _ in intervals])
    ends = np.array([e for _, e in intervals])
    idx = np.searchsorted(starts, points, side="right") - 1
    ok = idx >= 0
    out = np.zeros(len(points), dtype=bool)
    out[ok] = points[ok] < ends[idx[ok]]
    return out


def compute_der(
    ref: SpeakerSegmentation,
    hyp: SpeakerSegmentation,
    collar: float = 0.0,
    score_overlap: bool = True,
) -> DerReport:
    """Score ``hyp`` against ``ref``.

    ``collar`` seconds either side of every reference turn boundary are not
    scored. With ``score_overlap=False``, regions where two or more reference
    speakers talk at once are excluded. Speakers are mapped one-to-one to
    maximize matched scored duration.
    """
    if ref.recording_id != hyp.recording_id:
        raise ValueError(f"recording mismatch: {ref.recording_id!r} vs {hyp.recording_id!r}")
    if collar < 0:
        raise ValueError("collar must be nonnegative")
    ref_spk = _speaker_intervals(ref)
    hyp_spk = _speaker_intervals(hyp)

    ref_bounds = sorted({t for ivs in ref_spk.values() for iv in ivs for t in iv})
    collars = _merge_intervals([(t - collar, t + collar) for t in ref_bounds]) if collar > 0 else []
    points = {t for ivs in hyp_spk.values() for iv in ivs for t in iv}
    points.update(ref_bounds)
    points.update(t for iv in collars for t in iv)
    edges = np.array(sorted(points))
    if len(edges) < 2:
        return DerReport(ref.recording_id, 0.0, 0.0, 0.0, 0.0)
    dur = np.diff(edges)
    mids = 0.5 * (edges[:-1] + edges[1:])

    ref_act = np.array([_activity(iv, mids) for iv in ref_spk.values()]).reshape(len(ref_spk), len(mids))
    hyp_act = np.array([_activity(iv, mids) for iv in hyp_spk.values()]).reshape(len(hyp_spk), len(mids))
    n_ref = ref_act.sum(axis=0)
    n_hyp = hyp_act.sum(axis=0)

    scored = np.ones(len(mids), dtype=bool)
    if collars:
        scored &= ~_activity(collars, mids)
    if not score_overlap:
        scored &= n_ref < 2
    w = dur * scored

    n_correct = np.zeros(len(mids))
    if len(ref_spk) and len(hyp_spk):
        overlap = (ref_act * w) @ hyp_act.T.astype(float)
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        for r, c in zip(rows, cols):
            n_correct += ref_act[r] & hyp_act[c]

    return DerReport(
        ref.recording_id,
        scored_speech=float(np.sum(w * n_ref)),
        missed_speech=float(np.sum(w * np.maximum(n_ref - n_hyp, 0))),
        false_alarm=float(np.sum(w * np.maximum(n_hyp - n_ref, 0))),
        speaker_confusion=float(np.sum(w * (np.minimum(n_ref, n_hyp) - n_correct))),
    )


def segments_to_segmentation(
    assignment, spans: Sequence[SegmentSpan], recording_id: str, prefix: str = "spk"
) -> SpeakerSegmentation:
    """Turn per-window cluster labels into speaker turns.

    Runs of equal labels merge into one turn. Where consecutive windows with
    different labels overlap, the boundary goes to the middle of the overlap.
    """
    labels = list(np.asarray(assignment).tolist())
    if len(labels) != len(spans):
        raise ValueError(f"{len(labels)} labels for {len(spans)} segments")
    if not spans:
        return SpeakerSegmentation(recording_id, [])
    order = sorted(range(len(spans)), key=lambda i: (spans[i].onset, spans[i].duration))
    spans = [spans[i] for i in order]
    labels = [labels[i] for i in order]

    turns: list[tuple[SegmentSpan, str]] = []
    start = spans[0].onset
    end = spans[0].end
    for i in range(1, len(spans)):
        cur, prev_label = spans[i], labels[i - 1]
        if labels[i] == prev_label and cur.onset <= end:
            end = max(end, cur.end)
            continue
        if labels[i] != prev_label and cur.onset < end:
            boundary = 0.5 * (cur.onset + spans[i - 1].end)
            cut = min(boundary, end)
            if cut > start:
                turns.append((SegmentSpan(start, cut - start), f"{prefix}{prev_label}"))
            start = max(boundary, cur.onset)
        else:
            turns.append((SegmentSpan(start, end - start), f"{prefix}{prev_label}"))
            start = cur.onset
        end = cur.end
    turns.append((SegmentSpan(start, end - start), f"{prefix}{labels[-1]}"))
    return SpeakerSegmentation(recording_id, turns)
