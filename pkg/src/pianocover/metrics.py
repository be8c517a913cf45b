"""Objective evaluation: skyline melody extraction, melody chroma accuracy,
pitch-class-histogram entropy over 4-bar windows, and next-bar grooving
pattern similarity."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    Bar,
    BeatGrid,
    PianoCoverError,
    PianoPerformance,
    POSITIONS_PER_BAR,
    SUBDIVISIONS_PER_BEAT,
    bars_from_grid,
    quantize_to_subdivision,
)

CONTOUR_FRAME_RATE = 100.0
CHROMA_TOLERANCE_SEMITONES = 0.5  # 50 cents
ENTROPY_WINDOW_BARS = 4


class MetricError(PianoCoverError):
    """Invalid metric input."""


@dataclass(frozen=True)
class MelodyContour:
    """Per-frame melody pitch in MIDI numbers; NaN marks unvoiced frames."""

    pitches: np.ndarray
    frame_rate: float

    def __post_init__(self) -> None:
        pitches = np.asarray(self.pitches, dtype=np.float64)
        if pitches.ndim != 1:
            raise MetricError(f"contour must be 1-D, got shape {pitches.shape}")
        if self.frame_rate <= 0:
            raise MetricError(f"frame_rate must be > 0, got {self.frame_rate}")
        voiced = pitches[~np.isnan(pitches)]
        if voiced.size and (voiced.min() < 0 or voiced.max() > 127):
            raise MetricError("voiced pitches must lie within 0..127")
        pitches.setflags(write=False)
        object.__setattr__(self, "pitches", pitches)

    @property
    def voiced(self) -> np.ndarray:
        return ~np.isnan(self.pitches)

    def __len__(self) -> int:
        return len(self.pitches)

    def save(self, path: str | Path) -> None:
        payload = {
            "frame_rate": self.frame_rate,
            "pitches": [None if math.isnan(p) else p for p in self.pitches],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path: str | Path) -> "MelodyContour":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        pitches = np.array(
            [np.nan if p is None else float(p) for p in data["pitches"]], dtype=np.float64
        )
        return cls(pitches, float(data["frame_rate"]))


def skyline(perf: PianoPerformance, frame_rate: float = CONTOUR_FRAME_RATE) -> MelodyContour:
    """Highest sounding pitch per frame; unvoiced where nothing sounds."""
    if frame_rate <= 0:
        raise MetricError(f"frame_rate must be > 0, got {frame_rate}")
    n_frames = max(1, math.ceil(perf.end_time * frame_rate - 1e-9))
    top = np.full(n_frames, -1.0)
    for note in perf.notes:
        first = max(0, math.ceil(note.onset * frame_rate - 1e-9))
        last = min(n_frames, math.ceil(note.offset * frame_rate - 1e-9))
        if last > first:
            np.maximum.at(top, np.arange(first, last), float(note.pitch))
    pitches = np.where(top < 0, np.nan, top)
    return MelodyContour(pitches, frame_rate)


def mca(reference: MelodyContour, estimate: MelodyContour) -> float:
    """Fraction of reference-voiced frames whose estimated pitch matches the
    reference within 50 cents after folding to a single octave.

    Contours are compared over their common length; both must be voiced for
    a frame to count as correct.
    """
    if abs(reference.frame_rate - estimate.frame_rate) > 1e-9:
        raise MetricError(
            f"frame rates differ: {reference.frame_rate} vs {estimate.frame_rate}"
        )
    n = min(len(reference), len(estimate))
    ref = reference.pitches[:n]
    est = estimate.pitches[:n]
    ref_voiced = ~np.isnan(ref)
    if not ref_voiced.any():
        raise MetricError("reference contour has no voiced frames in the compared span")
    both = ref_voiced & ~np.isnan(est)
    diff = np.where(both, est - ref, 0.0)
    folded = np.mod(diff, 12.0)
    folded = np.where(folded > 6.0, folded - 12.0, folded)  # fold into (-6, 6]
    correct = both & (np.abs(folded) <= CHROMA_TOLERANCE_SEMITONES + 1e-12)
    return float(correct.sum() / ref_voiced.sum())


def _notes_by_bar(
    perf: PianoPerformance, grid: BeatGrid, bars: Sequence[Bar]
) -> dict[int, list]:
    """Assign notes to bars by half-open time span [bar start, bar end)."""
    spans = [(grid.beat_time(b.start_beat), grid.beat_time(b.end_beat)) for b in bars]
    out: dict[int, list] = {b.index: [] for b in bars}
    for note in perf.notes:
        for bar, (t0, t1) in zip(bars, spans):
            if t0 <= note.onset < t1:
                out[bar.index].append(note)
                break
    return out


def pitch_class_entropy_4(
    perf: PianoPerformance,
    grid: BeatGrid,
    bars: Sequence[Bar] | None = None,
    window: int = ENTROPY_WINDOW_BARS,
) -> float:
    """Mean entropy (bits) of the pitch-class histogram over sliding
    ``window``-bar spans (stride 1); empty windows are skipped."""
    bars = list(bars) if bars is not None else bars_from_grid(grid)
    if len(bars) < window:
        raise MetricError(f"need at least {window} bars, got {len(bars)}")
    by_bar = _notes_by_bar(perf, grid, bars)
    entropies = []
    for start in range(len(bars) - window + 1):
        counts = np.zeros(12)
        for bar in bars[start : start + window]:
            for note in by_bar[bar.index]:
                counts[note.pitch % 12] += 1
        total = counts.sum()
        if total == 0:
            continue
        p = counts[counts > 0] / total
        entropies.append(float(-(p * np.log2(p)).sum()))
    if not entropies:
        raise MetricError("every window is empty; entropy undefined")
    return float(np.mean(entropies))


def groove_vector(perf: PianoPerformance, grid: BeatGrid, bar: Bar) -> np.ndarray:
    """Onset indicator over the bar's 16 subdivision positions."""
    vec = np.zeros(POSITIONS_PER_BAR, dtype=bool)
    lo = bar.start_beat * SUBDIVISIONS_PER_BEAT
    hi = bar.end_beat * SUBDIVISIONS_PER_BEAT
    for note in perf.notes:
        try:
            idx = quantize_to_subdivision(note.onset, grid)
        except PianoCoverError:
            continue
        if lo <= idx < hi:
            vec[idx - lo] = True
    return vec


def grooving_similarity_next(
    perf: PianoPerformance,
    grid: BeatGrid,
    bars: Sequence[Bar] | None = None,
) -> float:
    """Mean over consecutive bar pairs of 1 - HammingDistance/16 between
    their groove vectors (two empty bars are identical, similarity 1)."""
    bars = list(bars) if bars is not None else bars_from_grid(grid)
    if len(bars) < 2:
        raise MetricError(f"need at least 2 bars, got {len(bars)}")
    vectors = [groove_vector(perf, grid, bar) for bar in bars]
    sims = [
        1.0 - np.count_nonzero(a != b) / POSITIONS_PER_BAR
        for a, b in zip(vectors, vectors[1:])
    ]
    return float(np.mean(sims))
