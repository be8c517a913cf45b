"""Warping-path computation between feature sequences and the derived
piano-time -> song-time mapping, plus the note-remapping baseline.

The DTW uses cosine distance on chroma frames and the step set
{(1,1), (1,2), (2,1)} with unit weights, which constrains the local slope
to [1/2, 2]: shape pairs outside that envelope admit no path and raise.
Ties prefer the diagonal, then (1,2), then (2,1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    BeatGrid,
    NoteEvent,
    PianoCoverError,
    PianoPerformance,
    SUBDIVISIONS_PER_BEAT,
    TempoEvent,
    quantize_to_subdivision,
    subdivision_length_at,
    subdivision_time,
)
from .features import FeatureMatrix

STEPS = ((1, 1), (1, 2), (2, 1))  # preference order for tie-breaking


class AlignmentError(PianoCoverError):
    """Alignment failure: empty input or infeasible shape pair."""


@dataclass(frozen=True)
class WarpPath:
    """Monotone frame correspondence; ``cost`` is the summed local distance
    over visited cells."""

    pairs: tuple[tuple[int, int], ...]
    cost: float

    def __post_init__(self) -> None:
        if not self.pairs:
            raise AlignmentError("warp path must be non-empty")
        if self.pairs[0] != (0, 0):
            raise AlignmentError(f"warp path must start at (0, 0), got {self.pairs[0]}")
        for (i0, j0), (i1, j1) in zip(self.pairs, self.pairs[1:]):
            if (i1 - i0, j1 - j0) not in STEPS:
                raise AlignmentError(f"illegal step ({i1 - i0}, {j1 - j0}) in warp path")


def cosine_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine distance; all-zero frames are distance 1 to everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = np.linalg.norm(a, axis=1, keepdims=True)
    bn = np.linalg.norm(b, axis=1, keepdims=True)
    a_unit = np.divide(a, an, out=np.zeros_like(a), where=an > 0)
    b_unit = np.divide(b, bn, out=np.zeros_like(b), where=bn > 0)
    return 1.0 - a_unit @ b_unit.T


def dtw_path(a: FeatureMatrix, b: FeatureMatrix) -> WarpPath:
    """Minimum-cost warping path from (0,0) to (Fa-1, Fb-1)."""
    if a.count == 0 or b.count == 0:
        raise AlignmentError("cannot align empty feature matrices")
    if abs(a.frame_rate - b.frame_rate) > 1e-9:
        raise AlignmentError(f"frame rates differ: {a.frame_rate} vs {b.frame_rate}")
    cost = cosine_distance_matrix(a.frames, b.frames)
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    choice = np.full((n, m), -1, dtype=np.int8)
    acc[0, 0] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            best_step = -1
            for s, (di, dj) in enumerate(STEPS):
                pi, pj = i - di, j - dj
                if pi >= 0 and pj >= 0 and acc[pi, pj] < best:
                    best = acc[pi, pj]
                    best_step = s
            if best_step >= 0:
                acc[i, j] = best + cost[i, j]
                choice[i, j] = best_step
    if not np.isfinite(acc[n - 1, m - 1]):
        raise AlignmentError(
            f"no warping path for shapes {n}x{m}: slope constraint of steps {STEPS} violated"
        )
    pairs = [(n - 1, m - 1)]
    while pairs[-1] != (0, 0):
        i, j = pairs[-1]
        di, dj = STEPS[choice[i, j]]
        pairs.append((i - di, j - dj))
    return WarpPath(tuple(reversed(pairs)), float(acc[n - 1, m - 1]))


@dataclass(frozen=True)
class TimeMap:
    """Piecewise-linear monotone time mapping; queries outside the knot span
    clamp to the boundary values."""

    knots: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.knots) < 1:
            raise AlignmentError("time map needs at least one knot")
        xs = [k[0] for k in self.knots]
        ys = [k[1] for k in self.knots]
        if any(x1 < x0 for x0, x1 in zip(xs, xs[1:])):
            raise AlignmentError("knot times must be non-decreasing")
        if any(y1 < y0 for y0, y1 in zip(ys, ys[1:])):
            raise AlignmentError("mapped times must be non-decreasing")

    @classmethod
    def from_knots(cls, knots) -> "TimeMap":
        """Build from (t_piano, t_song) pairs, collapsing duplicate t_piano
        (the last mapped value wins, preserving monotonicity)."""
        collapsed: list[tuple[float, float]] = []
        for x, y in knots:
            if collapsed and collapsed[-1][0] == x:
                collapsed[-1] = (float(x), float(y))
            else:
                collapsed.append((float(x), float(y)))
        return cls(tuple(collapsed))

    @classmethod
    def identity(cls, length: float) -> "TimeMap":
        return cls(((0.0, 0.0), (float(length), float(length))))

    def __call__(self, t: float | np.ndarray) -> float | np.ndarray:
        xs = np.array([k[0] for k in self.knots])
        ys = np.array([k[1] for k in self.knots])
        result = np.interp(t, xs, ys)
        return float(result) if np.isscalar(t) else result

    @property
    def span(self) -> tuple[float, float]:
        return self.knots[0][0], self.knots[-1][0]

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = {"knots": [list(k) for k in self.knots]}
        payload.update(extra or {})
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path: str | Path) -> "TimeMap":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls.from_knots(data["knots"])


def time_map_from_path(path: WarpPath, frame_rate: float) -> TimeMap:
    """Convert a warp path to a seconds-domain piecewise-linear map."""
    if frame_rate <= 0:
        raise AlignmentError(f"frame_rate must be > 0, got {frame_rate}")
    return TimeMap.from_knots((i / frame_rate, j / frame_rate) for i, j in path.pairs)


def remap_notes(
    perf: PianoPerformance,
    time_map: TimeMap,
    song_grid: BeatGrid,
    subdivisions: int = SUBDIVISIONS_PER_BEAT,
) -> PianoPerformance:
    """Warp each note onto the song timeline and snap onsets to the song's
    sub-beat grid (the strong-alignment baseline; distorts rhythm).

    Onsets go through the map and snap to the nearest subdivision; durations
    are the mapped offset minus the mapped onset, floored at one local
    subdivision. Pitches, velocities, and the note count are untouched.
    """
    notes = []
    for note in perf.notes:
        mapped_on = time_map(note.onset)
        mapped_off = time_map(note.offset)
        idx = quantize_to_subdivision(mapped_on, song_grid, subdivisions, clamp=True)
        snapped = subdivision_time(song_grid, idx, subdivisions)
        floor = subdivision_length_at(song_grid, idx, subdivisions)
        duration = max(mapped_off - mapped_on, floor)
        notes.append(NoteEvent(snapped, note.pitch, duration, note.velocity))
    tempi = tuple(TempoEvent(time_map(ev.time), ev.bpm) for ev in perf.tempo_events)
    length = max([time_map(perf.length)] + [n.offset for n in notes])
    return PianoPerformance(tuple(notes), tempi, length)
