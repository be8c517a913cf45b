"""Core domain types: notes, performances, beat grids, and grid arithmetic.

All types are immutable after construction and safe to share across threads.
Time is 64-bit float seconds throughout; grid indices are exact integers.
The toolkit is fixed to 4/4 meter with 4 subdivisions per beat (16 positions
per bar); other meters are rejected at ingestion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

Seconds = float
BPM = float
MidiPitch = int  # 21..108 (A0..C8)
Velocity = int  # 1..127

PITCH_MIN = 21
PITCH_MAX = 108
BEATS_PER_BAR = 4
SUBDIVISIONS_PER_BEAT = 4
POSITIONS_PER_BAR = BEATS_PER_BAR * SUBDIVISIONS_PER_BEAT


class PianoCoverError(Exception):
    """Base class for all structured toolkit errors."""


class GridError(PianoCoverError):
    """A beat grid is malformed or cannot be constructed."""


class OutOfGridError(GridError):
    """A time fell outside the grid span; carries the clamped value."""

    def __init__(self, t: Seconds, clamped: Seconds):
        super().__init__(f"time {t:.6f}s outside grid span; nearest in-span time {clamped:.6f}s")
        self.time = t
        self.clamped = clamped


class MeterError(PianoCoverError):
    """Input declares a time signature other than 4/4."""


def _check_int_range(value: int, lo: int, hi: int, name: str) -> None:
    if not (lo <= value <= hi):
        raise ValueError(f"{name} must be in [{lo}, {hi}], got {value}")


@dataclass(frozen=True, order=True)
class NoteEvent:
    """A single piano note: pitch 21..108, onset/duration in seconds."""

    onset: Seconds
    pitch: MidiPitch
    duration: Seconds
    velocity: Velocity = 64

    def __post_init__(self) -> None:
        _check_int_range(int(self.pitch), PITCH_MIN, PITCH_MAX, "pitch")
        _check_int_range(int(self.velocity), 1, 127, "velocity")
        if not math.isfinite(self.onset) or self.onset < 0:
            raise ValueError(f"onset must be finite and >= 0, got {self.onset}")
        if not (self.duration > 0):
            raise ValueError(f"duration must be > 0, got {self.duration}")

    @property
    def offset(self) -> Seconds:
        return self.onset + self.duration

    @property
    def pitch_class(self) -> int:
        return self.pitch % 12


@dataclass(frozen=True, order=True)
class TempoEvent:
    time: Seconds
    bpm: BPM

    def __post_init__(self) -> None:
        if not (self.bpm > 0):
            raise ValueError(f"bpm must be > 0, got {self.bpm}")
        if self.time < 0:
            raise ValueError(f"tempo time must be >= 0, got {self.time}")


@dataclass(frozen=True)
class PianoPerformance:
    """Timed note events plus a tempo map; notes sorted by (onset, pitch)."""

    notes: tuple[NoteEvent, ...]
    tempo_events: tuple[TempoEvent, ...]
    length: Seconds

    def __post_init__(self) -> None:
        object.__setattr__(self, "notes", tuple(sorted(self.notes)))
        object.__setattr__(self, "tempo_events", tuple(sorted(self.tempo_events)))
        if self.length <= 0:
            raise ValueError(f"length must be > 0, got {self.length}")
        for note in self.notes:
            if note.onset > self.length:
                raise ValueError(f"note onset {note.onset} beyond length {self.length}")

    @property
    def end_time(self) -> Seconds:
        if not self.notes:
            return self.length
        return max(self.length, max(n.offset for n in self.notes))

    def transposed(self, semitones: int) -> "PianoPerformance":
        notes = tuple(
            NoteEvent(n.onset, n.pitch + semitones, n.duration, n.velocity) for n in self.notes
        )
        return PianoPerformance(notes, self.tempo_events, self.length)


@dataclass(frozen=True)
class BeatGrid:
    """Ordered beat times with downbeat markers.

    ``beat_times`` must be strictly increasing; ``downbeat_indices`` index
    into it and are strictly increasing as well.
    """

    beat_times: tuple[Seconds, ...]
    downbeat_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "beat_times", tuple(float(t) for t in self.beat_times))
        object.__setattr__(self, "downbeat_indices", tuple(int(i) for i in self.downbeat_indices))
        if len(self.beat_times) < 2:
            raise GridError("grid needs at least two beats")
        diffs = np.diff(self.beat_times)
        if not np.all(diffs > 0):
            raise GridError("beat times must be strictly increasing")
        prev = -1
        for idx in self.downbeat_indices:
            if not (0 <= idx < len(self.beat_times)):
                raise GridError(f"downbeat index {idx} out of range")
            if idx <= prev:
                raise GridError("downbeat indices must be strictly increasing")
            prev = idx

    @property
    def count(self) -> int:
        return len(self.beat_times)

    @property
    def span(self) -> tuple[Seconds, Seconds]:
        return self.beat_times[0], self.beat_times[-1]

    def beat_time(self, index: int) -> Seconds:
        """Beat time; ``index == count`` extrapolates one inter-beat interval."""
        if 0 <= index < self.count:
            return self.beat_times[index]
        if index == self.count:
            return self.beat_times[-1] + (self.beat_times[-1] - self.beat_times[-2])
        raise GridError(f"beat index {index} out of range 0..{self.count}")

    def median_interval(self) -> Seconds:
        return float(np.median(np.diff(self.beat_times)))


@dataclass(frozen=True)
class Bar:
    """A complete bar: beat indices [start_beat, end_beat) on some grid."""

    index: int
    start_beat: int
    end_beat: int

    def __post_init__(self) -> None:
        if self.start_beat >= self.end_beat:
            raise ValueError(f"start_beat {self.start_beat} must precede end_beat {self.end_beat}")

    @property
    def n_beats(self) -> int:
        return self.end_beat - self.start_beat


class GridPosition(NamedTuple):
    bar: int
    position: int


def build_beat_grid_from_tempo(
    tempo_events: Sequence[TempoEvent],
    length: Seconds,
    beats_per_bar: int = BEATS_PER_BAR,
) -> BeatGrid:
    """Generate a beat grid by integrating the tempo map over [0, length).

    Beats fall where the integrated beat phase crosses integers; downbeats
    are placed every ``beats_per_bar`` beats starting at beat 0. The tempo
    in force before the first event is that event's bpm.
    """
    if not tempo_events:
        raise GridError("tempo_events must be non-empty")
    if length <= 0:
        raise GridError(f"length must be > 0, got {length}")
    if beats_per_bar <= 0:
        raise GridError(f"beats_per_bar must be > 0, got {beats_per_bar}")
    events = sorted(tempo_events)

    # Segment boundaries: [0, t1), [t1, t2), ..., [tn, length)
    boundaries: list[tuple[Seconds, BPM]] = [(0.0, events[0].bpm)]
    for ev in events:
        if ev.time >= length:
            break
        if ev.time <= boundaries[-1][0]:
            boundaries[-1] = (boundaries[-1][0], ev.bpm)
        else:
            boundaries.append((ev.time, ev.bpm))

    beats: list[Seconds] = []
    phase = 0.0
    for k, (seg_start, bpm) in enumerate(boundaries):
        seg_end = boundaries[k + 1][0] if k + 1 < len(boundaries) else length
        period = 60.0 / bpm
        n = math.ceil(phase - 1e-9)
        while True:
            t = seg_start + (n - phase) * period
            if t >= seg_end - 1e-12 or t >= length:
                break
            beats.append(t)
            n += 1
        phase += (seg_end - seg_start) / period

    if len(beats) < 2:
        raise GridError(f"length {length}s too short to hold two beats at the given tempo")
    downbeats = tuple(range(0, len(beats), beats_per_bar))
    return BeatGrid(tuple(beats), downbeats)


def bars_from_grid(grid: BeatGrid) -> list[Bar]:
    """Complete bars between consecutive downbeats; a trailing partial bar
    (no closing downbeat within the grid) is dropped."""
    bars = []
    db = grid.downbeat_indices
    for k in range(len(db) - 1):
        bars.append(Bar(index=k, start_beat=db[k], end_beat=db[k + 1]))
    # The final downbeat opens a bar only if its closing beat exists.
    if db:
        last = db[-1]
        end = last + (db[1] - db[0] if len(db) > 1 else BEATS_PER_BAR)
        if end < grid.count:
            bars.append(Bar(index=len(bars), start_beat=last, end_beat=end))
    return bars


def bar_time_span(grid: BeatGrid, bar: Bar) -> tuple[Seconds, Seconds]:
    return grid.beat_time(bar.start_beat), grid.beat_time(bar.end_beat)


def quantize_to_subdivision(
    t: Seconds,
    grid: BeatGrid,
    subdivisions: int = SUBDIVISIONS_PER_BEAT,
    clamp: bool = False,
) -> int:
    """Snap a time to the nearest grid subdivision, returning the global
    subdivision index (beat * subdivisions + offset).

    Exact midpoints round toward the earlier position. Times outside the
    grid span raise :class:`OutOfGridError` unless ``clamp`` is set.
    """
    if subdivisions <= 0:
        raise GridError(f"subdivisions must be > 0, got {subdivisions}")
    first, last = grid.span
    if t < first or t > last:
        clamped = min(max(t, first), last)
        if not clamp:
            raise OutOfGridError(t, clamped)
        t = clamped
    times = grid.beat_times
    if t >= last:
        return (grid.count - 1) * subdivisions
    i = int(np.searchsorted(times, t, side="right")) - 1
    i = max(0, min(i, grid.count - 2))
    frac = (t - times[i]) / (times[i + 1] - times[i]) * subdivisions
    k = math.ceil(frac - 0.5)  # midpoint ties fall to the earlier slot
    return i * subdivisions + k


def quantize_time(
    t: Seconds,
    grid: BeatGrid,
    subdivisions: int = SUBDIVISIONS_PER_BEAT,
    clamp: bool = False,
) -> GridPosition:
    """Snap a time to (bar index, subdivision position within that bar)."""
    global_idx = quantize_to_subdivision(t, grid, subdivisions, clamp=clamp)
    beat = global_idx // subdivisions
    db = grid.downbeat_indices
    if not db:
        raise GridError("grid has no downbeats")
    if beat < db[0]:
        if not clamp:
            raise OutOfGridError(t, grid.beat_times[db[0]])
        global_idx = db[0] * subdivisions
        beat = db[0]
    b = int(np.searchsorted(db, beat, side="right")) - 1
    return GridPosition(bar=b, position=global_idx - db[b] * subdivisions)


def subdivision_time(
    grid: BeatGrid,
    global_index: int,
    subdivisions: int = SUBDIVISIONS_PER_BEAT,
) -> Seconds:
    """Inverse of :func:`quantize_to_subdivision`; extrapolates past the last
    beat using the final inter-beat interval."""
    if global_index < 0:
        raise GridError(f"subdivision index must be >= 0, got {global_index}")
    beat, off = divmod(global_index, subdivisions)
    times = grid.beat_times
    if beat < grid.count - 1:
        return times[beat] + (off / subdivisions) * (times[beat + 1] - times[beat])
    last_interval = times[-1] - times[-2]
    overshoot = beat - (grid.count - 1) + off / subdivisions
    return times[-1] + overshoot * last_interval


def subdivision_length_at(
    grid: BeatGrid,
    global_index: int,
    subdivisions: int = SUBDIVISIONS_PER_BEAT,
) -> Seconds:
    """Length in seconds of the subdivision slot at a global index."""
    beat = min(global_index // subdivisions, grid.count - 2)
    return (grid.beat_times[beat + 1] - grid.beat_times[beat]) / subdivisions


def load_beats(path: str | Path) -> BeatGrid:
    """Read a beat annotation file: {"beats": [seconds], "downbeats": [indices]}."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        beats = data["beats"]
        downbeats = data["downbeats"]
    except (KeyError, TypeError) as exc:
        raise GridError(f"beat annotation {path} missing 'beats'/'downbeats'") from exc
    return BeatGrid(tuple(beats), tuple(downbeats))


def save_beats(grid: BeatGrid, path: str | Path) -> None:
    payload = {"beats": list(grid.beat_times), "downbeats": list(grid.downbeat_indices)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
