"""Synthetic test corpora with known ground truth.

Pieces are small constant-tempo performances on exact grid positions. Pairs
carry a hand-constructed piecewise-linear warp whose flat spans collapse
chosen bars onto a single song beat, so the invalid-bar set is known by
construction; the "song" features are the chroma of the warped performance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import TimeMap
from .beat_align import WeakAlignedPair, beat_align, build_weak_pair, find_invalid_bars
from .core import (
    Bar,
    BeatGrid,
    NoteEvent,
    PianoPerformance,
    TempoEvent,
    bars_from_grid,
    build_beat_grid_from_tempo,
    subdivision_time,
)
from .dataset import PianoOnlyRecord
from .features import FeatureMatrix, chroma_from_midi, save_features
from .metrics import skyline
from .midi_io import write_midi
from .remi_codec import TokenSequence, Vocabulary, encode
from .core import save_beats

SONG_BEAT_PERIOD = 0.5  # synthetic songs tick at 120 BPM


def constant_grid(n_bars: int, bpm: float = 120.0) -> BeatGrid:
    """Grid with exactly ``n_bars`` complete 4/4 bars at a constant tempo."""
    period = 60.0 / bpm
    length = (n_bars * 4 + 0.5) * period
    return build_beat_grid_from_tempo([TempoEvent(0.0, bpm)], length, 4)


def toy_performance(
    rng: np.random.Generator,
    n_bars: int = 4,
    bpm: float = 120.0,
    max_notes_per_bar: int = 5,
    pitch_range: tuple[int, int] = (48, 84),
) -> tuple[PianoPerformance, BeatGrid]:
    """Small random piece with onsets/durations exactly on the grid."""
    grid = constant_grid(n_bars, bpm)
    notes = []
    for bar in bars_from_grid(grid):
        n_notes = int(rng.integers(1, max_notes_per_bar + 1))
        base = bar.start_beat * 4
        positions = sorted(rng.choice(16, size=n_notes, replace=False))
        for pos in positions:
            idx = base + int(pos)
            # Keep offsets on the grid so encode/decode round-trips exactly.
            max_steps = (grid.count - 1) * 4 - idx
            duration_steps = min(int(rng.integers(1, 9)), max_steps)
            onset = subdivision_time(grid, idx)
            offset = subdivision_time(grid, idx + duration_steps)
            pitch = int(rng.integers(pitch_range[0], pitch_range[1] + 1))
            velocity = int(rng.integers(40, 100))
            notes.append(NoteEvent(onset, pitch, offset - onset, velocity))
    length = grid.beat_times[-1] + (60.0 / bpm) * 0.5
    perf = PianoPerformance(tuple(notes), (TempoEvent(0.0, bpm),), length)
    return perf, grid


def quantized_performance(
    rng: np.random.Generator,
    vocab: Vocabulary,
    n_bars: int = 2,
    bpm: float = 120.0,
    max_notes_per_bar: int = 6,
) -> tuple[PianoPerformance, BeatGrid]:
    """Like :func:`toy_performance` but with velocities at bin centers, so
    encode/decode round-trips are exact."""
    perf, grid = toy_performance(rng, n_bars, bpm, max_notes_per_bar)
    cfg = vocab.config
    notes = tuple(
        NoteEvent(
            n.onset,
            n.pitch,
            n.duration,
            cfg.velocity_from_bin(int(rng.integers(0, cfg.velocity_bins))),
        )
        for n in perf.notes
    )
    return PianoPerformance(notes, perf.tempo_events, perf.length), grid


def make_warp(
    rng: np.random.Generator,
    piano_grid: BeatGrid,
    flat_bars: set[int] | None = None,
    stretch_range: tuple[float, float] = (0.85, 1.3),
) -> TimeMap:
    """Monotone warp with knots at the piano beats; beats inside a flat bar
    advance song time by zero, collapsing that bar onto one song instant."""
    flat_bars = flat_bars or set()
    bars = bars_from_grid(piano_grid)
    flat_beats = set()
    for bar in bars:
        if bar.index in flat_bars:
            flat_beats.update(range(bar.start_beat, bar.end_beat))
    knots = [(piano_grid.beat_times[0], 0.0)]
    song_time = 0.0
    for i in range(1, piano_grid.count):
        step = piano_grid.beat_times[i] - piano_grid.beat_times[i - 1]
        if (i - 1) not in flat_beats:
            song_time += step * rng.uniform(*stretch_range)
        knots.append((piano_grid.beat_times[i], song_time))
    return TimeMap.from_knots(knots)


def song_grid_for(warp: TimeMap, period: float = SONG_BEAT_PERIOD) -> BeatGrid:
    """Uniform song grid covering the warp's output range."""
    end = warp.knots[-1][1]
    n_beats = max(2, int(np.floor(end / period)) + 1)
    beats = tuple(k * period for k in range(n_beats))
    downbeats = tuple(range(0, n_beats, 4))
    return BeatGrid(beats, downbeats)


def warped_performance(perf: PianoPerformance, warp: TimeMap) -> PianoPerformance:
    """Map note times through the warp without snapping (synthetic 'song')."""
    notes = []
    for n in perf.notes:
        onset = warp(n.onset)
        duration = max(warp(n.offset) - onset, 0.05)
        notes.append(NoteEvent(onset, n.pitch, duration, n.velocity))
    length = max(warp(perf.length), max((n.offset for n in notes), default=0.1)) + 0.05
    tempi = tuple(TempoEvent(warp(ev.time), ev.bpm) for ev in perf.tempo_events)
    return PianoPerformance(tuple(notes), tempi, length)


@dataclass(frozen=True)
class PairFixture:
    pair_id: str
    piano: PianoPerformance
    piano_grid: BeatGrid
    piano_tokens: TokenSequence
    warp: TimeMap
    song_grid: BeatGrid
    song_features: FeatureMatrix
    true_invalid_bars: frozenset[int]

    def weak_pair(self) -> WeakAlignedPair:
        return build_weak_pair(
            self.pair_id,
            self.piano,
            self.piano_tokens,
            self.song_features,
            self.warp,
            self.piano_grid,
            self.song_grid,
            bars_from_grid(self.piano_grid),
        )


def synthetic_pair(
    rng: np.random.Generator,
    vocab: Vocabulary,
    pair_id: str = "pair",
    n_bars: int = 4,
    flat_bars: set[int] | None = None,
    bpm: float = 120.0,
) -> PairFixture:
    """A weakly-alignable pair whose invalid bars are known by construction."""
    flat_bars = set(flat_bars or ())
    perf, grid = toy_performance(rng, n_bars, bpm)
    tokens = encode(perf, grid, vocab)
    warp = make_warp(rng, grid, flat_bars)
    song_grid = song_grid_for(warp)
    song_features = chroma_from_midi(warped_performance(perf, warp))
    # The construction must actually collapse exactly the chosen bars.
    alignment = beat_align(warp, grid, song_grid)
    detected = find_invalid_bars(alignment, bars_from_grid(grid))
    if detected != flat_bars:
        raise AssertionError(
            f"fixture construction failed: designed invalid bars {sorted(flat_bars)}, "
            f"collapsed bars {sorted(detected)}"
        )
    return PairFixture(
        pair_id=pair_id,
        piano=perf,
        piano_grid=grid,
        piano_tokens=tokens,
        warp=warp,
        song_grid=song_grid,
        song_features=song_features,
        true_invalid_bars=frozenset(flat_bars),
    )


def piano_only_fixture(
    rng: np.random.Generator,
    vocab: Vocabulary,
    piece_id: str = "piano",
    n_bars: int = 4,
    bpm: float = 120.0,
) -> PianoOnlyRecord:
    perf, grid = toy_performance(rng, n_bars, bpm)
    return PianoOnlyRecord(
        piece_id=piece_id,
        perf=perf,
        tokens=encode(perf, grid, vocab),
        features=chroma_from_midi(perf),
        grid=grid,
        bars=tuple(bars_from_grid(grid)),
    )


def write_fixture_corpus(
    out_dir: str | Path,
    vocab: Vocabulary,
    n_pairs: int = 4,
    n_piano_only: int = 4,
    n_bars: int = 4,
    seed: int = 0,
) -> Path:
    """Materialize a synthetic corpus: MIDI + beat annotations + song
    features + known warps + reference contours + a pairs.jsonl manifest."""
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_rows = []
    for k in range(n_pairs):
        # Roughly half the bars of every other pair are flat-warped.
        flat = set(range(0, n_bars, 2)) if k % 2 else set()
        fixture = synthetic_pair(rng, vocab, f"pair_{k:03d}", n_bars, flat)
        base = f"pair_{k:03d}"
        write_midi(fixture.piano, out_dir / f"{base}.mid")
        save_beats(fixture.piano_grid, out_dir / f"{base}.beats.json")
        save_features(fixture.song_features, out_dir / f"{base}.song.fmx")
        save_beats(fixture.song_grid, out_dir / f"{base}.song_beats.json")
        fixture.warp.save(out_dir / f"{base}.warp.json")
        skyline(fixture.piano).save(out_dir / f"{base}.contour.json")
        manifest_rows.append(
            {
                "id": base,
                "kind": "pair",
                "piano_midi": f"{base}.mid",
                "piano_beats": f"{base}.beats.json",
                "song_features": f"{base}.song.fmx",
                "song_beats": f"{base}.song_beats.json",
                "warp": f"{base}.warp.json",
                "ref_contour": f"{base}.contour.json",
                "true_invalid_bars": sorted(fixture.true_invalid_bars),
            }
        )
    for k in range(n_piano_only):
        record = piano_only_fixture(rng, vocab, f"piano_{k:03d}", n_bars)
        base = f"piano_{k:03d}"
        write_midi(record.perf, out_dir / f"{base}.mid")
        save_beats(record.grid, out_dir / f"{base}.beats.json")
        manifest_rows.append(
            {
                "id": base,
                "kind": "piano",
                "piano_midi": f"{base}.mid",
                "piano_beats": f"{base}.beats.json",
            }
        )
    manifest = out_dir / "pairs.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for row in manifest_rows:
            fh.write(json.dumps(row) + "\n")
    return manifest
