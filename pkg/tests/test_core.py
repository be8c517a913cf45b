import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pianocover.core import (
    Bar,
    BeatGrid,
    GridError,
    NoteEvent,
    OutOfGridError,
    PianoPerformance,
    TempoEvent,
    bars_from_grid,
    build_beat_grid_from_tempo,
    load_beats,
    quantize_time,
    quantize_to_subdivision,
    save_beats,
    subdivision_time,
)


def oracle_beats(tempo_events, length, dt=1e-5):
    """Independent piecewise integration: scan time in tiny steps, emit a
    beat wherever the accumulated phase crosses an integer."""
    events = sorted(tempo_events, key=lambda e: e.time)

    def bpm_at(t):
        current = events[0].bpm
        for ev in events:
            if ev.time <= t:
                current = ev.bpm
        return current

    beats, phase, t = [], 0.0, 0.0
    next_beat = 0
    # Beats landing exactly at `length` are excluded; leave slack for the
    # integration drift of the stepping itself.
    while t < length - 1e-4:
        if phase >= next_beat - 1e-12:
            beats.append(t)
            next_beat += 1
        phase += bpm_at(t) / 60.0 * dt
        t += dt
    return beats


def oracle_quantize(t, grid, sub):
    """Nearest subdivision by exhaustive search over every position; ties go
    to the earlier position because the first minimum wins."""
    times = []
    for beat in range(grid.count - 1):
        for k in range(sub):
            times.append(grid.beat_times[beat] + k / sub * (grid.beat_times[beat + 1] - grid.beat_times[beat]))
    times.append(grid.beat_times[-1])
    distances = [abs(t - x) for x in times]
    return distances.index(min(distances))


class TestBuildBeatGrid:
    def test_constant_120(self):
        grid = build_beat_grid_from_tempo([TempoEvent(0.0, 120.0)], 2.0, 4)
        assert list(grid.beat_times) == [0.0, 0.5, 1.0, 1.5]
        assert list(grid.downbeat_indices) == [0]

    def test_constant_60(self):
        grid = build_beat_grid_from_tempo([TempoEvent(0.0, 60.0)], 4.0, 4)
        assert list(grid.beat_times) == [0.0, 1.0, 2.0, 3.0]

    def test_tempo_change_matches_integration_oracle(self):
        events = [TempoEvent(0.0, 120.0), TempoEvent(1.0, 60.0)]
        grid = build_beat_grid_from_tempo(events, 3.0, 4)
        assert list(grid.beat_times) == pytest.approx([0.0, 0.5, 1.0, 2.0], abs=1e-9)
        expected = oracle_beats(events, 3.0)
        assert len(expected) == grid.count
        assert list(grid.beat_times) == pytest.approx(expected, abs=1e-3)

    def test_random_tempo_maps_match_oracle(self, rng):
        for _ in range(5):
            times = np.concatenate([[0.0], np.sort(rng.uniform(0.3, 2.5, size=2))])
            bpms = rng.uniform(50, 200, size=3)
            events = [TempoEvent(float(t), float(b)) for t, b in zip(times, bpms)]
            grid = build_beat_grid_from_tempo(events, 3.0, 4)
            expected = oracle_beats(events, 3.0)
            assert len(expected) == grid.count
            assert list(grid.beat_times) == pytest.approx(expected, abs=1e-3)

    def test_empty_tempo_rejected(self):
        with pytest.raises(GridError):
            build_beat_grid_from_tempo([], 2.0, 4)

    def test_nonpositive_length_rejected(self):
        with pytest.raises(GridError):
            build_beat_grid_from_tempo([TempoEvent(0.0, 120.0)], 0.0, 4)

    def test_downbeats_every_bar(self):
        grid = build_beat_grid_from_tempo([TempoEvent(0.0, 120.0)], 4.3, 4)
        assert list(grid.downbeat_indices) == [0, 4, 8]

    @given(bpm=st.floats(40, 220), n_beats=st.integers(3, 40))
    def test_constant_tempo_is_arithmetic_progression(self, bpm, n_beats):
        period = 60.0 / bpm
        grid = build_beat_grid_from_tempo([TempoEvent(0.0, bpm)], (n_beats + 0.5) * period, 4)
        diffs = np.diff(grid.beat_times)
        assert np.all(np.abs(diffs - period) < 1e-9)


class TestBeatGridType:
    def test_monotonicity_enforced(self):
        with pytest.raises(GridError):
            BeatGrid((0.0, 0.5, 0.5), (0,))

    def test_downbeat_bounds(self):
        with pytest.raises(GridError):
            BeatGrid((0.0, 0.5), (3,))

    def test_downbeats_strictly_increasing(self):
        with pytest.raises(GridError):
            BeatGrid((0.0, 0.5, 1.0), (1, 1))

    def test_beat_time_extrapolates_one_step(self):
        grid = BeatGrid((0.0, 0.5, 1.0), (0,))
        assert grid.beat_time(3) == pytest.approx(1.5)
        with pytest.raises(GridError):
            grid.beat_time(4)


class TestQuantize:
    grid = BeatGrid((0.0, 0.5, 1.0), (0,))

    def test_exact_beat(self):
        assert quantize_time(0.5, self.grid, 4) == (0, 4)

    def test_nearest_matches_oracle(self):
        assert quantize_to_subdivision(0.13, self.grid, 4) == oracle_quantize(0.13, self.grid, 4)
        assert quantize_to_subdivision(0.13, self.grid, 4) == 1

    def test_midpoint_ties_to_earlier(self):
        assert quantize_to_subdivision(0.0625, self.grid, 4) == 0

    def test_random_times_match_oracle(self, rng):
        beats = np.cumsum(rng.uniform(0.3, 0.8, size=8))
        grid = BeatGrid(tuple(beats), (0, 4))
        for t in rng.uniform(beats[0], beats[-1], size=200):
            assert quantize_to_subdivision(float(t), grid, 4) == oracle_quantize(float(t), grid, 4)

    def test_out_of_span_raises_with_clamp_info(self):
        with pytest.raises(OutOfGridError) as info:
            quantize_time(2.0, self.grid, 4)
        assert info.value.clamped == 1.0

    def test_clamp_mode(self):
        assert quantize_to_subdivision(2.0, self.grid, 4, clamp=True) == 8

    @given(beat=st.integers(0, 7), offset=st.integers(0, 3))
    def test_idempotent_on_grid_points(self, beat, offset):
        grid = BeatGrid(tuple(0.37 * k for k in range(9)), (0, 4, 8))
        idx = beat * 4 + offset
        t = subdivision_time(grid, idx, 4)
        assert quantize_to_subdivision(t, grid, 4) == idx

    def test_position_within_bar(self):
        grid = BeatGrid(tuple(0.5 * k for k in range(9)), (0, 4, 8))
        # 2.25s = beat 4 + 2 subdivisions = bar 1, position 2
        assert quantize_time(2.25, grid, 4) == (1, 2)


class TestBars:
    def test_complete_bars_only(self):
        grid = build_beat_grid_from_tempo([TempoEvent(0.0, 120.0)], 8.3, 4)
        bars = bars_from_grid(grid)
        assert [(b.start_beat, b.end_beat) for b in bars] == [(0, 4), (4, 8), (8, 12), (12, 16)]

    def test_bar_invariant(self):
        with pytest.raises(ValueError):
            Bar(index=0, start_beat=4, end_beat=4)


class TestDomainTypes:
    def test_note_pitch_range(self):
        with pytest.raises(ValueError):
            NoteEvent(0.0, 20, 1.0, 64)
        with pytest.raises(ValueError):
            NoteEvent(0.0, 109, 1.0, 64)

    def test_note_duration_positive(self):
        with pytest.raises(ValueError):
            NoteEvent(0.0, 60, 0.0, 64)

    def test_tempo_positive(self):
        with pytest.raises(ValueError):
            TempoEvent(0.0, 0.0)

    def test_performance_sorts_notes(self):
        perf = PianoPerformance(
            (NoteEvent(1.0, 60, 0.5), NoteEvent(0.0, 72, 0.5), NoteEvent(0.0, 64, 0.5)),
            (TempoEvent(0.0, 120.0),),
            2.0,
        )
        assert [(n.onset, n.pitch) for n in perf.notes] == [(0.0, 64), (0.0, 72), (1.0, 60)]

    def test_onset_beyond_length_rejected(self):
        with pytest.raises(ValueError):
            PianoPerformance((NoteEvent(3.0, 60, 0.5),), (), 2.0)


def test_beats_json_round_trip(tmp_path):
    grid = build_beat_grid_from_tempo([TempoEvent(0.0, 97.0)], 6.0, 4)
    path = tmp_path / "beats.json"
    save_beats(grid, path)
    loaded = load_beats(path)
    assert loaded.beat_times == grid.beat_times
    assert loaded.downbeat_indices == grid.downbeat_indices
    with open(path) as fh:
        data = json.load(fh)
    assert set(data) == {"beats", "downbeats"}


def test_load_beats_missing_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"beats": [0, 1]}')
    with pytest.raises(GridError):
        load_beats(path)
