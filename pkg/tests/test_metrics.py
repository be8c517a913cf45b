import math

import numpy as np
import pytest

from pianocover.core import NoteEvent, PianoPerformance, TempoEvent, bars_from_grid
from pianocover.fixtures import constant_grid, toy_performance
from pianocover.metrics import (
    MelodyContour,
    MetricError,
    groove_vector,
    grooving_similarity_next,
    mca,
    pitch_class_entropy_4,
    skyline,
)


def perf_from(notes, length):
    return PianoPerformance(tuple(notes), (TempoEvent(0.0, 120.0),), length)


def oracle_skyline(perf, frame_rate, n_frames):
    """Per-frame max over the sounding set, evaluated directly."""
    out = []
    for f in range(n_frames):
        t = f / frame_rate
        sounding = [n.pitch for n in perf.notes if n.onset <= t < n.offset]
        out.append(max(sounding) if sounding else None)
    return out


class TestSkyline:
    def test_single_note(self):
        contour = skyline(perf_from([NoteEvent(0.0, 60, 1.0)], 1.0))
        assert len(contour) == 100
        assert np.all(contour.pitches == 60.0)

    def test_overlap_takes_higher(self):
        perf = perf_from([NoteEvent(0.0, 60, 1.0), NoteEvent(0.25, 64, 0.5)], 1.0)
        contour = skyline(perf)
        assert np.all(contour.pitches[25:75] == 64.0)
        assert np.all(contour.pitches[:25] == 60.0)
        assert np.all(contour.pitches[75:] == 60.0)

    def test_matches_bruteforce_on_arpeggio(self, rng):
        perf, _ = toy_performance(rng, n_bars=2)
        contour = skyline(perf)
        expected = oracle_skyline(perf, contour.frame_rate, len(contour))
        got = [None if math.isnan(p) else p for p in contour.pitches]
        assert got == expected

    def test_invariant_under_note_reordering(self, rng):
        perf, _ = toy_performance(rng, n_bars=2)
        shuffled = list(perf.notes)
        rng.shuffle(shuffled)
        again = PianoPerformance(tuple(shuffled), perf.tempo_events, perf.length)
        assert np.array_equal(
            skyline(perf).pitches, skyline(again).pitches, equal_nan=True
        )

    def test_unvoiced_gaps(self):
        contour = skyline(perf_from([NoteEvent(0.5, 60, 0.5)], 1.0))
        assert np.all(np.isnan(contour.pitches[:50]))
        assert np.all(contour.pitches[50:] == 60.0)


class TestMca:
    def contour(self, pitches, frame_rate=100.0):
        return MelodyContour(np.asarray(pitches, dtype=np.float64), frame_rate)

    def test_self_accuracy_is_one(self):
        c = self.contour([60, 62, np.nan, 64])
        assert mca(c, c) == 1.0

    def test_octave_transposition_preserved(self):
        ref = self.contour([60, 62, 64])
        up = self.contour([72, 74, 76])
        assert mca(ref, up) == 1.0
        assert mca(up, ref) == 1.0

    def test_semitone_off_scores_zero(self):
        ref = self.contour([60, 62, 64])
        assert mca(ref, self.contour([61, 63, 65])) == 0.0

    def test_unvoiced_estimate_frames_incorrect(self):
        ref = self.contour([60, 60, 60, 60])
        est = self.contour([60, np.nan, 60, np.nan])
        assert mca(ref, est) == 0.5

    def test_reference_voicing_is_denominator(self):
        ref = self.contour([60, np.nan, np.nan, 60])
        est = self.contour([60, 60, 60, 61])
        assert mca(ref, est) == 0.5

    def test_compared_over_min_length(self):
        ref = self.contour([60, 60, 60, 60, 60, 60])
        est = self.contour([60, 60])
        assert mca(ref, est) == 1.0

    def test_no_voiced_reference_rejected(self):
        ref = self.contour([np.nan, np.nan])
        with pytest.raises(MetricError):
            mca(ref, self.contour([60, 60]))

    def test_frame_rate_mismatch_rejected(self):
        with pytest.raises(MetricError):
            mca(self.contour([60]), self.contour([60], frame_rate=10.0))

    def test_fifty_cent_boundary_counts(self):
        ref = self.contour([60.0])
        assert mca(ref, self.contour([60.5])) == 1.0
        assert mca(ref, self.contour([60.51])) == 0.0

    def test_file_round_trip(self, tmp_path):
        contour = self.contour([60, np.nan, 72.5])
        path = tmp_path / "c.json"
        contour.save(path)
        loaded = MelodyContour.load(path)
        assert loaded.frame_rate == contour.frame_rate
        assert np.array_equal(loaded.pitches, contour.pitches, equal_nan=True)


def notes_at_positions(grid, bar_positions, pitch=60):
    """(bar, position) -> short note at that 16th-note slot."""
    notes = []
    for bar_idx, pos in bar_positions:
        t = grid.beat_times[bar_idx * 4] + pos * 0.125
        notes.append(NoteEvent(t, pitch, 0.1, 64))
    return notes


class TestEntropy:
    def test_single_class_is_zero(self):
        grid = constant_grid(4)
        notes = [NoteEvent(grid.beat_times[4 * b], 60 + 12 * (b % 2), 0.3, 64) for b in range(4)]
        perf = perf_from(notes, grid.beat_times[-1] + 0.25)
        assert pitch_class_entropy_4(perf, grid) == 0.0

    def test_uniform_is_log2_12(self):
        grid = constant_grid(4)
        notes = [
            NoteEvent(grid.beat_times[4 * (k % 4)] + 0.125 * (k // 4), 48 + k, 0.1, 64)
            for k in range(12)
        ]
        perf = perf_from(notes, grid.beat_times[-1] + 0.25)
        assert pitch_class_entropy_4(perf, grid) == pytest.approx(math.log2(12), abs=1e-9)

    def test_direct_evaluation_example(self):
        # counts C:8 E:4 G:2 B:2 -> 1.75 bits
        grid = constant_grid(4)
        spec = [(60, 8), (64, 4), (67, 2), (71, 2)]
        notes = []
        k = 0
        for pitch, count in spec:
            for _ in range(count):
                bar, pos = divmod(k, 16)
                notes.append(NoteEvent(grid.beat_times[4 * bar] + 0.125 * pos, pitch, 0.1, 64))
                k += 1
        perf = perf_from(notes, grid.beat_times[-1] + 0.25)
        assert pitch_class_entropy_4(perf, grid) == pytest.approx(1.75, abs=1e-12)

    def test_sliding_windows_average(self):
        grid = constant_grid(5)
        # bars 0-3 all C; bar 4 adds a G -> second window has entropy > 0
        notes = [NoteEvent(grid.beat_times[4 * b], 60, 0.3, 64) for b in range(4)]
        notes += [NoteEvent(grid.beat_times[16], 60, 0.3, 64), NoteEvent(grid.beat_times[17], 67, 0.3, 64)]
        perf = perf_from(notes, grid.beat_times[-1] + 0.25)
        h_second = -(0.8 * math.log2(0.8) + 0.2 * math.log2(0.2))
        assert pitch_class_entropy_4(perf, grid) == pytest.approx(h_second / 2, abs=1e-12)

    def test_too_few_bars_rejected(self):
        grid = constant_grid(2)
        perf = perf_from([NoteEvent(0.0, 60, 0.5)], grid.beat_times[-1] + 0.25)
        with pytest.raises(MetricError):
            pitch_class_entropy_4(perf, grid)

    def test_all_windows_empty_rejected(self):
        grid = constant_grid(4)
        perf = perf_from([], grid.beat_times[-1] + 0.25)
        with pytest.raises(MetricError):
            pitch_class_entropy_4(perf, grid)


class TestGrooving:
    def test_identical_bars_score_one(self):
        grid = constant_grid(3)
        positions = [(b, p) for b in range(3) for p in (0, 4, 8, 12)]
        perf = perf_from(notes_at_positions(grid, positions), grid.beat_times[-1] + 0.25)
        assert grooving_similarity_next(perf, grid) == 1.0

    def test_complementary_bars_score_zero(self):
        grid = constant_grid(2)
        positions = [(0, p) for p in range(0, 16, 2)] + [(1, p) for p in range(1, 16, 2)]
        perf = perf_from(notes_at_positions(grid, positions), grid.beat_times[-1] + 0.25)
        assert grooving_similarity_next(perf, grid) == 0.0

    def test_one_bit_difference(self):
        grid = constant_grid(2)
        positions = [(0, p) for p in (0, 4, 8, 12)] + [(1, p) for p in (0, 4, 8)]
        perf = perf_from(notes_at_positions(grid, positions), grid.beat_times[-1] + 0.25)
        assert grooving_similarity_next(perf, grid) == 0.9375

    def test_empty_bars_are_identical(self):
        grid = constant_grid(2)
        perf = perf_from([], grid.beat_times[-1] + 0.25)
        assert grooving_similarity_next(perf, grid) == 1.0

    def test_groove_vector_contents(self):
        grid = constant_grid(1)
        perf = perf_from(notes_at_positions(grid, [(0, 0), (0, 7)]), grid.beat_times[-1] + 0.25)
        vec = groove_vector(perf, grid, bars_from_grid(grid)[0])
        assert vec.tolist() == [p in (0, 7) for p in range(16)]

    def test_fewer_than_two_bars_rejected(self):
        grid = constant_grid(1)
        perf = perf_from([], grid.beat_times[-1] + 0.25)
        with pytest.raises(MetricError):
            grooving_similarity_next(perf, grid)

    def test_bounds(self, rng):
        for _ in range(10):
            perf, grid = toy_performance(rng, n_bars=4)
            gs = grooving_similarity_next(perf, grid)
            h4 = pitch_class_entropy_4(perf, grid)
            assert 0.0 <= gs <= 1.0
            assert 0.0 <= h4 <= math.log2(12) + 1e-12
