import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pianocover.core import (
    BeatGrid,
    NoteEvent,
    PianoPerformance,
    TempoEvent,
    bars_from_grid,
    quantize_to_subdivision,
)
from pianocover.fixtures import constant_grid, quantized_performance, toy_performance
from pianocover.remi_codec import (
    CodecConfig,
    CodecError,
    ParseError,
    TokenSequence,
    build_vocabulary,
    decode,
    encode,
    extract_chords,
    read_token_jsonl,
    write_token_jsonl,
)

# Frozen enumeration of the default config; any change to the token set is a
# breaking vocabulary change and must be deliberate.
GOLDEN_SIZE = 372
GOLDEN_SHA256 = "ed5436037819a8bd33d367b245f52b266da0eb51a63e65fa83fadf05a25ecf49"


def oracle_tempo_bin(bpm: float, cfg: CodecConfig) -> int:
    reps = np.geomspace(cfg.tempo_min, cfg.tempo_max, cfg.tempo_bins)
    clamped = min(max(bpm, cfg.tempo_min), cfg.tempo_max)
    best, best_d = 0, float("inf")
    for i, r in enumerate(reps):
        d = abs(math.log(clamped) - math.log(r))
        if d < best_d:
            best, best_d = i, d
    return best


def oracle_velocity_bin(velocity: int, cfg: CodecConfig) -> int:
    width = 126.0 / cfg.velocity_bins
    return min(cfg.velocity_bins - 1, int((velocity - 1) / width))


class TestVocabulary:
    def test_88_pitch_tokens(self, vocab):
        assert sum(1 for t in vocab.tokens if t.cls == "Pitch") == 88

    def test_64_tempo_tokens(self, vocab):
        assert sum(1 for t in vocab.tokens if t.cls == "Tempo") == 64

    def test_class_counts(self, vocab):
        counts = {}
        for t in vocab.tokens:
            counts[t.cls] = counts.get(t.cls, 0) + 1
        assert counts == {
            "Spec": 5,
            "Bar": 2,
            "Position": 16,
            "Chord": 133,  # 12 roots x 11 qualities + none
            "Tempo": 64,
            "Pitch": 88,
            "Duration": 32,
            "Velocity": 32,
        }

    def test_golden_enumeration(self, vocab):
        assert vocab.size == GOLDEN_SIZE == sum(
            (5, 2, 16, 133, 64, 88, 32, 32)
        )
        names = "\n".join(t.name for t in vocab.tokens)
        assert hashlib.sha256(names.encode()).hexdigest() == GOLDEN_SHA256

    def test_ids_stable_across_builds(self, vocab):
        again = build_vocabulary()
        assert [t.name for t in again.tokens] == [t.name for t in vocab.tokens]

    def test_bijective(self, vocab):
        for i in range(vocab.size):
            tok = vocab.token(i)
            assert vocab.id_of(tok.cls, tok.value) == i

    def test_inconsistent_config_rejected(self):
        with pytest.raises(CodecError):
            CodecConfig(velocity_bins=0)
        with pytest.raises(CodecError):
            CodecConfig(tempo_min=200.0, tempo_max=100.0)

    def test_dump(self, vocab, tmp_path):
        import json

        path = tmp_path / "vocab.json"
        vocab.dump(path)
        data = json.loads(path.read_text())
        assert data["size"] == vocab.size
        assert data["tokens"][vocab.id_of("Pitch", 60)] == "Pitch_60"


class TestBinning:
    def test_velocity_bins_match_oracle(self, vocab):
        cfg = vocab.config
        for v in range(1, 128):
            assert cfg.velocity_bin(v) == oracle_velocity_bin(v, cfg)

    def test_velocity_centers_round_trip(self, vocab):
        cfg = vocab.config
        for b in range(cfg.velocity_bins):
            assert cfg.velocity_bin(cfg.velocity_from_bin(b)) == b

    def test_tempo_bins_match_oracle(self, vocab, rng):
        cfg = vocab.config
        for bpm in rng.uniform(20.0, 260.0, size=100):
            assert cfg.tempo_bin(float(bpm)) == oracle_tempo_bin(float(bpm), cfg)

    def test_tempo_representatives_round_trip(self, vocab):
        cfg = vocab.config
        for b in range(cfg.tempo_bins):
            assert cfg.tempo_bin(cfg.tempo_from_bin(b)) == b

    def test_tempo_clamped(self, vocab):
        cfg = vocab.config
        assert cfg.tempo_bin(1.0) == 0
        assert cfg.tempo_bin(10_000.0) == cfg.tempo_bins - 1


class TestEncode:
    def test_empty_bar(self, vocab):
        grid = constant_grid(1)
        perf = PianoPerformance((), (), grid.beat_times[-1] + 0.25)
        seq = encode(perf, grid, vocab)
        assert [vocab.name(i) for i in seq.ids] == ["Bar_start", "Bar_end"]
        assert seq.bar_spans == ((0, 2),)

    def test_single_note_example(self, vocab):
        grid = constant_grid(1, 120.0)
        perf = PianoPerformance(
            (NoteEvent(0.0, 60, 0.5, 64),), (TempoEvent(0.0, 120.0),), grid.beat_times[-1] + 0.25
        )
        seq = encode(perf, grid, vocab, chords=[])
        cfg = vocab.config
        expected = [
            "Bar_start",
            "Position_0",
            f"Tempo_{oracle_tempo_bin(120.0, cfg)}",
            "Pitch_60",
            "Duration_4",
            f"Velocity_{oracle_velocity_bin(64, cfg)}",
            "Bar_end",
        ]
        assert [vocab.name(i) for i in seq.ids] == expected

    def test_simultaneous_notes_lower_pitch_first(self, vocab):
        grid = constant_grid(1)
        perf = PianoPerformance(
            (NoteEvent(0.0, 67, 0.5, 64), NoteEvent(0.0, 60, 0.5, 64)),
            (),
            grid.beat_times[-1] + 0.25,
        )
        seq = encode(perf, grid, vocab, chords=[])
        names = [vocab.name(i) for i in seq.ids]
        assert names.count("Position_0") == 1
        assert names.index("Pitch_60") < names.index("Pitch_67")

    def test_tempo_emitted_only_on_change(self, vocab):
        grid = constant_grid(2)
        perf = PianoPerformance(
            (NoteEvent(0.0, 60, 0.5, 64), NoteEvent(2.0, 62, 0.5, 64)),
            (TempoEvent(0.0, 120.0), TempoEvent(2.0, 120.0)),
            grid.beat_times[-1] + 0.25,
        )
        seq = encode(perf, grid, vocab, chords=[])
        names = [vocab.name(i) for i in seq.ids]
        assert sum(1 for n in names if n.startswith("Tempo_")) == 1

    def test_note_outside_grid_rejected(self, vocab):
        grid = constant_grid(1)
        perf = PianoPerformance((NoteEvent(30.0, 60, 0.5, 64),), (), 31.0)
        with pytest.raises(CodecError, match="outside"):
            encode(perf, grid, vocab)

    def test_unknown_chord_label_rejected(self, vocab):
        grid = constant_grid(1)
        perf = PianoPerformance((), (), grid.beat_times[-1] + 0.25)
        with pytest.raises(CodecError, match="chord label"):
            encode(perf, grid, vocab, chords=[(0.0, "C_majjj")])

    def test_explicit_chord_track(self, vocab):
        grid = constant_grid(2)
        perf = PianoPerformance((), (), grid.beat_times[-1] + 0.25)
        seq = encode(perf, grid, vocab, chords=[(0.0, "C_maj"), (2.0, "G_dom7")])
        names = [vocab.name(i) for i in seq.ids]
        assert "Chord_C_maj" in names and "Chord_G_dom7" in names

    def test_structure_invariants_on_random_performances(self, vocab, rng):
        for _ in range(25):
            perf, grid = toy_performance(rng, n_bars=int(rng.integers(1, 5)))
            seq = encode(perf, grid, vocab)
            seq.check_structure(vocab)
            assert seq.n_bars == len(bars_from_grid(grid))
            for k in range(seq.n_bars - 1):
                assert seq.bar_spans[k][1] == seq.bar_spans[k + 1][0]


class TestDecode:
    def test_empty_bar(self, vocab):
        grid = constant_grid(1)
        seq = TokenSequence((vocab.bar_start_id, vocab.bar_end_id), ((0, 2),))
        perf = decode(seq, grid, vocab)
        assert perf.notes == ()

    def test_round_trip_note_count(self, vocab, rng):
        for _ in range(10):
            perf, grid = toy_performance(rng, n_bars=2)
            seq = encode(perf, grid, vocab)
            assert len(decode(seq, grid, vocab).notes) == len(perf.notes)

    def test_missing_duration_reports_offset(self, vocab):
        ids = (
            vocab.bar_start_id,
            vocab.id_of("Position", 0),
            vocab.id_of("Pitch", 60),
            vocab.bar_end_id,
        )
        seq = TokenSequence(ids, ((0, 4),))
        grid = constant_grid(1)
        with pytest.raises(ParseError) as info:
            decode(seq, grid, vocab)
        assert info.value.offset == 2

    def test_pitch_without_velocity(self, vocab):
        ids = (
            vocab.bar_start_id,
            vocab.id_of("Position", 0),
            vocab.id_of("Pitch", 60),
            vocab.id_of("Duration", 4),
            vocab.id_of("Pitch", 62),
            vocab.bar_end_id,
        )
        seq = TokenSequence(ids, ((0, 6),))
        with pytest.raises(ParseError):
            decode(seq, constant_grid(1), vocab)

    def test_spec_token_inside_bar_rejected(self, vocab):
        ids = (vocab.bar_start_id, vocab.bos_id, vocab.bar_end_id)
        seq = TokenSequence(ids, ((0, 3),))
        with pytest.raises(ParseError):
            decode(seq, constant_grid(1), vocab)


def grid_signature(perf: PianoPerformance, grid: BeatGrid, cfg: CodecConfig):
    """Comparable exact form: (pitch, onset subdivision, duration steps,
    velocity bin) per note."""
    out = []
    for n in perf.notes:
        on = quantize_to_subdivision(n.onset, grid, cfg.subdivisions)
        off = quantize_to_subdivision(n.offset, grid, cfg.subdivisions, clamp=True)
        out.append((n.pitch, on, off - on, cfg.velocity_bin(n.velocity)))
    return sorted(out)


class TestRoundTrip:
    def test_exact_round_trip_sample(self, vocab, rng):
        for _ in range(50):
            perf, grid = quantized_performance(rng, vocab, n_bars=int(rng.integers(1, 4)))
            decoded = decode(encode(perf, grid, vocab), grid, vocab)
            assert grid_signature(decoded, grid, vocab.config) == grid_signature(
                perf, grid, vocab.config
            )
            # velocities are bin centers, so they survive exactly
            assert sorted(n.velocity for n in decoded.notes) == sorted(
                n.velocity for n in perf.notes
            )

    def test_onsets_durations_bit_exact(self, vocab, rng):
        perf, grid = quantized_performance(rng, vocab, n_bars=3)
        decoded = decode(encode(perf, grid, vocab), grid, vocab)
        assert [(n.onset, n.duration, n.pitch) for n in decoded.notes] == [
            (n.onset, n.duration, n.pitch) for n in perf.notes
        ]


class TestChordExtraction:
    def chord_perf(self, pitches, grid, bar_index=0):
        start = grid.beat_times[bar_index * 4]
        notes = tuple(NoteEvent(start, p, 1.9, 64) for p in pitches)
        return PianoPerformance(notes, (), grid.beat_times[-1] + 0.25)

    def test_c_major_triad(self, vocab):
        grid = constant_grid(1)
        perf = self.chord_perf((60, 64, 67), grid)
        labels = extract_chords(perf, grid, bars_from_grid(grid))
        assert labels == ["C_maj"]

    def test_empty_bar_is_no_chord(self, vocab):
        grid = constant_grid(2)
        perf = self.chord_perf((60, 64, 67), grid)
        labels = extract_chords(perf, grid, bars_from_grid(grid))
        assert labels == ["C_maj", "none"]

    def test_emitted_only_on_change(self, vocab):
        grid = constant_grid(2)
        start2 = grid.beat_times[4]
        notes = tuple(NoteEvent(0.0, p, 1.9, 64) for p in (60, 64, 67)) + tuple(
            NoteEvent(start2, p, 1.9, 64) for p in (60, 64, 67)
        )
        perf = PianoPerformance(notes, (), grid.beat_times[-1] + 0.25)
        seq = encode(perf, grid, vocab)
        names = [vocab.name(i) for i in seq.ids]
        assert names.count("Chord_C_maj") == 1

    def test_minor_chord(self, vocab):
        grid = constant_grid(1)
        perf = self.chord_perf((57, 60, 64), grid)  # A C E
        labels = extract_chords(perf, grid, bars_from_grid(grid))
        assert labels == ["A_min"]


def test_jsonl_round_trip(vocab, rng, tmp_path):
    perf, grid = toy_performance(rng, n_bars=2)
    seq = encode(perf, grid, vocab)
    path = tmp_path / "tokens.jsonl"
    write_token_jsonl([("piece_a", seq)], path)
    records = read_token_jsonl(path)
    assert records == [("piece_a", seq)]
