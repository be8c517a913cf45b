"""Bidirectional conversion between PianoPerformance and bar-structured tokens.

Eight token classes: Spec (stream control), Bar (start/end markers), Position
(16th-note offsets within a bar), Chord, Tempo, Pitch, Duration, Velocity.
Each bar is emitted as [Bar_start] ... [Bar_end]; inside a bar, events are
grouped by position with the Position token emitted lazily (only when the
position changes), ordered Chord, Tempo, then notes low pitch first, each
note a Pitch/Duration/Velocity triple.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core import (
    Bar,
    BeatGrid,
    NoteEvent,
    OutOfGridError,
    PianoCoverError,
    PianoPerformance,
    TempoEvent,
    bars_from_grid,
    quantize_to_subdivision,
    subdivision_time,
)

ROOT_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
CHORD_QUALITIES: dict[str, tuple[int, ...]] = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "dom7": (0, 4, 7, 10),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
    "min7b5": (0, 3, 6, 10),
    "sus2": (0, 2, 7),
    "sus4": (0, 5, 7),
    "power": (0, 7),
}
NO_CHORD = "none"
SPEC_TOKENS = ("pad", "bos", "eos", "ss", "unk")


class CodecError(PianoCoverError):
    """Tokenization/detokenization failure."""


class ParseError(CodecError):
    """Structurally invalid token sequence; carries the failing offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at token offset {offset})")
        self.offset = offset


class Token(NamedTuple):
    cls: str
    value: object

    @property
    def name(self) -> str:
        return f"{self.cls}_{self.value}"


@dataclass(frozen=True)
class CodecConfig:
    """Discretization choices; the default enumeration is the documented set."""

    beats_per_bar: int = 4
    subdivisions: int = 4  # per beat; 16 positions per 4/4 bar
    pitch_min: int = 21
    pitch_max: int = 108
    max_duration: int = 32  # in 16th-note steps
    velocity_bins: int = 32
    tempo_bins: int = 64
    tempo_min: float = 32.0
    tempo_max: float = 224.0

    def __post_init__(self) -> None:
        if min(self.beats_per_bar, self.subdivisions, self.max_duration) <= 0:
            raise CodecError("beats_per_bar, subdivisions and max_duration must be positive")
        if self.velocity_bins <= 0 or self.tempo_bins <= 0:
            raise CodecError("velocity_bins and tempo_bins must be positive")
        if not (0 < self.tempo_min < self.tempo_max):
            raise CodecError("tempo range must satisfy 0 < tempo_min < tempo_max")
        if self.pitch_min >= self.pitch_max:
            raise CodecError("pitch range must be non-empty")

    @property
    def positions_per_bar(self) -> int:
        return self.beats_per_bar * self.subdivisions

    def tempo_values(self) -> np.ndarray:
        return np.geomspace(self.tempo_min, self.tempo_max, self.tempo_bins)

    def tempo_bin(self, bpm: float) -> int:
        clamped = min(max(bpm, self.tempo_min), self.tempo_max)
        return int(np.argmin(np.abs(np.log(self.tempo_values()) - math.log(clamped))))

    def tempo_from_bin(self, index: int) -> float:
        return float(self.tempo_values()[index])

    def velocity_bin(self, velocity: int) -> int:
        width = 126.0 / self.velocity_bins
        return min(self.velocity_bins - 1, int((velocity - 1) / width))

    def velocity_from_bin(self, index: int) -> int:
        width = 126.0 / self.velocity_bins
        return max(1, min(127, round(1 + (index + 0.5) * width)))


def chord_labels() -> list[str]:
    """All chord symbols in enumeration order: 12 roots x 11 qualities + none."""
    labels = [f"{root}_{quality}" for root in ROOT_NAMES for quality in CHORD_QUALITIES]
    labels.append(NO_CHORD)
    return labels


class Vocabulary:
    """Deterministic token<->id enumeration for a CodecConfig."""

    def __init__(self, config: CodecConfig):
        self.config = config
        tokens: list[Token] = []
        tokens += [Token("Spec", name) for name in SPEC_TOKENS]
        tokens += [Token("Bar", "start"), Token("Bar", "end")]
        tokens += [Token("Position", p) for p in range(config.positions_per_bar)]
        tokens += [Token("Chord", label) for label in chord_labels()]
        tokens += [Token("Tempo", b) for b in range(config.tempo_bins)]
        tokens += [Token("Pitch", p) for p in range(config.pitch_min, config.pitch_max + 1)]
        tokens += [Token("Duration", d) for d in range(1, config.max_duration + 1)]
        tokens += [Token("Velocity", b) for b in range(config.velocity_bins)]
        self.tokens: tuple[Token, ...] = tuple(tokens)
        self._ids: dict[Token, int] = {tok: i for i, tok in enumerate(tokens)}
        if len(self._ids) != len(tokens):
            raise CodecError("inconsistent config produced duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, cls: str, value: object) -> int:
        try:
            return self._ids[Token(cls, value)]
        except KeyError:
            raise CodecError(f"token {cls}_{value} not in vocabulary") from None

    def token(self, token_id: int) -> Token:
        if not (0 <= token_id < self.size):
            raise CodecError(f"token id {token_id} out of range 0..{self.size - 1}")
        return self.tokens[token_id]

    def name(self, token_id: int) -> str:
        return self.token(token_id).name

    # Frequently used ids.
    @property
    def pad_id(self) -> int:
        return self.id_of("Spec", "pad")

    @property
    def bos_id(self) -> int:
        return self.id_of("Spec", "bos")

    @property
    def eos_id(self) -> int:
        return self.id_of("Spec", "eos")

    @property
    def ss_id(self) -> int:
        return self.id_of("Spec", "ss")

    @property
    def bar_start_id(self) -> int:
        return self.id_of("Bar", "start")

    @property
    def bar_end_id(self) -> int:
        return self.id_of("Bar", "end")

    def dump(self, path: str | Path) -> None:
        payload = {
            "size": self.size,
            "tokens": [tok.name for tok in self.tokens],
            "config": self.config.__dict__,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)


def build_vocabulary(config: CodecConfig | None = None) -> Vocabulary:
    return Vocabulary(config or CodecConfig())


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus [start, end) offsets of each bar within them."""

    ids: tuple[int, ...]
    bar_spans: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "bar_spans", tuple((int(s), int(e)) for s, e in self.bar_spans))
        prev_end = 0
        for s, e in self.bar_spans:
            if s < prev_end or e <= s or e > len(self.ids):
                raise CodecError(f"bar span ({s}, {e}) overlaps or exceeds sequence")
            prev_end = e

    @property
    def n_bars(self) -> int:
        return len(self.bar_spans)

    def bar_ids(self, k: int) -> tuple[int, ...]:
        s, e = self.bar_spans[k]
        return self.ids[s:e]

    def check_structure(self, vocab: Vocabulary) -> None:
        for s, e in self.bar_spans:
            if self.ids[s] != vocab.bar_start_id:
                raise ParseError("bar span does not begin with Bar_start", s)
            if self.ids[e - 1] != vocab.bar_end_id:
                raise ParseError("bar span does not end with Bar_end", e - 1)


_CHORD_TEMPLATES: list[tuple[str, np.ndarray]] | None = None


def _chord_templates() -> list[tuple[str, np.ndarray]]:
    global _CHORD_TEMPLATES
    if _CHORD_TEMPLATES is None:
        templates = []
        for root in range(12):
            for quality, intervals in CHORD_QUALITIES.items():
                vec = np.zeros(12)
                for iv in intervals:
                    vec[(root + iv) % 12] = 1.0
                templates.append((f"{ROOT_NAMES[root]}_{quality}", vec / np.linalg.norm(vec)))
        _CHORD_TEMPLATES = templates
    return _CHORD_TEMPLATES


def extract_chords(perf: PianoPerformance, grid: BeatGrid, bars: Sequence[Bar]) -> list[str]:
    """Best-matching chord label per bar by cosine similarity between the
    bar's duration-weighted pitch-class profile and 132 binary templates."""
    labels = []
    for bar in bars:
        start = grid.beat_time(bar.start_beat)
        end = grid.beat_time(bar.end_beat)
        profile = np.zeros(12)
        for note in perf.notes:
            overlap = min(note.offset, end) - max(note.onset, start)
            if overlap > 0:
                profile[note.pitch % 12] += overlap
        norm = np.linalg.norm(profile)
        if norm == 0:
            labels.append(NO_CHORD)
            continue
        unit = profile / norm
        scores = [float(unit @ vec) for _, vec in _chord_templates()]
        labels.append(_chord_templates()[int(np.argmax(scores))][0])
    return labels


def encode(
    perf: PianoPerformance,
    grid: BeatGrid,
    vocab: Vocabulary,
    chords: Sequence[tuple[float, str]] | None = None,
) -> TokenSequence:
    """Tokenize a performance against a beat grid.

    The grid must cover every note onset; notes on the trailing partial bar
    (beats after the last complete bar) are rejected. ``chords`` optionally
    supplies (time, label) chord changes; otherwise chords are extracted by
    template matching.
    """
    cfg = vocab.config
    sub = cfg.subdivisions
    bars = bars_from_grid(grid)
    if not bars:
        raise CodecError("grid holds no complete bar")
    beat_to_bar: dict[int, Bar] = {}
    for bar in bars:
        for beat in range(bar.start_beat, bar.end_beat):
            beat_to_bar[beat] = bar

    # Quantize notes to (bar, position, duration-steps, velocity-bin).
    per_bar_notes: dict[int, dict[int, list[tuple[int, int, int]]]] = {b.index: {} for b in bars}
    for note in perf.notes:
        try:
            on_pos = quantize_to_subdivision(note.onset, grid, sub)
        except OutOfGridError as exc:
            raise CodecError(f"note at {note.onset:.3f}s outside grid span") from exc
        off_pos = quantize_to_subdivision(note.offset, grid, sub, clamp=True)
        beat = on_pos // sub
        bar = beat_to_bar.get(beat)
        if bar is None:
            raise CodecError(f"note at {note.onset:.3f}s falls outside the complete bars")
        position = on_pos - bar.start_beat * sub
        steps = max(1, min(cfg.max_duration, off_pos - on_pos))
        per_bar_notes[bar.index].setdefault(position, []).append(
            (note.pitch, steps, cfg.velocity_bin(note.velocity))
        )

    # Tempo changes quantized to (bar, position); last event per slot wins.
    tempo_at: dict[tuple[int, int], int] = {}
    for ev in sorted(perf.tempo_events):
        pos = quantize_to_subdivision(ev.time, grid, sub, clamp=True)
        beat = pos // sub
        bar = beat_to_bar.get(beat)
        if bar is None:
            continue
        tempo_at[(bar.index, pos - bar.start_beat * sub)] = cfg.tempo_bin(ev.bpm)

    # Chord changes: provided track or per-bar template extraction.
    chord_at: dict[tuple[int, int], str] = {}
    valid_labels = set(chord_labels())
    if chords is not None:
        for time, label in sorted(chords):
            if label not in valid_labels:
                raise CodecError(f"unknown chord label {label!r}")
            pos = quantize_to_subdivision(time, grid, sub, clamp=True)
            beat = pos // sub
            bar = beat_to_bar.get(beat)
            if bar is None:
                continue
            chord_at[(bar.index, pos - bar.start_beat * sub)] = label
    else:
        # Extracted chords: silence never emits a token, so empty bars stay
        # [Bar_start][Bar_end]; an explicit chord track may pass "none".
        for bar, label in zip(bars, extract_chords(perf, grid, bars)):
            if label != NO_CHORD:
                chord_at[(bar.index, 0)] = label

    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    last_tempo_bin: int | None = None
    last_chord: str | None = None
    for bar in bars:
        span_start = len(ids)
        ids.append(vocab.bar_start_id)
        notes_by_pos = per_bar_notes[bar.index]
        for position in range(bar.n_beats * sub):
            key = (bar.index, position)
            chord = chord_at.get(key)
            emit_chord = chord is not None and chord != last_chord
            tempo_bin = tempo_at.get(key)
            emit_tempo = tempo_bin is not None and tempo_bin != last_tempo_bin
            notes = sorted(notes_by_pos.get(position, ()))
            if not (emit_chord or emit_tempo or notes):
                continue
            ids.append(vocab.id_of("Position", position))
            if emit_chord:
                ids.append(vocab.id_of("Chord", chord))
                last_chord = chord
            if emit_tempo:
                ids.append(vocab.id_of("Tempo", tempo_bin))
                last_tempo_bin = tempo_bin
            for pitch, steps, vel_bin in notes:
                if not (cfg.pitch_min <= pitch <= cfg.pitch_max):
                    raise CodecError(f"pitch {pitch} outside configured range")
                ids.append(vocab.id_of("Pitch", pitch))
                ids.append(vocab.id_of("Duration", steps))
                ids.append(vocab.id_of("Velocity", vel_bin))
        ids.append(vocab.bar_end_id)
        spans.append((span_start, len(ids)))
    return TokenSequence(tuple(ids), tuple(spans))


def decode(seq: TokenSequence, grid: BeatGrid, vocab: Vocabulary) -> PianoPerformance:
    """Reconstruct a performance: onsets/durations on the grid, velocities at
    bin centers, tempi at bin representatives. Chord tokens are dropped."""
    cfg = vocab.config
    sub = cfg.subdivisions
    bars = bars_from_grid(grid)
    if len(bars) < seq.n_bars:
        raise CodecError(f"grid holds {len(bars)} bars but sequence has {seq.n_bars}")
    notes: list[NoteEvent] = []
    tempi: list[TempoEvent] = []
    for k, (span_start, span_end) in enumerate(seq.bar_spans):
        bar = bars[k]
        if seq.ids[span_start] != vocab.bar_start_id:
            raise ParseError("expected Bar_start", span_start)
        position: int | None = None
        i = span_start + 1
        closed = False
        while i < span_end:
            tok = vocab.token(seq.ids[i])
            if tok.cls == "Bar" and tok.value == "end":
                if i != span_end - 1:
                    raise ParseError("Bar_end before span end", i)
                closed = True
                i += 1
            elif tok.cls == "Position":
                position = int(tok.value)
                i += 1
            elif tok.cls == "Chord":
                if position is None:
                    raise ParseError("Chord before any Position", i)
                i += 1
            elif tok.cls == "Tempo":
                if position is None:
                    raise ParseError("Tempo before any Position", i)
                t = subdivision_time(grid, bar.start_beat * sub + position, sub)
                tempi.append(TempoEvent(t, cfg.tempo_from_bin(int(tok.value))))
                i += 1
            elif tok.cls == "Pitch":
                if position is None:
                    raise ParseError("Pitch before any Position", i)
                if i + 2 >= span_end:
                    raise ParseError("Pitch without following Duration/Velocity", i)
                dur_tok = vocab.token(seq.ids[i + 1])
                vel_tok = vocab.token(seq.ids[i + 2])
                if dur_tok.cls != "Duration":
                    raise ParseError(f"expected Duration after Pitch, got {dur_tok.name}", i + 1)
                if vel_tok.cls != "Velocity":
                    raise ParseError(f"expected Velocity after Duration, got {vel_tok.name}", i + 2)
                start_idx = bar.start_beat * sub + position
                onset = subdivision_time(grid, start_idx, sub)
                offset = subdivision_time(grid, start_idx + int(dur_tok.value), sub)
                notes.append(
                    NoteEvent(
                        onset,
                        int(tok.value),
                        offset - onset,
                        cfg.velocity_from_bin(int(vel_tok.value)),
                    )
                )
                i += 3
            else:
                raise ParseError(f"unexpected token {tok.name} inside bar", i)
        if not closed:
            raise ParseError("bar span without Bar_end", span_end - 1)
    used_bars = bars[: seq.n_bars] or bars
    length = grid.beat_time(used_bars[-1].end_beat)
    if notes:
        length = max(length, max(n.offset for n in notes))
    return PianoPerformance(tuple(notes), tuple(tempi), length)


def write_token_jsonl(records: Iterable[tuple[str, TokenSequence]], path: str | Path) -> None:
    """One record per piece: {"id", "tokens", "bar_spans"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for piece_id, seq in records:
            fh.write(
                json.dumps(
                    {
                        "id": piece_id,
                        "tokens": list(seq.ids),
                        "bar_spans": [list(span) for span in seq.bar_spans],
                    }
                )
                + "\n"
            )


def read_token_jsonl(path: str | Path) -> list[tuple[str, TokenSequence]]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if "_meta" in obj:  # provenance line written by the CLI
                    continue
                seq = TokenSequence(tuple(obj["tokens"]), tuple(map(tuple, obj["bar_spans"])))
                records.append((obj["id"], seq))
            except (ValueError, KeyError) as exc:
                raise CodecError(f"{path}:{line_no}: malformed token record") from exc
    return records
