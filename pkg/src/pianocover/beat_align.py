"""Beat-level weak alignment between a piano performance and a song.

Each piano beat is assigned the song beat nearest to its mapped time
(argmin over absolute difference, ties to the smaller index). A bar is
invalid when its first and last beats land on the same song beat; weak
pairing drops those bars from the condition/target correspondence but
never re-times a single piano note.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import AlignmentError, TimeMap
from .core import Bar, BeatGrid, PianoPerformance
from .features import FeatureMatrix
from .remi_codec import TokenSequence


@dataclass(frozen=True)
class BeatAlignment:
    """``mapping[i]`` is the song beat index aligned to piano beat ``i``."""

    mapping: tuple[int, ...]
    piano_grid: BeatGrid
    song_grid: BeatGrid

    def __post_init__(self) -> None:
        if len(self.mapping) != self.piano_grid.count:
            raise AlignmentError(
                f"mapping length {len(self.mapping)} != piano beat count {self.piano_grid.count}"
            )
        for j in self.mapping:
            if not (0 <= j < self.song_grid.count):
                raise AlignmentError(f"song beat index {j} out of range")

    @property
    def is_monotone(self) -> bool:
        return all(b >= a for a, b in zip(self.mapping, self.mapping[1:]))


def beat_align(time_map: TimeMap, piano_grid: BeatGrid, song_grid: BeatGrid) -> BeatAlignment:
    """Nearest-song-beat assignment for every piano beat under the time map."""
    piano_beats = np.asarray(piano_grid.beat_times)
    song_beats = np.asarray(song_grid.beat_times)
    mapped = np.atleast_1d(time_map(piano_beats))
    # argmin returns the first (smallest) index on exact ties.
    mapping = np.abs(mapped[:, None] - song_beats[None, :]).argmin(axis=1)
    return BeatAlignment(tuple(int(j) for j in mapping), piano_grid, song_grid)


def find_invalid_bars(alignment: BeatAlignment, bars: Sequence[Bar]) -> set[int]:
    """Bars whose first and last beats map to the same song beat."""
    invalid = set()
    for bar in bars:
        if not (0 <= bar.start_beat < len(alignment.mapping)) or not (
            0 <= bar.end_beat < len(alignment.mapping)
        ):
            raise AlignmentError(
                f"bar {bar.index} spans beats {bar.start_beat}..{bar.end_beat}, "
                f"outside the aligned grid of {len(alignment.mapping)} beats"
            )
        if alignment.mapping[bar.start_beat] == alignment.mapping[bar.end_beat]:
            invalid.add(bar.index)
    return invalid


@dataclass(frozen=True)
class WeakAlignedPair:
    """A song/piano pair whose correspondence is recorded at the beat level
    only; the piano notes and tokens are byte-identical to the standalone
    encoding."""

    pair_id: str
    piano: PianoPerformance
    piano_tokens: TokenSequence
    song_features: FeatureMatrix
    alignment: BeatAlignment
    bars: tuple[Bar, ...]
    valid_bars: tuple[Bar, ...]

    def __post_init__(self) -> None:
        mapping = self.alignment.mapping
        for bar in self.valid_bars:
            if mapping[bar.start_beat] == mapping[bar.end_beat]:
                raise AlignmentError(f"bar {bar.index} marked valid but start/end beats collapse")

    @property
    def invalid_bar_indices(self) -> set[int]:
        return {b.index for b in self.bars} - {b.index for b in self.valid_bars}


def build_weak_pair(
    pair_id: str,
    piano: PianoPerformance,
    piano_tokens: TokenSequence,
    song_features: FeatureMatrix,
    time_map: TimeMap,
    piano_grid: BeatGrid,
    song_grid: BeatGrid,
    bars: Sequence[Bar],
) -> WeakAlignedPair:
    """Assemble a weakly-aligned pair: compute the beat alignment, drop
    invalid bars, and record everything without touching piano timing."""
    if len(bars) != piano_tokens.n_bars:
        raise AlignmentError(
            f"{pair_id}: {len(bars)} bars on the grid but {piano_tokens.n_bars} token spans"
        )
    alignment = beat_align(time_map, piano_grid, song_grid)
    invalid = find_invalid_bars(alignment, bars)
    valid = tuple(b for b in bars if b.index not in invalid)
    return WeakAlignedPair(
        pair_id=pair_id,
        piano=piano,
        piano_tokens=piano_tokens,
        song_features=song_features,
        alignment=alignment,
        bars=tuple(bars),
        valid_bars=valid,
    )


def pair_manifest_record(pair: WeakAlignedPair, feature_path: str | None = None) -> dict:
    return {
        "id": pair.pair_id,
        "alignment": list(pair.alignment.mapping),
        "monotone": pair.alignment.is_monotone,
        "valid_bars": [b.index for b in pair.valid_bars],
        "n_bars": len(pair.bars),
        "features": feature_path,
    }


def write_pair_manifest(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_pair_manifest(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records
