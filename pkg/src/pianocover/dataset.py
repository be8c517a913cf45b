"""Pair filtering, interleaved condition/target sequence assembly, and
packing into fixed-length training segments.

An interleaved sequence alternates, bar by bar, a condition block (per-beat
feature vectors) with that bar's target tokens. Paired sequences condition
each piano bar on the song features between its aligned song beats and drop
invalid bars; piano-only sequences condition every bar on the piano's own
features, which aligns exactly by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .beat_align import WeakAlignedPair
from .core import Bar, BeatGrid, PianoCoverError, PianoPerformance
from .encoder import ConditionBlock, extract_condition_features
from .features import FeatureMatrix, load_features, save_features
from .remi_codec import TokenSequence, Vocabulary

DEFAULT_SEGMENT_LENGTH = 1024
MIN_MCA = 0.05
MAX_LENGTH_DEVIATION = 0.15


class DatasetError(PianoCoverError):
    """Corpus assembly failure."""


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: str | None = None  # "low-mca" | "length"


def filter_pair(
    mca: float,
    length_deviation: float,
    min_mca: float = MIN_MCA,
    max_length_deviation: float = MAX_LENGTH_DEVIATION,
) -> FilterDecision:
    """Reject pairs with melody chroma accuracy below ``min_mca`` or an
    audio length difference above ``max_length_deviation``."""
    if mca < min_mca:
        return FilterDecision(keep=False, reason="low-mca")
    if length_deviation > max_length_deviation:
        return FilterDecision(keep=False, reason="length")
    return FilterDecision(keep=True)


@dataclass(frozen=True)
class TargetSpan:
    bar_index: int
    token_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.token_ids:
            raise DatasetError(f"bar {self.bar_index} has an empty token span")


@dataclass(frozen=True)
class PianoOnlyRecord:
    """A standalone piano piece conditioned on its own features."""

    piece_id: str
    perf: PianoPerformance
    tokens: TokenSequence
    features: FeatureMatrix
    grid: BeatGrid
    bars: tuple[Bar, ...]


@dataclass(frozen=True)
class InterleavedSequence:
    piece_id: str
    kind: str  # "paired" | "piano_only"
    elements: tuple[ConditionBlock | TargetSpan, ...]

    def __post_init__(self) -> None:
        if self.kind not in ("paired", "piano_only"):
            raise DatasetError(f"unknown sequence kind {self.kind!r}")
        if not self.elements or len(self.elements) % 2 != 0:
            raise DatasetError("elements must be non-empty CONDITION/TARGET pairs")
        prev_bar = -1
        for k in range(0, len(self.elements), 2):
            cond, target = self.elements[k], self.elements[k + 1]
            if not isinstance(cond, ConditionBlock) or not isinstance(target, TargetSpan):
                raise DatasetError("elements must strictly alternate CONDITION, TARGET")
            if cond.bar_index != target.bar_index:
                raise DatasetError(
                    f"condition bar {cond.bar_index} != target bar {target.bar_index}"
                )
            if cond.bar_index <= prev_bar:
                raise DatasetError("bar indices must be strictly ascending")
            prev_bar = cond.bar_index

    @property
    def n_bars(self) -> int:
        return len(self.elements) // 2

    @property
    def bar_pairs(self) -> list[tuple[ConditionBlock, TargetSpan]]:
        return [(self.elements[k], self.elements[k + 1]) for k in range(0, len(self.elements), 2)]

    @property
    def total_length(self) -> int:
        """Flattened slot count including the leading stream marker."""
        return 1 + sum(c.n_vectors + len(t.token_ids) for c, t in self.bar_pairs)


def _spans_for_bars(tokens: TokenSequence, bars: Sequence[Bar]) -> dict[int, tuple[int, ...]]:
    if tokens.n_bars != len(bars):
        raise DatasetError(f"{tokens.n_bars} token spans but {len(bars)} bars")
    return {bar.index: tokens.bar_ids(k) for k, bar in enumerate(bars)}


def interleave_paired(
    piece_id: str,
    tokens: TokenSequence,
    bars: Sequence[Bar],
    valid_bar_indices: Sequence[int],
    alignment_mapping: Sequence[int],
    song_features: FeatureMatrix,
    song_grid: BeatGrid,
) -> InterleavedSequence:
    by_bar = _spans_for_bars(tokens, bars)
    valid = set(valid_bar_indices)
    elements: list[ConditionBlock | TargetSpan] = []
    for bar in bars:
        if bar.index not in valid:
            continue
        j0 = alignment_mapping[bar.start_beat]
        j1 = alignment_mapping[bar.end_beat]
        lo, hi = min(j0, j1), max(j0, j1)  # non-monotone maps may reverse the span
        song_span = Bar(index=bar.index, start_beat=lo, end_beat=hi)
        block = extract_condition_features(song_features, song_grid, song_span)
        elements.append(ConditionBlock(bar.index, block))
        elements.append(TargetSpan(bar.index, by_bar[bar.index]))
    if not elements:
        raise DatasetError(f"{piece_id}: no valid bars to interleave")
    return InterleavedSequence(piece_id, "paired", tuple(elements))


def interleave_piano_only(
    piece_id: str,
    tokens: TokenSequence,
    bars: Sequence[Bar],
    features: FeatureMatrix,
    grid: BeatGrid,
) -> InterleavedSequence:
    by_bar = _spans_for_bars(tokens, bars)
    elements: list[ConditionBlock | TargetSpan] = []
    for bar in bars:
        block = extract_condition_features(features, grid, bar)
        elements.append(ConditionBlock(bar.index, block))
        elements.append(TargetSpan(bar.index, by_bar[bar.index]))
    if not elements:
        raise DatasetError(f"{piece_id}: no bars to interleave")
    return InterleavedSequence(piece_id, "piano_only", tuple(elements))


def build_interleaved(record: WeakAlignedPair | PianoOnlyRecord) -> InterleavedSequence:
    """Interleave a weakly-aligned pair (valid bars only) or a piano-only
    record (all bars, self-conditioned)."""
    if isinstance(record, WeakAlignedPair):
        return interleave_paired(
            record.pair_id,
            record.piano_tokens,
            record.bars,
            [b.index for b in record.valid_bars],
            record.alignment.mapping,
            record.song_features,
            record.alignment.song_grid,
        )
    if isinstance(record, PianoOnlyRecord):
        return interleave_piano_only(
            record.piece_id, record.tokens, record.bars, record.features, record.grid
        )
    raise DatasetError(f"cannot interleave {type(record).__name__}")


@dataclass(frozen=True)
class TrainingSegment:
    """A packed window of the interleaved stream.

    ``tokens`` holds pad at condition slots; ``loss_mask`` is true exactly on
    target token positions (never on markers or condition slots).
    """

    piece_id: str
    kind: str
    tokens: np.ndarray
    cond_mask: np.ndarray
    loss_mask: np.ndarray
    cond_blocks: tuple[tuple[int, ConditionBlock], ...]  # (first slot, block)
    continuation: bool

    def __post_init__(self) -> None:
        if not (len(self.tokens) == len(self.cond_mask) == len(self.loss_mask)):
            raise DatasetError("segment arrays must share one length")
        if np.any(self.loss_mask & self.cond_mask):
            raise DatasetError("loss mask must be false on condition slots")
        for start, block in self.cond_blocks:
            if not np.all(self.cond_mask[start : start + block.n_vectors]):
                raise DatasetError("condition block slots must be marked in cond_mask")

    def __len__(self) -> int:
        return len(self.tokens)


def segment(
    seq: InterleavedSequence,
    vocab: Vocabulary,
    max_len: int = DEFAULT_SEGMENT_LENGTH,
) -> list[TrainingSegment]:
    """Greedy packing of whole bars into segments of at most ``max_len``
    slots. The first segment opens with [bos], continuations with [ss]."""
    if max_len < 2:
        raise DatasetError(f"max_len {max_len} too small")
    segments: list[TrainingSegment] = []
    pending: list[tuple[ConditionBlock, TargetSpan]] = []

    def flush() -> None:
        if not pending:
            return
        marker = vocab.ss_id if segments else vocab.bos_id
        tokens = [marker]
        cond_mask = [False]
        loss_mask = [False]
        blocks: list[tuple[int, ConditionBlock]] = []
        for cond, target in pending:
            blocks.append((len(tokens), cond))
            tokens.extend([vocab.pad_id] * cond.n_vectors)
            cond_mask.extend([True] * cond.n_vectors)
            loss_mask.extend([False] * cond.n_vectors)
            tokens.extend(target.token_ids)
            cond_mask.extend([False] * len(target.token_ids))
            loss_mask.extend([True] * len(target.token_ids))
        segments.append(
            TrainingSegment(
                piece_id=seq.piece_id,
                kind=seq.kind,
                tokens=np.asarray(tokens, dtype=np.int64),
                cond_mask=np.asarray(cond_mask, dtype=bool),
                loss_mask=np.asarray(loss_mask, dtype=bool),
                cond_blocks=tuple(blocks),
                continuation=len(segments) > 0,
            )
        )
        pending.clear()

    used = 1  # leading marker
    for cond, target in seq.bar_pairs:
        bar_len = cond.n_vectors + len(target.token_ids)
        if 1 + bar_len > max_len:
            raise DatasetError(
                f"{seq.piece_id}: bar {cond.bar_index} needs {1 + bar_len} slots, "
                f"segment limit is {max_len}"
            )
        if used + bar_len > max_len:
            flush()
            used = 1
        pending.append((cond, target))
        used += bar_len
    flush()
    return segments


def save_dataset(
    items: Sequence[WeakAlignedPair | PianoOnlyRecord],
    out_dir: str | Path,
) -> Path:
    """Materialize records under ``out_dir``: dataset.jsonl + feature files."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "dataset.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for item in items:
            if isinstance(item, WeakAlignedPair):
                feat_name = f"features/{item.pair_id}.fmx"
                save_features(item.song_features, out_dir / feat_name)
                record = {
                    "id": item.pair_id,
                    "kind": "paired",
                    "tokens": list(item.piano_tokens.ids),
                    "bar_spans": [list(s) for s in item.piano_tokens.bar_spans],
                    "bars": [[b.start_beat, b.end_beat] for b in item.bars],
                    "valid_bars": [b.index for b in item.valid_bars],
                    "alignment": list(item.alignment.mapping),
                    "monotone": item.alignment.is_monotone,
                    "song_beats": list(item.alignment.song_grid.beat_times),
                    "song_downbeats": list(item.alignment.song_grid.downbeat_indices),
                    "features": feat_name,
                }
            elif isinstance(item, PianoOnlyRecord):
                feat_name = f"features/{item.piece_id}.fmx"
                save_features(item.features, out_dir / feat_name)
                record = {
                    "id": item.piece_id,
                    "kind": "piano_only",
                    "tokens": list(item.tokens.ids),
                    "bar_spans": [list(s) for s in item.tokens.bar_spans],
                    "bars": [[b.start_beat, b.end_beat] for b in item.bars],
                    "piano_beats": list(item.grid.beat_times),
                    "piano_downbeats": list(item.grid.downbeat_indices),
                    "features": feat_name,
                }
            else:
                raise DatasetError(f"cannot save {type(item).__name__}")
            fh.write(json.dumps(record) + "\n")
    return manifest


def load_dataset(dataset_dir: str | Path) -> list[InterleavedSequence]:
    """Rebuild interleaved sequences from a materialized dataset directory."""
    dataset_dir = Path(dataset_dir)
    manifest = dataset_dir / "dataset.jsonl"
    if not manifest.exists():
        raise DatasetError(f"no dataset.jsonl under {dataset_dir}")
    sequences = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            tokens = TokenSequence(tuple(rec["tokens"]), tuple(map(tuple, rec["bar_spans"])))
            bars = tuple(
                Bar(index=k, start_beat=s, end_beat=e) for k, (s, e) in enumerate(rec["bars"])
            )
            features = load_features(dataset_dir / rec["features"])
            if rec["kind"] == "paired":
                song_grid = BeatGrid(tuple(rec["song_beats"]), tuple(rec["song_downbeats"]))
                sequences.append(
                    interleave_paired(
                        rec["id"],
                        tokens,
                        bars,
                        rec["valid_bars"],
                        rec["alignment"],
                        features,
                        song_grid,
                    )
                )
            else:
                grid = BeatGrid(tuple(rec["piano_beats"]), tuple(rec["piano_downbeats"]))
                sequences.append(interleave_piano_only(rec["id"], tokens, bars, features, grid))
    return sequences
