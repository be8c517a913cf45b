"""Corpus-level deviation statistics between songs and their piano covers.

All deviations are max/min ratios (>= 1, symmetric in argument order):
duration compares audio lengths, tempo compares estimated global BPM, and
IOI compares mean inter-onset intervals between an original performance and
its remapped (strongly-aligned) version.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import BeatGrid, PianoCoverError, PianoPerformance


class StatsError(PianoCoverError):
    """Invalid input for a deviation statistic."""


def _ratio(a: float, b: float, what: str) -> float:
    if a <= 0 or b <= 0:
        raise StatsError(f"{what} must be positive, got {a} and {b}")
    return max(a, b) / min(a, b)


def duration_deviation(len_a: float, len_b: float) -> float:
    """Longer duration divided by the shorter one."""
    return _ratio(len_a, len_b, "duration")


def estimate_bpm(grid: BeatGrid) -> float:
    """Global BPM estimate: 60 over the median inter-beat interval."""
    return 60.0 / grid.median_interval()


def tempo_deviation(bpm_a: float, bpm_b: float) -> float:
    """Deviation ratio between two global BPM estimates."""
    return _ratio(bpm_a, bpm_b, "bpm")


def mean_ioi(perf: PianoPerformance) -> float:
    onsets = sorted(n.onset for n in perf.notes)
    if len(onsets) < 2:
        raise StatsError(f"need at least 2 notes for IOIs, got {len(onsets)}")
    return float(np.mean(np.diff(onsets)))


def ioi_deviation(original: PianoPerformance, remapped: PianoPerformance) -> float:
    """Ratio of mean inter-onset intervals before/after remapping."""
    if len(original.notes) != len(remapped.notes):
        raise StatsError(
            f"note counts differ: {len(original.notes)} vs {len(remapped.notes)}; "
            "remapping is expected to preserve notes"
        )
    return _ratio(mean_ioi(original), mean_ioi(remapped), "mean IOI")


def _format_stat(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std())
    return {"mean": mean, "std": std, "formatted": f"{mean:.2f} ± {std:.2f}"}


def corpus_report(rows: Iterable[dict]) -> dict:
    """Aggregate per-pair deviation rows into mean +/- std summaries.

    Each row may carry any of the keys ``duration_deviation``,
    ``tempo_deviation``, ``ioi_deviation``.
    """
    columns: dict[str, list[float]] = {}
    n = 0
    for row in rows:
        n += 1
        for key in ("duration_deviation", "tempo_deviation", "ioi_deviation"):
            if key in row and row[key] is not None:
                columns.setdefault(key, []).append(float(row[key]))
    report: dict = {"pairs": n}
    for key, values in columns.items():
        report[key] = _format_stat(values)
    return report


def write_report_json(report: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)


def write_report_csv(report: dict, path: str | Path) -> None:
    keys = [k for k in ("duration_deviation", "tempo_deviation", "ioi_deviation") if k in report]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("statistic,mean,std,formatted\n")
        for key in keys:
            stat = report[key]
            fh.write(f"{key},{stat['mean']:.6f},{stat['std']:.6f},{stat['formatted']}\n")
