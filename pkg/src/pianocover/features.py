"""Chroma feature extraction from audio (WAV) and from symbolic performances.

Audio goes through a coarse STFT -> pitch-class folding -> temporal smoothing
front end at ~10 frames/s; that resolution is plenty for beat-level warping.
The same FeatureMatrix container carries imported external embeddings
(dim > 12), which skip the chroma normalization invariant.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import PianoCoverError, PianoPerformance

STFT_WINDOW = 4096
TARGET_FRAME_RATE = 10.0
SMOOTHING_FRAMES = 3

_FMX_MAGIC = b"FMX1"


class WavError(PianoCoverError):
    """Malformed or unsupported WAV content."""


class FeatureError(PianoCoverError):
    """Feature extraction or feature-file handling failure."""


@dataclass(frozen=True)
class FeatureMatrix:
    """Frames x dim feature array at a fixed frame rate.

    Chroma matrices (dim == 12) keep every frame L2-normalized or all-zero;
    imported embeddings are passed through untouched.
    """

    frames: np.ndarray
    frame_rate: float
    source: str  # "audio" | "midi-synthetic" | "imported"

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise FeatureError(f"frames must be 2-D, got shape {frames.shape}")
        if self.frame_rate <= 0:
            raise FeatureError(f"frame_rate must be > 0, got {self.frame_rate}")
        if self.source not in ("audio", "midi-synthetic", "imported"):
            raise FeatureError(f"unknown source {self.source!r}")
        if self.dim == 12 and frames.size:
            norms = np.linalg.norm(frames, axis=1)
            live = norms > 0
            if not np.allclose(norms[live], 1.0, atol=1e-6):
                raise FeatureError("chroma frames must be L2-normalized or all-zero")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def count(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.count / self.frame_rate


def _normalize_rows(frames: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(frames, axis=1, keepdims=True)
    out = np.zeros_like(frames)
    live = norms[:, 0] > 1e-12
    out[live] = frames[live] / norms[live]
    return out


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM WAV into a mono float buffer in [-1, 1].

    Stereo is downmixed as (L+R)/2. Compressed subformats, >2 channels,
    truncated headers, and RIFF size mismatches raise :class:`WavError`.
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise WavError("truncated header: file shorter than RIFF preamble")
    if data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("not a RIFF/WAVE file")
    riff_size = struct.unpack_from("<I", data, 4)[0]
    if riff_size + 8 != len(data):
        raise WavError(f"RIFF size mismatch: header says {riff_size + 8} bytes, file has {len(data)}")

    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        chunk_size = struct.unpack_from("<I", data, pos + 4)[0]
        body_start = pos + 8
        if body_start + chunk_size > len(data):
            raise WavError(f"truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", data, body_start)
        elif chunk_id == b"data":
            pcm = data[body_start : body_start + chunk_size]
        pos = body_start + chunk_size + (chunk_size & 1)

    if fmt is None or pcm is None:
        raise WavError("missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise WavError(f"unsupported WAV subformat {audio_format}; only uncompressed PCM accepted")
    if bits != 16:
        raise WavError(f"only 16-bit PCM supported, got {bits}-bit")
    if channels not in (1, 2):
        raise WavError(f"only mono/stereo supported, got {channels} channels")

    samples = np.frombuffer(pcm[: len(pcm) - len(pcm) % (2 * channels)], dtype="<i2")
    samples = samples.astype(np.float64) / 32768.0
    if channels == 2:
        samples = (samples[0::2] + samples[1::2]) / 2.0
    return samples, sample_rate


def chromagram(pcm: np.ndarray, sample_rate: int) -> FeatureMatrix:
    """Fold an STFT magnitude spectrogram to 12 pitch classes at ~10 frames/s."""
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.size == 0:
        raise FeatureError("empty PCM buffer")
    if pcm.size < STFT_WINDOW:
        raise FeatureError(f"pcm shorter than one analysis window ({STFT_WINDOW} samples)")
    hop = max(1, round(sample_rate / TARGET_FRAME_RATE))
    frame_rate = sample_rate / hop

    window = np.hanning(STFT_WINDOW)
    padded = np.concatenate([np.zeros(STFT_WINDOW // 2), pcm, np.zeros(STFT_WINDOW // 2)])
    n_frames = 1 + (len(padded) - STFT_WINDOW) // hop

    # FFT bin -> pitch class, restricted to the piano range.
    freqs = np.fft.rfftfreq(STFT_WINDOW, 1.0 / sample_rate)
    with np.errstate(divide="ignore"):
        midi = 69.0 + 12.0 * np.log2(np.where(freqs > 0, freqs, np.nan) / 440.0)
    nearest = np.round(midi)
    usable = (nearest >= 21) & (nearest <= 108)
    bin_pc = np.where(usable, nearest % 12, -1).astype(np.int64)

    chroma = np.zeros((n_frames, 12))
    for f in range(n_frames):
        segment = padded[f * hop : f * hop + STFT_WINDOW] * window
        energy = np.abs(np.fft.rfft(segment)) ** 2
        for pc in range(12):
            chroma[f, pc] = energy[bin_pc == pc].sum()

    kernel = np.ones(SMOOTHING_FRAMES) / SMOOTHING_FRAMES
    smoothed = np.stack([np.convolve(chroma[:, pc], kernel, mode="same") for pc in range(12)], axis=1)
    return FeatureMatrix(_normalize_rows(smoothed), frame_rate, "audio")


def chroma_from_midi(perf: PianoPerformance, frame_rate: float = TARGET_FRAME_RATE) -> FeatureMatrix:
    """Velocity-weighted pitch-class activity of the sounding notes per frame."""
    if frame_rate <= 0:
        raise FeatureError(f"frame_rate must be > 0, got {frame_rate}")
    n_frames = max(1, math.ceil(perf.length * frame_rate - 1e-9))
    chroma = np.zeros((n_frames, 12))
    for note in perf.notes:
        first = max(0, math.ceil(note.onset * frame_rate - 1e-9))
        last = min(n_frames, math.ceil(note.offset * frame_rate - 1e-9))
        if last > first:
            chroma[first:last, note.pitch % 12] += note.velocity
    return FeatureMatrix(_normalize_rows(chroma), frame_rate, "midi-synthetic")


def save_features(features: FeatureMatrix, path: str | Path) -> None:
    """Write the binary feature format: magic, JSON header, float32 payload."""
    header = json.dumps(
        {
            "frame_rate": features.frame_rate,
            "dim": features.dim,
            "count": features.count,
            "source": features.source,
        }
    ).encode("utf-8")
    payload = np.ascontiguousarray(features.frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_FMX_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_features(path: str | Path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != _FMX_MAGIC:
        raise FeatureError(f"{path}: not a feature file (bad magic)")
    header_len = struct.unpack_from("<I", data, 4)[0]
    if 8 + header_len > len(data):
        raise FeatureError(f"{path}: truncated header")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
        frame_rate, dim, count = header["frame_rate"], header["dim"], header["count"]
        source = header.get("source", "imported")
    except (ValueError, KeyError) as exc:
        raise FeatureError(f"{path}: malformed header") from exc
    payload = data[8 + header_len :]
    if len(payload) != 4 * dim * count:
        raise FeatureError(f"{path}: payload size {len(payload)} != {4 * dim * count}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
    return FeatureMatrix(frames, frame_rate, source)
