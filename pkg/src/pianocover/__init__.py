"""Piano cover generation toolkit: weakly-aligned song/piano pairing,
bar-structured tokenization, conditioned sequence modeling with two-stage
training, and objective evaluation metrics."""

__version__ = "0.1.0"

from .core import (
    Bar,
    BeatGrid,
    NoteEvent,
    PianoCoverError,
    PianoPerformance,
    TempoEvent,
    bars_from_grid,
    build_beat_grid_from_tempo,
    quantize_time,
)
from .remi_codec import CodecConfig, TokenSequence, Vocabulary, build_vocabulary, decode, encode
from .features import FeatureMatrix, chroma_from_midi, chromagram, read_wav
from .alignment import TimeMap, WarpPath, dtw_path, remap_notes, time_map_from_path
from .beat_align import BeatAlignment, WeakAlignedPair, beat_align, build_weak_pair, find_invalid_bars
from .dataset import InterleavedSequence, TrainingSegment, build_interleaved, filter_pair, segment
from .encoder import ConditionAdapter, ConditionBlock, EncoderConfig, extract_condition_features
from .model import (
    CoverModel,
    ModelCheckpoint,
    ModelConfig,
    SamplingConfig,
    TrainConfig,
    finetune_loss,
    generate,
    sequence_loss,
    train,
)
from .metrics import MelodyContour, grooving_similarity_next, mca, pitch_class_entropy_4, skyline
from .stats import duration_deviation, estimate_bpm, ioi_deviation, tempo_deviation
