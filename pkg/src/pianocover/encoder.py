"""Condition encoding: a frozen, hand-crafted per-beat feature extractor
standing in for a pretrained audio prior, cascaded with a trainable
bidirectional transformer adapter that projects into the decoder width.

The extractor has no parameters; gradients only ever reach the adapter
(and the decoder downstream). Imported embedding files (dim != 12) pass
through the extractor as per-beat mean pools.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import Bar, BeatGrid, PianoCoverError
from .features import FeatureError, FeatureMatrix
from .transformer import TransformerBlock, init_transformer_weights

CHROMA_CONDITION_DIM = 14  # 12 chroma + onset strength + log energy


class EncoderError(PianoCoverError):
    """Condition extraction or adapter configuration failure."""


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = CHROMA_CONDITION_DIM
    d_model: int = 512
    n_layers: int = 4
    n_heads: int = 8
    ffn_dim: int = 0  # 0 -> 4 * d_model
    dropout: float = 0.0
    bias: bool = True

    def __post_init__(self) -> None:
        if min(self.input_dim, self.d_model, self.n_layers, self.n_heads) <= 0:
            raise EncoderError("encoder dims must be positive")
        if self.d_model % self.n_heads != 0:
            raise EncoderError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)


@dataclass(frozen=True)
class ConditionBlock:
    """Raw per-bar condition features: (n_vectors, input_dim), one vector
    per beat of the pooled span."""

    bar_index: int
    features: np.ndarray

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise EncoderError(f"condition block must be (n_vectors, dim), got {features.shape}")
        if not np.all(np.isfinite(features)):
            raise EncoderError("condition block contains non-finite values")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)

    @property
    def n_vectors(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ConditionEmbedding:
    """Adapter output for one bar: (n_vectors, d_model)."""

    bar_index: int
    vectors: np.ndarray


def _frame_range(t0: float, t1: float, frame_rate: float, count: int) -> tuple[int, int]:
    first = max(0, math.ceil(t0 * frame_rate - 1e-9))
    last = min(count, math.ceil(t1 * frame_rate - 1e-9))
    return first, last


def extract_condition_features(features: FeatureMatrix, grid: BeatGrid, bar: Bar) -> np.ndarray:
    """Pool features per beat over the bar's span, returning
    (n_beats, input_dim).

    Chroma input (dim 12) yields mean chroma + mean onset strength (positive
    spectral-flux of the chroma) + log(1 + mean frame norm); silent spans are
    all-zero. Any other dim is treated as imported embeddings and mean-pooled
    unchanged. Beat sub-spans holding no frame pool to zero vectors.
    """
    start_time = grid.beat_time(bar.start_beat)
    if start_time >= features.duration:
        raise FeatureError(
            f"bar {bar.index} starts at {start_time:.3f}s, beyond features "
            f"({features.duration:.3f}s)"
        )
    frames = features.frames
    chroma_mode = features.dim == 12
    if chroma_mode:
        flux = np.zeros(features.count)
        if features.count > 1:
            flux[1:] = np.maximum(frames[1:] - frames[:-1], 0.0).sum(axis=1)
        norms = np.linalg.norm(frames, axis=1)
    out_dim = CHROMA_CONDITION_DIM if chroma_mode else features.dim
    pooled = np.zeros((bar.n_beats, out_dim))
    for k, beat in enumerate(range(bar.start_beat, bar.end_beat)):
        first, last = _frame_range(
            grid.beat_time(beat), grid.beat_time(beat + 1), features.frame_rate, features.count
        )
        if last <= first:
            continue
        if chroma_mode:
            pooled[k, :12] = frames[first:last].mean(axis=0)
            pooled[k, 12] = flux[first:last].mean()
            pooled[k, 13] = math.log1p(norms[first:last].mean())
        else:
            pooled[k] = frames[first:last].mean(axis=0)
    return pooled


class ConditionAdapter(nn.Module):
    """Bidirectional self-attention over one block's vectors, then a linear
    projection to the decoder width."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.in_proj = nn.Linear(config.input_dim, config.d_model, bias=config.bias)
        self.blocks = nn.ModuleList(
            TransformerBlock(
                config.d_model, config.n_heads, config.ffn_dim, config.dropout, config.bias
            )
            for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.out_proj = nn.Linear(config.d_model, config.d_model, bias=config.bias)
        init_transformer_weights(self, config.n_layers)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.config.input_dim:
            raise EncoderError(
                f"adapter expects input dim {self.config.input_dim}, got {x.shape[-1]}"
            )
        h = self.in_proj(x)
        for block in self.blocks:
            h = block(h, causal=False, key_padding_mask=key_padding_mask)
        h = self.out_proj(self.ln_f(h))
        return h.squeeze(0) if squeeze else h


def adapter_forward(adapter: ConditionAdapter, blocks: list[ConditionBlock]) -> list[ConditionEmbedding]:
    """Run the adapter over raw blocks (no gradient tracking); training code
    calls the module directly inside its graph instead."""
    dtype = next(adapter.parameters()).dtype
    out = []
    with torch.no_grad():
        for block in blocks:
            x = torch.tensor(block.features, dtype=dtype)
            out.append(ConditionEmbedding(block.bar_index, adapter(x).numpy()))
    return out
