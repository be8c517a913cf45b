"""Minimal pre-LN transformer blocks shared by the condition adapter
(bidirectional) and the decoder (causal)."""

from __future__ import annotations

import math

import torch
from torch import nn


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0, bias: bool = True):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model, bias=bias)
        self.proj = nn.Linear(d_model, d_model, bias=bias)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        causal: bool = False,
        key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, length, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, length, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal:
            future = torch.triu(
                torch.ones(length, length, dtype=torch.bool, device=x.device), diagonal=1
            )
            scores = scores.masked_fill(future, float("-inf"))
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.dropout(attn)
        out = (attn @ v).transpose(1, 2).reshape(b, length, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(
        self,
        d_model: int,
        n_heads: int,
        ffn_dim: int,
        dropout: float = 0.0,
        bias: bool = True,
    ):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads, dropout, bias)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_dim, bias=bias),
            nn.GELU(),
            nn.Linear(ffn_dim, d_model, bias=bias),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        causal: bool = False,
        key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.ln1(x), causal, key_padding_mask))
        x = x + self.dropout(self.ffn(self.ln2(x)))
        return x


def init_transformer_weights(module: nn.Module, n_layers: int) -> None:
    """Scaled-normal init: std 0.02, residual projections 0.02/sqrt(2*layers)."""
    residual_std = 0.02 / math.sqrt(2 * max(1, n_layers))
    for name, param in module.named_parameters():
        if param.dim() >= 2:
            std = residual_std if name.endswith(("proj.weight", "ffn.2.weight")) else 0.02
            nn.init.normal_(param, mean=0.0, std=std)
        elif "bias" in name:
            nn.init.zeros_(param)
