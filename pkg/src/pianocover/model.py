"""Decoder-only transformer over interleaved condition/target streams,
two-stage training (pretrain on piano-only data, fine-tune on a mix of
piano-only and paired data with a weighted loss), and bar-wise generation.

Logit convention: ``logits[p]`` is the model's distribution for the stream
token AT position ``p`` given strictly preceding context (row 0 is zeros and
never scored). Loss is masked cross-entropy over target-token positions
only, so its gradient w.r.t. logits at condition slots is exactly zero.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import PianoCoverError
from .dataset import InterleavedSequence, TrainingSegment, segment as make_segments
from .encoder import ConditionAdapter, ConditionBlock, EncoderConfig
from .remi_codec import TokenSequence, Vocabulary
from .transformer import TransformerBlock, init_transformer_weights


class ModelError(PianoCoverError):
    """Model configuration or invocation failure."""


class TrainingError(ModelError):
    """Invalid training setup (stage, corpus composition, or checkpoint)."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    n_layers: int = 8
    n_heads: int = 8
    ffn_dim: int = 0  # 0 -> 4 * d_model
    dropout: float = 0.1
    max_positions: int = 1024
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads) <= 0:
            raise ModelError("model dims must be positive")
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    alpha: float = 0.25  # weight of the piano-only loss during fine-tuning
    steps: int = 100
    seed: int = 0
    segment_length: int = 1024
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    allow_scratch_finetune: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ModelError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.batch_size <= 0 or self.steps < 0:
            raise ModelError("batch_size must be positive and steps non-negative")


def config_hash(model_config: ModelConfig, encoder_config: EncoderConfig) -> str:
    payload = json.dumps(
        {"model": asdict(model_config), "encoder": asdict(encoder_config)}, sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CoverModel(nn.Module):
    """Condition adapter + causal decoder over the interleaved stream."""

    def __init__(self, config: ModelConfig, encoder_config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder_config = encoder_config
        self.adapter = ConditionAdapter(encoder_config)
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_positions, config.d_model)
        self.cond_proj = nn.Linear(encoder_config.d_model, config.d_model)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_model, config.n_heads, config.ffn_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        init_transformer_weights(self, config.n_layers)
        self.to(config.torch_dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def _condition_embeddings(
        self,
        shape: tuple[int, int],
        cond_blocks: Sequence[Sequence[tuple[int, ConditionBlock]]],
    ) -> torch.Tensor:
        """Adapter + projection for every block, scattered to its slots.
        Blocks of equal width are batched; attention never crosses blocks."""
        b, length = shape
        out = torch.zeros(b, length, self.config.d_model, dtype=self.dtype)
        groups: dict[int, list[tuple[int, int, np.ndarray]]] = {}
        for item, blocks in enumerate(cond_blocks):
            for start, block in blocks:
                groups.setdefault(block.n_vectors, []).append((item, start, block.features))
        for n_vectors, entries in sorted(groups.items()):
            stacked = torch.as_tensor(
                np.stack([feats for _, _, feats in entries]), dtype=self.dtype
            )
            projected = self.cond_proj(self.adapter(stacked))
            for row, (item, start, _) in enumerate(entries):
                out[item, start : start + n_vectors] = projected[row]
        return out

    def hidden_states(
        self,
        tokens: torch.Tensor,
        cond_mask: torch.Tensor,
        cond_blocks: Sequence[Sequence[tuple[int, ConditionBlock]]],
        pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, length = tokens.shape
        if length > self.config.max_positions:
            raise ModelError(f"stream length {length} exceeds max_positions {self.config.max_positions}")
        cond = self._condition_embeddings((b, length), cond_blocks)
        x = torch.where(cond_mask.unsqueeze(-1), cond, self.tok_emb(tokens))
        x = x + self.pos_emb(torch.arange(length))
        for block in self.blocks:
            x = block(x, causal=True, key_padding_mask=pad_mask)
        return self.ln_f(x)

    def forward(
        self,
        tokens: torch.Tensor,
        cond_mask: torch.Tensor,
        cond_blocks: Sequence[Sequence[tuple[int, ConditionBlock]]],
        pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Per-position next-token logits, shifted so ``logits[:, p]`` scores
        the stream token at position ``p``; row 0 is zeros."""
        h = self.hidden_states(tokens, cond_mask, cond_blocks, pad_mask)
        full = self.head(h)
        zeros = torch.zeros_like(full[:, :1])
        return torch.cat([zeros, full[:, :-1]], dim=1)

    def next_logits(
        self,
        tokens: torch.Tensor,
        cond_mask: torch.Tensor,
        cond_blocks: Sequence[Sequence[tuple[int, ConditionBlock]]],
    ) -> torch.Tensor:
        """Distribution for the token following the stream (generation)."""
        h = self.hidden_states(tokens, cond_mask, cond_blocks)
        return self.head(h[:, -1])


@dataclass
class Batch:
    tokens: torch.Tensor
    cond_mask: torch.Tensor
    loss_mask: torch.Tensor
    pad_mask: torch.Tensor
    cond_blocks: list[list[tuple[int, ConditionBlock]]]


def collate(segments: Sequence[TrainingSegment], pad_id: int) -> Batch:
    max_len = max(len(s) for s in segments)
    b = len(segments)
    tokens = torch.full((b, max_len), pad_id, dtype=torch.long)
    cond_mask = torch.zeros(b, max_len, dtype=torch.bool)
    loss_mask = torch.zeros(b, max_len, dtype=torch.bool)
    pad_mask = torch.ones(b, max_len, dtype=torch.bool)
    blocks: list[list[tuple[int, ConditionBlock]]] = []
    for i, seg in enumerate(segments):
        n = len(seg)
        tokens[i, :n] = torch.as_tensor(seg.tokens)
        cond_mask[i, :n] = torch.as_tensor(seg.cond_mask)
        loss_mask[i, :n] = torch.as_tensor(seg.loss_mask)
        pad_mask[i, :n] = False
        blocks.append(list(seg.cond_blocks))
    return Batch(tokens, cond_mask, loss_mask, pad_mask, blocks)


def sequence_loss(
    logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy (natural log) over masked positions only."""
    if logits.dim() == 2:
        logits, targets, loss_mask = logits[None], targets[None], loss_mask[None]
    if not bool(loss_mask.any()):
        raise ModelError("loss mask selects no positions")
    return F.cross_entropy(logits[loss_mask], targets[loss_mask])


def finetune_loss(
    l1: torch.Tensor | float, l2: torch.Tensor | float, alpha: float
) -> torch.Tensor | float:
    """Weighted two-corpus loss: alpha * piano_only + (1 - alpha) * paired."""
    if not (0.0 <= alpha <= 1.0):
        raise ModelError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return l1
    if alpha == 0.0:
        return l2
    return alpha * l1 + (1.0 - alpha) * l2


@dataclass
class ModelCheckpoint:
    """Trainable state plus provenance; saved as npz weights + JSON manifest."""

    model_config: ModelConfig
    encoder_config: EncoderConfig
    stage: str  # "pretrained" | "finetuned"
    step: int
    seed: int
    state: dict[str, np.ndarray]
    loss_history: tuple[float, ...] = ()
    optimizer_state: dict[str, np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.stage not in ("pretrained", "finetuned"):
            raise ModelError(f"unknown stage {self.stage!r}")

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_config, self.encoder_config)

    @classmethod
    def from_model(
        cls,
        model: CoverModel,
        stage: str,
        step: int,
        seed: int,
        loss_history: Sequence[float] = (),
        optimizer: torch.optim.Optimizer | None = None,
    ) -> "ModelCheckpoint":
        state = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}
        opt_state = None
        if optimizer is not None:
            opt_state = {}
            for pi, (name, _) in enumerate(model.named_parameters()):
                slot = optimizer.state.get(optimizer.param_groups[0]["params"][pi], {})
                for key in ("exp_avg", "exp_avg_sq"):
                    if key in slot:
                        opt_state[f"{name}.{key}"] = slot[key].numpy().copy()
        return cls(
            model.config, model.encoder_config, stage, step, seed, state, tuple(loss_history), opt_state
        )

    def build_model(self) -> CoverModel:
        model = CoverModel(self.model_config, self.encoder_config)
        model.load_state_dict({k: torch.as_tensor(v) for k, v in self.state.items()})
        return model

    def save(self, stem: str | Path) -> None:
        """Write ``<stem>.npz`` + ``<stem>.json`` atomically."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        arrays = dict(self.state)
        if self.optimizer_state:
            arrays.update({f"opt::{k}": v for k, v in self.optimizer_state.items()})
        tmp_npz = stem.with_suffix(".npz.tmp")
        with open(tmp_npz, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp_npz, stem.with_suffix(".npz"))
        manifest = {
            "model_config": asdict(self.model_config),
            "encoder_config": asdict(self.encoder_config),
            "stage": self.stage,
            "step": self.step,
            "seed": self.seed,
            "loss_history": list(self.loss_history),
            "config_hash": self.config_hash,
            "has_optimizer_state": bool(self.optimizer_state),
        }
        tmp_json = stem.with_suffix(".json.tmp")
        with open(tmp_json, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh)
        os.replace(tmp_json, stem.with_suffix(".json"))

    @classmethod
    def load(cls, stem: str | Path) -> "ModelCheckpoint":
        stem = Path(stem)
        with open(stem.with_suffix(".json"), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        model_config = ModelConfig(**manifest["model_config"])
        encoder_config = EncoderConfig(**manifest["encoder_config"])
        with np.load(stem.with_suffix(".npz")) as data:
            arrays = {k: data[k] for k in data.files}
        state = {k: v for k, v in arrays.items() if not k.startswith("opt::")}
        opt = {k[5:]: v for k, v in arrays.items() if k.startswith("opt::")} or None
        ckpt = cls(
            model_config,
            encoder_config,
            manifest["stage"],
            manifest["step"],
            manifest["seed"],
            state,
            tuple(manifest.get("loss_history", ())),
            opt,
        )
        if manifest.get("config_hash") and manifest["config_hash"] != ckpt.config_hash:
            raise ModelError(f"{stem}: config hash mismatch; checkpoint does not match its manifest")
        return ckpt


def _segment_pools(
    corpus: Sequence[InterleavedSequence], vocab: Vocabulary, segment_length: int
) -> dict[str, list[TrainingSegment]]:
    pools: dict[str, list[TrainingSegment]] = {"piano_only": [], "paired": []}
    for seq in corpus:
        pools[seq.kind].extend(make_segments(seq, vocab, segment_length))
    return pools


def _sample(pool: list[TrainingSegment], rng: np.random.Generator, k: int) -> list[TrainingSegment]:
    idx = rng.choice(len(pool), size=k, replace=len(pool) < k)
    return [pool[i] for i in idx]


def train(
    stage: str,
    corpus: Sequence[InterleavedSequence],
    train_config: TrainConfig,
    model_config: ModelConfig,
    encoder_config: EncoderConfig,
    vocab: Vocabulary,
    init: ModelCheckpoint | None = None,
    checkpoint_dir: str | Path | None = None,
    log_every: int = 0,
) -> ModelCheckpoint:
    """Run one training stage; deterministic given the seed.

    Pretraining consumes piano-only sequences with the plain masked
    cross-entropy. Fine-tuning needs a pretrained checkpoint (unless
    explicitly allowed to start from scratch for the no-pretrain ablation)
    and a corpus holding both kinds: every step draws half its batch from
    each pool and weights the two losses by alpha.
    """
    if stage not in ("pretrain", "finetune"):
        raise TrainingError(f"unknown stage {stage!r}")
    pools = _segment_pools(corpus, vocab, train_config.segment_length)
    if stage == "pretrain":
        if init is not None and init.stage != "pretrained":
            raise TrainingError("cannot continue pretraining from a fine-tuned checkpoint")
        if pools["paired"]:
            raise TrainingError("pretraining corpus must be piano-only")
        if not pools["piano_only"]:
            raise TrainingError("pretraining corpus is empty")
    else:
        if init is None and not train_config.allow_scratch_finetune:
            raise TrainingError(
                "fine-tuning requires a pretrained checkpoint "
                "(set allow_scratch_finetune to reproduce the no-pretrain ablation)"
            )
        if not pools["paired"] or not pools["piano_only"]:
            raise TrainingError("fine-tuning corpus needs both piano-only and paired sequences")

    torch.manual_seed(train_config.seed)
    model = CoverModel(model_config, encoder_config)
    if init is not None:
        if init.config_hash != config_hash(model_config, encoder_config):
            raise TrainingError("checkpoint config hash does not match the requested configs")
        model.load_state_dict({k: torch.as_tensor(v) for k, v in init.state.items()})
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    rng = np.random.default_rng(train_config.seed)
    pad_id = vocab.pad_id

    def batch_loss(segments: list[TrainingSegment]) -> torch.Tensor:
        batch = collate(segments, pad_id)
        logits = model(batch.tokens, batch.cond_mask, batch.cond_blocks, batch.pad_mask)
        return sequence_loss(logits, batch.tokens, batch.loss_mask)

    base_step = init.step if init is not None else 0
    losses: list[float] = []
    final_stage = "pretrained" if stage == "pretrain" else "finetuned"
    for step in range(1, train_config.steps + 1):
        optimizer.zero_grad()
        if stage == "pretrain":
            loss = batch_loss(_sample(pools["piano_only"], rng, train_config.batch_size))
        else:
            n_piano = max(1, train_config.batch_size // 2)
            n_paired = max(1, train_config.batch_size - n_piano)
            l1 = batch_loss(_sample(pools["piano_only"], rng, n_piano))
            l2 = batch_loss(_sample(pools["paired"], rng, n_paired))
            loss = finetune_loss(l1, l2, train_config.alpha)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
        if log_every and step % log_every == 0:
            print(f"step {step}/{train_config.steps} loss {losses[-1]:.4f}")
        if (
            checkpoint_dir is not None
            and train_config.checkpoint_every
            and step % train_config.checkpoint_every == 0
        ):
            ModelCheckpoint.from_model(
                model, final_stage, base_step + step, train_config.seed, losses
            ).save(Path(checkpoint_dir) / f"step_{base_step + step:06d}")

    return ModelCheckpoint.from_model(
        model, final_stage, base_step + train_config.steps, train_config.seed, losses, optimizer
    )


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0  # 0 -> greedy
    top_p: float = 1.0
    max_tokens_per_bar: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ModelError(f"temperature must be >= 0, got {self.temperature}")
        if not (0.0 < self.top_p <= 1.0):
            raise ModelError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_tokens_per_bar < 2:
            raise ModelError("max_tokens_per_bar must allow Bar_start and Bar_end")


def _pick_token(
    logits: torch.Tensor, sampling: SamplingConfig, generator: torch.Generator
) -> int:
    if sampling.temperature == 0.0:
        return int(logits.argmax())
    probs = torch.softmax(logits / sampling.temperature, dim=-1)
    if sampling.top_p < 1.0:
        ranked = torch.argsort(probs, descending=True)
        cumulative = torch.cumsum(probs[ranked], dim=0)
        keep = cumulative - probs[ranked] < sampling.top_p  # always keep the top token
        filtered = torch.zeros_like(probs)
        filtered[ranked[keep]] = probs[ranked[keep]]
        probs = filtered / filtered.sum()
    return int(torch.multinomial(probs, 1, generator=generator))


def generate(
    checkpoint: ModelCheckpoint | CoverModel,
    condition_blocks: Sequence[ConditionBlock],
    vocab: Vocabulary,
    sampling: SamplingConfig = SamplingConfig(),
) -> TokenSequence:
    """Generate bar by bar: splice each condition block, emit Bar_start, then
    sample until Bar_end (forced at the per-bar budget). The result always
    satisfies the bar-span structure no matter the sampling settings."""
    model = checkpoint.build_model() if isinstance(checkpoint, ModelCheckpoint) else checkpoint
    if model.config.vocab_size != vocab.size:
        raise ModelError(f"model vocab {model.config.vocab_size} != vocabulary {vocab.size}")
    model.eval()
    generator = torch.Generator().manual_seed(sampling.seed)
    banned = [vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.ss_id, vocab.id_of("Spec", "unk")]

    stream: list[int] = [vocab.bos_id]
    cond_mask: list[bool] = [False]
    placed: list[tuple[int, ConditionBlock]] = []
    out_ids: list[int] = []
    spans: list[tuple[int, int]] = []

    def logits_for_next() -> torch.Tensor:
        tokens = torch.as_tensor(stream, dtype=torch.long)[None]
        mask = torch.as_tensor(cond_mask, dtype=torch.bool)[None]
        with torch.no_grad():
            return model.next_logits(tokens, mask, [placed])[0]

    for block in condition_blocks:
        placed.append((len(stream), block))
        stream.extend([vocab.pad_id] * block.n_vectors)
        cond_mask.extend([True] * block.n_vectors)
        span_start = len(out_ids)
        stream.append(vocab.bar_start_id)
        cond_mask.append(False)
        out_ids.append(vocab.bar_start_id)
        emitted = 1
        while True:
            if emitted + 1 >= sampling.max_tokens_per_bar:
                token = vocab.bar_end_id  # budget exhausted: close the bar
            else:
                logits = logits_for_next()
                logits[banned] = float("-inf")
                logits[vocab.bar_start_id] = float("-inf")
                token = _pick_token(logits, sampling, generator)
            stream.append(token)
            cond_mask.append(False)
            out_ids.append(token)
            emitted += 1
            if token == vocab.bar_end_id:
                break
        spans.append((span_start, len(out_ids)))
    return TokenSequence(tuple(out_ids), tuple(spans))
