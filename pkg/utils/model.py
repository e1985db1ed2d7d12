"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Any, NamedTuple, Sequence, TypeAlias

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateProjectionError, ShapeMismatchError
from .seeding import seeded
from .tokenizer import TextBatch, Tokenizer


__all__ = (
    'EmbeddingBatch',
    'ImageBatch',
    'ModelConfig',
    'DualEncoder',
    'PROMPT_TEMPLATE',
    'class_prompts',
    'classify_embeddings',
    'zero_shot_classify',
    'normalize_rows',
)

log = logging.getLogger(__name__)

# Row-normalised [B, D] tensor. Every row has unit norm within 1e-5.
EmbeddingBatch: TypeAlias = torch.Tensor

PROMPT_TEMPLATE = 'a picture of a {}'
_DEGENERATE_NORM = 1e-12


def class_prompts(class_names: Sequence[str]) -> list[str]:
    return [PROMPT_TEMPLATE.format(name) for name in class_names]


def normalize_rows(x: torch.Tensor) -> EmbeddingBatch:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms <= _DEGENERATE_NORM).any()):
        raise DegenerateProjectionError('Projection produced a zero vector; cannot normalise it.')
    return x / norms


class ImageBatch(NamedTuple):
    pixels: torch.Tensor
    ids: list[str]

    def validate(self, channels: int, image_size: int) -> None:
        pixels = self.pixels
        if pixels.ndim != 4 or pixels.shape[0] < 1:
            raise ShapeMismatchError(f'pixels must be [B, C, H, W] with B >= 1, got {tuple(pixels.shape)}')
        expected = (channels, image_size, image_size)
        if tuple(pixels.shape[1:]) != expected:
            raise ShapeMismatchError(f'Expected images of shape {expected}, got {tuple(pixels.shape[1:])}')
        if len(self.ids) != pixels.shape[0]:
            raise ShapeMismatchError('One id is required per image.')
        if bool((pixels < 0).any()) or bool((pixels > 1).any()):
            raise ShapeMismatchError('Pixel values must lie within [0, 1].')


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    trunk_width: int = 128
    trunk_depth: int = 4
    heads: int = 4
    text_width: int = 128
    text_depth: int = 2
    embed_dim: int = 64
    hidden_width: int = 32
    max_length: int = 16
    tau_init: float = 0.07
    tau_min: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class Block(nn.Module):
    """Pre-norm self-attention block. No dropout, so evaluation is deterministic."""

    def __init__(self, width: int, heads: int) -> None:
        super().__init__()
        if width % heads:
            raise ValueError(f'width {width} is not divisible by {heads} heads')
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(self.norm1(x)).reshape(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        mask = None
        if key_mask is not None:
            # [B, 1, 1, N] broadcast over heads and queries
            mask = key_mask[:, None, None, :]
        attended = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        x = x + self.proj(attended.transpose(1, 2).reshape(b, n, w))
        return x + self.mlp(self.norm2(x))


class ImageTrunk(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        if config.image_size % config.patch_size:
            raise ValueError('image_size must be a multiple of patch_size')
        patches = (config.image_size // config.patch_size) ** 2
        self.patch = nn.Conv2d(config.channels, config.trunk_width, config.patch_size, stride=config.patch_size)
        self.position = nn.Parameter(torch.randn(1, patches, config.trunk_width) * 0.02)
        self.blocks = nn.ModuleList(Block(config.trunk_width, config.heads) for _ in range(config.trunk_depth))
        self.norm = nn.LayerNorm(config.trunk_width)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.patch(pixels).flatten(2).transpose(1, 2) + self.position
        for block in self.blocks:
            x = block(x)
        return self.norm(x.mean(dim=1))


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int) -> None:
        super().__init__()
        self.token = nn.Embedding(vocab_size, config.text_width)
        self.position = nn.Parameter(torch.randn(1, config.max_length, config.text_width) * 0.02)
        self.blocks = nn.ModuleList(Block(config.text_width, config.heads) for _ in range(config.text_depth))
        self.norm = nn.LayerNorm(config.text_width)

    def forward(self, batch: TextBatch) -> torch.Tensor:
        tokens, lengths = batch
        width = tokens.shape[1]
        valid = torch.arange(width, device=tokens.device)[None, :] < lengths[:, None]
        x = self.token(tokens) + self.position[:, :width]
        for block in self.blocks:
            x = block(x, valid)
        x = self.norm(x)
        # mean over real tokens only
        weights = valid.to(x.dtype).unsqueeze(-1)
        return (x * weights).sum(dim=1) / weights.sum(dim=1)


class DualEncoder(nn.Module):
    """The model state: shared image trunk, class and domain heads, text encoder
    with its projector, the hidden-state projector and the temperature.

    Only :meth:`project_class` and :meth:`encode_text` take part in zero-shot
    classification. The domain head and the hidden-state projector exist for
    training signals only.
    """

    def __init__(self, config: ModelConfig, tokenizer: Tokenizer) -> None:
        super().__init__()
        if tokenizer.max_length > config.max_length:
            raise ValueError('Tokenizer emits longer sequences than the text encoder accepts.')
        self.config = config
        self.tokenizer = tokenizer
        with seeded(config.seed):
            self.trunk = ImageTrunk(config)
            self.class_head = nn.Linear(config.trunk_width, config.embed_dim, bias=False)
            self.domain_head = nn.Linear(config.trunk_width, config.embed_dim, bias=False)
            self.text = TextEncoder(config, len(tokenizer))
            self.text_projector = nn.Linear(config.text_width, config.embed_dim, bias=False)
            self.hidden_projector = nn.Linear(config.hidden_width, config.embed_dim, bias=False)
            nn.init.orthogonal_(self.hidden_projector.weight)
        self.tau = nn.Parameter(torch.tensor(config.tau_init, dtype=torch.float32))

    def __repr__(self) -> str:
        params = sum(p.numel() for p in self.parameters())
        return f'<DualEncoder params={params} embed_dim={self.config.embed_dim} vocab={len(self.tokenizer)}>'

    @property
    def temperature(self) -> torch.Tensor:
        return self.tau.clamp(min=self.config.tau_min)

    @property
    def device(self) -> torch.device:
        return self.tau.device

    def encode_image(self, batch: ImageBatch | torch.Tensor) -> torch.Tensor:
        pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
        if isinstance(batch, ImageBatch):
            batch.validate(self.config.channels, self.config.image_size)
        elif pixels.ndim != 4 or tuple(pixels.shape[1:]) != (
            self.config.channels,
            self.config.image_size,
            self.config.image_size,
        ):
            raise ShapeMismatchError(f'Unexpected image tensor shape {tuple(pixels.shape)}')
        return self.trunk(pixels.to(self.device))

    def project_class(self, features: torch.Tensor) -> EmbeddingBatch:
        return normalize_rows(self.class_head(features))

    def project_domain(self, features: torch.Tensor) -> EmbeddingBatch:
        return normalize_rows(self.domain_head(features))

    def encode_text(self, batch: TextBatch) -> EmbeddingBatch:
        batch.validate(len(self.tokenizer))
        batch = TextBatch(batch.token_ids.to(self.device), batch.lengths.to(self.device))
        return normalize_rows(self.text_projector(self.text(batch)))

    def encode_prompts(self, texts: Sequence[str]) -> EmbeddingBatch:
        return self.encode_text(self.tokenizer.encode(texts))

    def project_hidden(self, hidden: torch.Tensor) -> EmbeddingBatch:
        if hidden.ndim != 2 or hidden.shape[1] != self.config.hidden_width:
            raise ShapeMismatchError(
                f'Hidden states must be [B, {self.config.hidden_width}], got {tuple(hidden.shape)}'
            )
        return normalize_rows(self.hidden_projector(hidden.to(self.device)))


def classify_embeddings(images: EmbeddingBatch, texts: EmbeddingBatch) -> torch.Tensor:
    """Argmax of image-text similarity; ties go to the lowest class index."""
    if texts.shape[0] < 1:
        raise ShapeMismatchError('At least one class prompt is required.')
    sims = images @ texts.T
    best = sims.max(dim=1, keepdim=True).values
    index = torch.arange(sims.shape[1], device=sims.device).expand_as(sims)
    sentinel = torch.full_like(index, sims.shape[1])
    return torch.where(sims == best, index, sentinel).min(dim=1).values


@torch.no_grad()
def zero_shot_classify(images: ImageBatch | torch.Tensor, class_prompts: TextBatch, model: DualEncoder) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        image_emb = model.project_class(model.encode_image(images))
        text_emb = model.encode_text(class_prompts)
        return classify_embeddings(image_emb, text_emb)
    finally:
        model.train(was_training)
