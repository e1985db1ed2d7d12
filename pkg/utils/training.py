"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .corpus import DatasetManifest, ImageStore, TaggedBatch
from .errors import DivergenceError
from .losses import LossValue
from .model import DualEncoder, ImageBatch, class_prompts
from .tokenizer import TextBatch, Tokenizer


__all__ = ('StepHook', 'TrainLoop', 'make_classifier', 'PreparedBatch', 'BatchPreparer')

log = logging.getLogger(__name__)

StepHook = Callable[[int, DualEncoder, LossValue], None]


def make_classifier(in_features: int, out_features: int, width: int = 128) -> nn.Sequential:
    """Two-layer perceptron used as the auxiliary adversary on trunk features."""
    return nn.Sequential(nn.Linear(in_features, width), nn.ReLU(), nn.Linear(width, out_features))


class TrainLoop:
    """AdamW with cosine decay over a fixed number of steps.

    Every step checks the loss is finite before stepping. A non-finite loss
    raises :class:`DivergenceError` carrying the newest snapshot, taken every
    ``snapshot_every`` steps (and at step 0).
    """

    def __init__(
        self,
        model: DualEncoder,
        *,
        steps: int,
        lr: float,
        weight_decay: float,
        seed: int,
        config_digest: str,
        method: str,
        extra_modules: Sequence[nn.Module] = (),
        log_every: int = 50,
        snapshot_every: int = 100,
        on_step: StepHook | None = None,
    ) -> None:
        if steps < 1:
            raise ValueError('steps must be at least 1')
        self.model = model
        self.steps = steps
        self.seed = seed
        self.config_digest = config_digest
        self.method = method
        self.log_every = log_every
        self.snapshot_every = snapshot_every
        self.on_step = on_step
        self.step = 0

        params: list[nn.Parameter] = list(model.parameters())
        for module in extra_modules:
            params.extend(module.parameters())
        self.optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
        self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, T_max=steps)
        self.last_good: Checkpoint = self.checkpoint()
        model.train()

    def __repr__(self) -> str:
        return f'<TrainLoop method={self.method!r} step={self.step}/{self.steps}>'

    @property
    def done(self) -> bool:
        return self.step >= self.steps

    @property
    def progress(self) -> float:
        return self.step / self.steps

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_model(
            self.model, step=self.step, seed=self.seed, config_digest=self.config_digest, method=self.method
        )

    def apply(self, loss: LossValue) -> None:
        value = float(loss.scalar)
        if not math.isfinite(value):
            log.error('Non-finite loss at step %d (%s), aborting', self.step, loss.components)
            raise DivergenceError(self.step, self.last_good)

        self.optimizer.zero_grad(set_to_none=True)
        if loss.scalar.requires_grad:
            loss.scalar.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.step += 1

        if self.step % self.log_every == 0 or self.step == self.steps:
            parts = ' '.join(f'{k}={v:.4f}' for k, v in loss.components.items())
            log.info('[%s] step %d/%d loss %.4f %s', self.method, self.step, self.steps, value, parts)
        if self.step % self.snapshot_every == 0:
            self.last_good = self.checkpoint()
        if self.on_step is not None:
            self.on_step(self.step, self.model, loss)

    def run(self, batches: Iterable[LossValue]) -> Checkpoint:
        for loss in batches:
            self.apply(loss)
            if self.done:
                break
        self.model.eval()
        return self.checkpoint()


class PreparedBatch(NamedTuple):
    kind: str
    images: ImageBatch
    texts: TextBatch
    labels: torch.Tensor | None
    hidden: torch.Tensor | None
    style_ids: tuple[str, ...]


class BatchPreparer:
    """Turns tagged batches into tensors: pixels, tokenized text and hidden states.

    Source batches are paired with their full captions when ``captions`` is
    set, otherwise with the class prompt of each label.
    """

    def __init__(self, store: ImageStore, tokenizer: Tokenizer, source: DatasetManifest, *, captions: bool = False) -> None:
        self.store = store
        self.tokenizer = tokenizer
        self.source = source
        self.captions = captions

    def __call__(self, batch: TaggedBatch) -> PreparedBatch:
        if batch.kind == 'source':
            images, labels = self.store.samples(batch.samples)
            if self.captions:
                texts = [self.source.caption(s) for s in batch.samples]
            else:
                texts = class_prompts([self.source.class_names[s.class_index] for s in batch.samples])
            return PreparedBatch('source', images, self.tokenizer.encode(texts), labels, None, ())

        records = [record for record, _ in batch.styles]
        images = self.store.stack([path for _, path in batch.styles])
        hidden = None
        if all(r.hidden_state is not None for r in records):
            hidden = torch.from_numpy(np.stack([r.hidden_state for r in records]))  # type: ignore
        texts = self.tokenizer.encode([r.description for r in records])
        return PreparedBatch('diffusion', images, texts, None, hidden, tuple(r.style_id for r in records))
