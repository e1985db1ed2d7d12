"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import TYPE_CHECKING, Any, Iterator, Sequence

from harness import Stage
from utils.checkpoint import Checkpoint
from utils.corpus import DatasetManifest, ImageStore, style_vocabulary, two_stream_batches
from utils.losses import LossValue, agreement_loss
from utils.model import DualEncoder, ModelConfig, class_prompts
from utils.queue import Prefetcher
from utils.tokenizer import Tokenizer
from utils.training import BatchPreparer, PreparedBatch, StepHook, TrainLoop


if TYPE_CHECKING:
    from harness import Harness

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    log_every: int = 50
    snapshot_every: int = 250
    prefetch: int = 2

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def build_tokenizer(manifest: DatasetManifest, *, max_length: int, extra_texts: Sequence[str] = ()) -> Tokenizer:
    """Vocabulary covering the pretraining captions, every class prompt and the style descriptions."""
    texts = manifest.captions() + class_prompts(manifest.class_names)
    texts.append(' '.join(style_vocabulary()))
    texts.extend(extra_texts)
    return Tokenizer.from_corpus(texts, max_length=max_length)


class Pretrain(Stage):
    """Contrastive pretraining of the toy dual encoder on captioned images."""

    configs = (ModelConfig, PretrainConfig)

    def _losses(self, model: DualEncoder, batches: Prefetcher[Any, PreparedBatch]) -> Iterator[LossValue]:
        for batch in batches:
            features = model.encode_image(batch.images)
            loss = agreement_loss(model.project_class(features), model.encode_text(batch.texts), model.temperature)
            yield LossValue(loss.scalar, {'C1': loss.components['agreement']})

    def pretrain_toy(
        self,
        manifest: DatasetManifest,
        model_config: ModelConfig,
        config: PretrainConfig,
        *,
        config_digest: str = '',
        extra_texts: Sequence[str] = (),
        on_step: StepHook | None = None,
    ) -> Checkpoint:
        seed = self.harness.seed
        tokenizer = build_tokenizer(manifest, max_length=model_config.max_length, extra_texts=extra_texts)
        model = DualEncoder(dataclasses.replace(model_config, seed=seed), tokenizer)
        log.info('Pretraining %r on %r', model, manifest)

        store = ImageStore(model_config.image_size)
        prepare = BatchPreparer(store, tokenizer, manifest, captions=True)
        stream = two_stream_batches(manifest, [], config.batch_size, math.inf, seed)
        batches = Prefetcher(stream, prepare, depth=config.prefetch)

        loop = TrainLoop(
            model,
            steps=config.steps,
            lr=config.lr,
            weight_decay=config.weight_decay,
            seed=seed,
            config_digest=config_digest,
            method='pretrain',
            log_every=config.log_every,
            snapshot_every=config.snapshot_every,
            on_step=on_step,
        )
        losses = self._losses(model, batches)
        try:
            return loop.run(losses)
        finally:
            losses.close()
            batches.close()


def setup(harness: Harness) -> None:
    harness.add_stage(Pretrain(harness))
