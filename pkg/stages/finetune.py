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

import torch

from harness import Stage
from stages.evaluate import EvalTable
from utils.checkpoint import Checkpoint, interpolate_weights
from utils.corpus import DatasetManifest, ImageStore, StyleRecord, two_stream_batches
from utils.errors import ConfigError, MissingHiddenStatesError
from utils.flags import AblationFlags
from utils.losses import (
    LossValue,
    LossWeights,
    adversarial_classification_loss,
    agreement_loss,
    diffusion_loss,
    grl_lambda,
    source_loss,
)
from utils.model import DualEncoder
from utils.queue import Prefetcher
from utils.seeding import seeded
from utils.training import BatchPreparer, PreparedBatch, StepHook, TrainLoop, make_classifier


if TYPE_CHECKING:
    from harness import Harness

log = logging.getLogger(__name__)

METHODS = ('flyp', 'dann', 'dca')

# offsets the caption stream's shuffling away from the source stream's
_CAPTION_STREAM = 2


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything one finetuning run depends on.

    ``ratio`` is the number of source batches per diffusion batch and may be
    ``inf``. The ablation flags zero the loss weights of the parts they
    disable; see :meth:`LossWeights.effective`.
    """

    method: str = 'dca'
    steps: int = 2000
    batch_size: int = 32
    style_batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.1
    ratio: float = 4.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0
    c5: float = 1.0
    c6: float = 1.0
    ablation: AblationFlags = dataclasses.field(default_factory=AblationFlags.all)
    reduction: str = 'sum'
    grl_lambda: float = 1.0
    grl_schedule: str = 'constant'
    with_captions: bool = False
    classifier_width: int = 128
    log_every: int = 50
    snapshot_every: int = 100
    prefetch: int = 2

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f'Unknown method {self.method!r}, expected one of {", ".join(METHODS)}.')
        if self.reduction not in ('sum', 'mean'):
            raise ConfigError(f'Unknown reduction {self.reduction!r}.')
        if self.grl_schedule not in ('constant', 'ramp'):
            raise ConfigError(f'Unknown GRL schedule {self.grl_schedule!r}.')
        if not math.isinf(self.ratio) and (self.ratio < 1 or self.ratio != int(self.ratio)):
            raise ConfigError(f'ratio must be a positive integer or inf, got {self.ratio}.')
        if self.grl_lambda < 0:
            raise ConfigError('grl_lambda must be non-negative.')

    @property
    def loss_weights(self) -> LossWeights:
        weights = LossWeights(self.c1, self.c2, self.c3, self.c4, self.c5, self.c6)
        if self.method == 'flyp':
            return LossWeights(c1=self.c1, c2=0.0, c3=0.0, c4=0.0, c5=0.0, c6=0.0)
        return weights.effective(self.ablation)

    def to_dict(self) -> dict[str, Any]:
        result = dataclasses.asdict(self)
        result['ablation'] = self.ablation.to_names()
        result['effective_weights'] = self.loss_weights.to_dict()
        return result


class Finetune(Stage):
    """FLYP, DANN and DCA finetuning plus weight-space interpolation."""

    configs = (RunConfig,)

    def _caption_batches(
        self, config: RunConfig, model: DualEncoder, store: ImageStore, captions: DatasetManifest | None
    ) -> Iterator[PreparedBatch] | None:
        if not config.with_captions:
            return None
        if captions is None:
            raise ConfigError('with_captions is set but no caption manifest was given.')
        prepare = BatchPreparer(store, model.tokenizer, captions, captions=True)
        stream = two_stream_batches(captions, [], config.batch_size, math.inf, self.harness.seed + _CAPTION_STREAM)
        return (prepare(batch) for batch in stream)

    def _caption_term(self, model: DualEncoder, batches: Iterator[PreparedBatch] | None) -> LossValue | None:
        if batches is None:
            return None
        batch = next(batches)
        class_emb = model.project_class(model.encode_image(batch.images))
        return agreement_loss(class_emb, model.encode_text(batch.texts), model.temperature)

    def _contrastive_losses(
        self,
        model: DualEncoder,
        config: RunConfig,
        weights: LossWeights,
        batches: Prefetcher[Any, PreparedBatch],
        captions: Iterator[PreparedBatch] | None,
    ) -> Iterator[LossValue]:
        for batch in batches:
            tau = model.temperature
            features = model.encode_image(batch.images)
            class_emb = model.project_class(features)
            if batch.kind == 'source':
                domain_emb = model.project_domain(features) if weights.c2 != 0.0 else None
                loss = source_loss(
                    class_emb,
                    model.encode_text(batch.texts),
                    domain_emb,
                    tau,
                    weights=weights,
                    reduction=config.reduction,  # type: ignore
                )
                extra = self._caption_term(model, captions)
                if extra is not None:
                    components = dict(loss.components, captions=extra.components['agreement'])
                    loss = LossValue(loss.scalar + extra.scalar, components)
            else:
                hidden_emb = None
                if weights.c6 != 0.0:
                    if batch.hidden is None:
                        raise MissingHiddenStatesError('Style batch has no hidden states but C6 is active.')
                    hidden_emb = model.project_hidden(batch.hidden)
                loss = diffusion_loss(
                    class_emb,
                    model.project_domain(features),
                    model.encode_text(batch.texts),
                    hidden_emb,
                    tau,
                    weights=weights,
                    reduction=config.reduction,  # type: ignore
                )
            yield loss

    def _dann_losses(
        self,
        model: DualEncoder,
        config: RunConfig,
        loop: TrainLoop,
        classifier: torch.nn.Module,
        style_index: dict[str, int],
        batches: Prefetcher[Any, PreparedBatch],
    ) -> Iterator[LossValue]:
        pending: PreparedBatch | None = None
        for batch in batches:
            if batch.kind == 'source':
                pending = batch
                continue
            if pending is None:
                continue
            source_features = model.encode_image(pending.images)
            style_features = model.encode_image(batch.images)
            task = agreement_loss(
                model.project_class(source_features), model.encode_text(pending.texts), model.temperature
            )
            labels = torch.tensor(
                [0] * source_features.shape[0] + [1 + style_index[s] for s in batch.style_ids],
                dtype=torch.long,
                device=source_features.device,
            )
            lam = grl_lambda(config.grl_schedule, loop.progress, config.grl_lambda)
            adversarial = adversarial_classification_loss(
                torch.cat([source_features, style_features]), labels, classifier, lam
            )
            components = {'C1': task.components['agreement'], **adversarial.components}
            yield LossValue(task.scalar + adversarial.scalar, components)
            pending = None

    def finetune(
        self,
        start: Checkpoint,
        config: RunConfig,
        source: DatasetManifest,
        *,
        styles: Sequence[StyleRecord] | None = None,
        captions: DatasetManifest | None = None,
        config_digest: str = '',
        on_step: StepHook | None = None,
    ) -> Checkpoint:
        """Finetunes ``start`` with one of the supported methods and returns the final checkpoint."""
        config.validate()
        seed = self.harness.seed
        model = start.to_model()
        store = ImageStore(model.config.image_size)
        weights = config.loss_weights
        extra: list[torch.nn.Module] = []

        if config.method == 'dann':
            if not styles:
                raise ConfigError('The dann method needs a style bank to draw domain examples from.')
            with seeded(seed):
                classifier = make_classifier(model.config.trunk_width, 1 + len(styles), config.classifier_width)
            extra.append(classifier)
            ratio = 1.0
        else:
            diffusion = config.method == 'dca' and weights.diffusion_active and not math.isinf(config.ratio)
            if diffusion and not styles:
                raise ConfigError('Diffusion losses are active but no style bank was given.')
            ratio = config.ratio if diffusion else math.inf

        stream = two_stream_batches(
            source,
            list(styles or []) if not math.isinf(ratio) else [],
            config.batch_size,
            ratio,
            seed,
            style_batch_size=config.style_batch_size,
        )
        prepare = BatchPreparer(store, model.tokenizer, source)
        batches = Prefetcher(stream, prepare, depth=config.prefetch)
        loop = TrainLoop(
            model,
            steps=config.steps,
            lr=config.lr,
            weight_decay=config.weight_decay,
            seed=seed,
            config_digest=config_digest,
            method=config.method,
            extra_modules=extra,
            log_every=config.log_every,
            snapshot_every=config.snapshot_every,
            on_step=on_step,
        )
        log.info('Finetuning with %s, weights %s, ratio %s', config.method, weights.to_dict(), ratio)

        if config.method == 'dann':
            index = {record.style_id: i for i, record in enumerate(styles or [])}
            losses = self._dann_losses(model, config, loop, extra[0], index, batches)
        else:
            caption_batches = self._caption_batches(config, model, store, captions)
            losses = self._contrastive_losses(model, config, weights, batches, caption_batches)
        try:
            return loop.run(losses)
        finally:
            losses.close()
            batches.close()

    def wise_ft(
        self,
        zeroshot: Checkpoint,
        finetuned: Checkpoint,
        manifests: Sequence[DatasetManifest],
        alphas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    ) -> tuple[EvalTable, list[Checkpoint]]:
        """Evaluates ``alpha * finetuned + (1 - alpha) * zeroshot`` for every alpha."""
        tables = []
        checkpoints = []
        for alpha in alphas:
            merged = interpolate_weights(finetuned, zeroshot, alpha)
            checkpoints.append(merged)
            tables.append(self.harness.evaluate.evaluate(merged, manifests, method=f'wise-ft-{alpha:g}'))
        return EvalTable.merge(*tables), checkpoints


def setup(harness: Harness) -> None:
    harness.add_stage(Finetune(harness))
