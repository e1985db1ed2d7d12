"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import pathlib
from typing import TYPE_CHECKING, Any, Iterator, Sequence

import torch

from harness import Stage
from utils._types.artifacts import UnlearnAuditPayload
from utils.checkpoint import Checkpoint
from utils.corpus import DatasetManifest, two_stream_batches
from utils.errors import ConfigError, ShapeMismatchError
from utils.formats import write_json
from utils.losses import LossValue, adversarial_domain_loss, agreement_loss, grl_lambda
from utils.model import DualEncoder, ImageBatch
from utils.queue import Prefetcher
from utils.seeding import seeded, torch_generator
from utils.training import BatchPreparer, PreparedBatch, TrainLoop, make_classifier


if TYPE_CHECKING:
    from harness import Harness

log = logging.getLogger(__name__)

# offsets the forget stream and the noise generator away from the retain stream
_FORGET_STREAM = 1
_NOISE_STREAM = 2


@dataclasses.dataclass(frozen=True)
class UnlearnConfig:
    lam: float = 1.0
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.1
    schedule: str = 'constant'
    audit_every: int = 100
    classifier_width: int = 128
    log_every: int = 25
    snapshot_every: int = 100
    prefetch: int = 2

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError('lam must be non-negative.')
        if self.schedule not in ('constant', 'ramp'):
            raise ConfigError(f'Unknown schedule {self.schedule!r}.')
        if self.audit_every < 1:
            raise ConfigError('audit_every must be at least 1.')

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def sample_noise_batch(shape: Sequence[int], seed: int | torch.Generator) -> ImageBatch:
    """Uniform [0, 1) noise images of ``shape`` (``[B, C, H, W]``).

    An int seed draws from a fresh generator, so equal seeds give equal
    batches; passing a generator continues its stream instead.
    """
    if len(shape) != 4:
        raise ShapeMismatchError(f'Expected a [B, C, H, W] shape, got {tuple(shape)}')
    generator = torch_generator(seed) if isinstance(seed, int) else seed
    pixels = torch.rand(tuple(shape), generator=generator)
    return ImageBatch(pixels, [f'noise-{i}' for i in range(pixels.shape[0])])


def domains_of(manifest: DatasetManifest) -> list[str]:
    return sorted({manifest.domain_names[s.domain_index] for s in manifest.samples})


@dataclasses.dataclass
class UnlearnAudit:
    forget_domain: str
    before: dict[str, float]
    after: dict[str, float] = dataclasses.field(default_factory=dict)
    forget_before: float = 0.0
    forget_after: float = 0.0
    retain_before: float = 0.0
    retain_after: float = 0.0
    intervals: list[dict[str, Any]] = dataclasses.field(default_factory=list)

    @staticmethod
    def relative_drop(before: float, after: float) -> float:
        if before == 0.0:
            return 0.0
        return (before - after) / before

    @property
    def forget_relative_drop(self) -> float:
        return self.relative_drop(self.forget_before, self.forget_after)

    @property
    def retain_relative_drop(self) -> float:
        return self.relative_drop(self.retain_before, self.retain_after)

    def to_payload(self) -> UnlearnAuditPayload:
        return {
            'forget_domain': self.forget_domain,
            'forget_before': self.forget_before,
            'forget_after': self.forget_after,
            'forget_relative_drop': self.forget_relative_drop,
            'retain_before': self.retain_before,
            'retain_after': self.retain_after,
            'retain_relative_drop': self.retain_relative_drop,
            'domains': [
                {'domain': name, 'before': self.before[name], 'after': self.after.get(name, math.nan)}
                for name in sorted(self.before)
            ],
            'intervals': self.intervals,
        }

    def save(self, path: pathlib.Path) -> pathlib.Path:
        return write_json(path, self.to_payload())


class Unlearn(Stage):
    """Adversarial unlearning of one pretraining domain while retaining the rest."""

    configs = (UnlearnConfig,)

    def domain_accuracy(self, model: DualEncoder, manifests: list[DatasetManifest]) -> dict[str, float]:
        evaluate = self.harness.evaluate
        result = {}
        for manifest in manifests:
            for domain in domains_of(manifest):
                result[domain] = evaluate.accuracy(model, manifest.subset(domains=[domain]))
        return result

    def _losses(
        self,
        model: DualEncoder,
        config: UnlearnConfig,
        loop: TrainLoop,
        classifier: torch.nn.Module | None,
        retain: Prefetcher[Any, PreparedBatch],
        forget: Iterator[PreparedBatch],
    ) -> Iterator[LossValue]:
        noise = torch_generator(self.harness.seed + _NOISE_STREAM)
        for batch in retain:
            class_emb = model.project_class(model.encode_image(batch.images))
            kept = agreement_loss(class_emb, model.encode_text(batch.texts), model.temperature)
            if classifier is None:
                yield LossValue(kept.scalar, {'retain': kept.components['agreement']})
                continue

            forget_batch = next(forget)
            lam = grl_lambda(config.schedule, loop.progress, config.lam)
            adversarial = adversarial_domain_loss(
                model.encode_image(forget_batch.images),
                model.encode_image(sample_noise_batch(forget_batch.images.pixels.shape, noise)),
                classifier,
                lam,
            )
            components = {'retain': kept.components['agreement'], **adversarial.components}
            yield LossValue(kept.scalar + adversarial.scalar, components)

    def unlearn(
        self,
        start: Checkpoint,
        config: UnlearnConfig,
        retain: DatasetManifest,
        forget: DatasetManifest,
        *,
        config_digest: str = '',
        retain_only: bool = False,
    ) -> tuple[Checkpoint, UnlearnAudit]:
        """Trains on the retain set while a gradient-reversed classifier separates forget images from noise.

        ``retain_only`` drops the adversarial term altogether. The auxiliary
        classifier is discarded once training ends.
        """
        config.validate()
        forget_domains = domains_of(forget)
        if len(forget_domains) != 1:
            raise ConfigError(f'The forget set must hold exactly one domain, found {forget_domains}.')
        overlap = set(forget_domains) & set(domains_of(retain))
        if overlap:
            raise ConfigError(f'Retain and forget sets share domains: {sorted(overlap)}')

        seed = self.harness.seed
        model = start.to_model()
        evaluate = self.harness.evaluate
        audit = UnlearnAudit(forget_domains[0], self.domain_accuracy(model, [retain, forget]))
        audit.forget_before = evaluate.accuracy(model, forget)
        audit.retain_before = evaluate.accuracy(model, retain)
        log.info('Before unlearning: forget %.4f retain %.4f', audit.forget_before, audit.retain_before)

        classifier = None
        extra = []
        if not retain_only:
            with seeded(seed):
                classifier = make_classifier(model.config.trunk_width, 1, config.classifier_width)
            extra.append(classifier)

        def on_step(step: int, model: DualEncoder, loss: LossValue) -> None:
            if step % config.audit_every == 0 and step != config.steps:
                entry = {'step': step, 'forget': evaluate.accuracy(model, forget)}
                entry['retain'] = evaluate.accuracy(model, retain)
                audit.intervals.append(entry)

        store = evaluate.store(model.config.image_size)
        retain_stream = two_stream_batches(retain, [], config.batch_size, math.inf, seed)
        retain_batches = Prefetcher(
            retain_stream, BatchPreparer(store, model.tokenizer, retain, captions=True), depth=config.prefetch
        )
        prepare_forget = BatchPreparer(store, model.tokenizer, forget, captions=True)
        forget_batches = (
            prepare_forget(b) for b in two_stream_batches(forget, [], config.batch_size, math.inf, seed + _FORGET_STREAM)
        )

        loop = TrainLoop(
            model,
            steps=config.steps,
            lr=config.lr,
            weight_decay=config.weight_decay,
            seed=seed,
            config_digest=config_digest,
            method='unlearn',
            extra_modules=extra,
            log_every=config.log_every,
            snapshot_every=config.snapshot_every,
            on_step=on_step,
        )
        losses = self._losses(model, config, loop, classifier, retain_batches, forget_batches)
        try:
            checkpoint = loop.run(losses)
        finally:
            losses.close()
            retain_batches.close()

        audit.after = self.domain_accuracy(model, [retain, forget])
        audit.forget_after = evaluate.accuracy(model, forget)
        audit.retain_after = evaluate.accuracy(model, retain)
        log.info(
            'After unlearning: forget %.4f (drop %.3f) retain %.4f (drop %.3f)',
            audit.forget_after,
            audit.forget_relative_drop,
            audit.retain_after,
            audit.retain_relative_drop,
        )
        return checkpoint, audit


def setup(harness: Harness) -> None:
    harness.add_stage(Unlearn(harness))
