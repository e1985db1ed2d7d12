"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import logging
import pathlib
from typing import TYPE_CHECKING, Any

from harness import Stage
from utils.corpus import (
    CorpusConfig,
    DatasetManifest,
    Sample,
    StyleBankConfig,
    StyleRecord,
    generate_corpus,
    generate_style_bank,
)
from utils.errors import ConfigError


if TYPE_CHECKING:
    from harness import Harness

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class SplitConfig:
    """How one generated benchmark is cut into the experiment's datasets.

    The source domain restricted to the first ``n_anchor_classes`` classes is
    the finetuning set; every ``val_every``-th image of it is held back as the
    anchor split. Each other domain becomes a target over a window of
    ``target_classes`` classes, the window sliding by ``target_stride`` per
    domain so targets introduce class names the anchor never had.
    """

    source_domain: str = 'clean'
    n_pretrain_domains: int = 8
    n_anchor_classes: int = 6
    target_classes: int = 6
    target_stride: int = 1
    val_every: int = 5
    forget_domain: str = 'noise'
    caption_every: int = 4

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _every(samples: tuple[Sample, ...], n: int, *, keep: bool) -> tuple[Sample, ...]:
    return tuple(s for i, s in enumerate(samples) if (i % n == 0) == keep)


class Corpus(Stage):
    """Benchmark generation, the style bank and dataset splits."""

    configs = (CorpusConfig, StyleBankConfig, SplitConfig)

    def generate_data(self, config: CorpusConfig, out: pathlib.Path) -> DatasetManifest:
        manifest = generate_corpus(config, out)
        log.info('Generated %d images over %d domains', len(manifest), len(manifest.domain_names))
        return manifest

    def generate_styles(self, config: StyleBankConfig, out: pathlib.Path) -> list[StyleRecord]:
        return generate_style_bank(config, out)

    def split_data(self, manifest: DatasetManifest, config: SplitConfig, out: pathlib.Path) -> dict[str, DatasetManifest]:
        domains = manifest.domain_names
        classes = manifest.class_names
        if config.source_domain not in domains:
            raise ConfigError(f'Source domain {config.source_domain!r} is not part of {manifest.name!r}.')
        if not 1 <= config.n_pretrain_domains <= len(domains):
            raise ConfigError(f'n_pretrain_domains must be within [1, {len(domains)}].')
        if not 1 <= config.n_anchor_classes <= len(classes) or not 1 <= config.target_classes <= len(classes):
            raise ConfigError(f'Class counts must be within [1, {len(classes)}].')
        if config.val_every < 2 or config.caption_every < 1:
            raise ConfigError('val_every must be at least 2 and caption_every at least 1.')

        pretrain_domains = list(domains[: config.n_pretrain_domains])
        if config.source_domain not in pretrain_domains:
            pretrain_domains.append(config.source_domain)
        if config.forget_domain not in pretrain_domains or config.forget_domain == config.source_domain:
            raise ConfigError('The forget domain must be a pretraining domain other than the source domain.')

        anchor_classes = list(classes[: config.n_anchor_classes])
        source_all = manifest.subset(domains=[config.source_domain], classes=anchor_classes)
        val = _every(source_all.samples, config.val_every, keep=True)
        train = _every(source_all.samples, config.val_every, keep=False)

        splits: dict[str, DatasetManifest] = {
            'pretrain': manifest.subset(domains=pretrain_domains, name='pretrain', split='pretrain'),
            'source': dataclasses.replace(source_all, name='source', split='train', samples=train),
            'anchor-val': dataclasses.replace(source_all, name='anchor-val', split='val', samples=val),
            'retain': manifest.subset(
                domains=[d for d in pretrain_domains if d != config.forget_domain], name='retain', split='retain'
            ),
            'forget': manifest.subset(domains=[config.forget_domain], name='forget', split='forget'),
        }
        captioned = manifest.subset(domains=[d for d in pretrain_domains if d != config.source_domain])
        splits['captions'] = dataclasses.replace(
            captioned,
            name='captions',
            split='captions',
            samples=_every(captioned.samples, config.caption_every, keep=True),
        )

        for path_name, split in splits.items():
            split.save(out / f'{path_name}.json')

        offset = 0
        for domain in domains:
            if domain == config.source_domain:
                continue
            window = [classes[(offset + k) % len(classes)] for k in range(config.target_classes)]
            name = f'{domain}-{offset}'
            target = manifest.subset(domains=[domain], classes=window, name=name, split='target')
            target.save(out / 'targets' / f'{name}.json')
            splits[f'targets/{name}'] = target
            offset += config.target_stride

        log.info('Wrote %d splits to %s', len(splits), out)
        return splits


def setup(harness: Harness) -> None:
    harness.add_stage(Corpus(harness))
