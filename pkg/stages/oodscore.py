"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import logging
import pathlib
from typing import TYPE_CHECKING, Any, Mapping, NamedTuple, Sequence

import numpy as np
import torch

from harness import Stage
from utils.corpus import DatasetManifest
from utils.errors import DegenerateStatisticError
from utils.formats import read_csv, write_csv, write_json
from utils.model import DualEncoder, class_prompts
from utils.ood import (
    OODReport,
    PCAResult,
    combine_scores,
    correlate,
    image_ood_score,
    pairwise_ood_matrix,
    pca_embed,
    score_bounds,
    text_ood_score,
)
from utils.sngp import SNGPConfig, fit_sngp


if TYPE_CHECKING:
    from harness import Harness

log = logging.getLogger(__name__)

SCORE_COLUMNS = (
    'dataset',
    'image_ood_raw',
    'text_ood_raw',
    'image_ood_norm',
    'text_ood_norm',
    'combined',
    'accuracy',
)


class Features(NamedTuple):
    trunk: torch.Tensor
    embeddings: torch.Tensor
    labels: torch.Tensor


class OODScore(Stage):
    """SNGP image scores, text scores and the pairwise domain matrix."""

    configs = (SNGPConfig,)

    chunk_size: int = 256

    @torch.no_grad()
    def features(self, model: DualEncoder, manifest: DatasetManifest) -> Features:
        """Trunk features and class embeddings of every sample, in manifest order."""
        store = self.harness.evaluate.store(model.config.image_size)
        model.eval()
        trunk, embeddings, labels = [], [], []
        for start in range(0, len(manifest.samples), self.chunk_size):
            images, chunk_labels = store.samples(manifest.samples[start : start + self.chunk_size])
            features = model.encode_image(images)
            trunk.append(features.cpu())
            embeddings.append(model.project_class(features).cpu())
            labels.append(chunk_labels)
        return Features(torch.cat(trunk), torch.cat(embeddings), torch.cat(labels))

    def score_ood(
        self,
        model: DualEncoder,
        anchor: DatasetManifest,
        targets: Sequence[DatasetManifest],
        config: SNGPConfig,
        *,
        accuracies: Mapping[str, float] | None = None,
    ) -> list[OODReport]:
        """Scores each target against a head calibrated on ``anchor`` and combines the scores.

        With fewer than two targets the raw scores are returned without
        normalisation.
        """
        anchor_features = self.features(model, anchor)
        head = fit_sngp(anchor_features.trunk, anchor_features.labels, config, n_classes=len(anchor.class_names))
        tau = float(model.temperature)

        @torch.no_grad()
        def encode_names(names: Sequence[str]) -> torch.Tensor:
            return model.encode_prompts(class_prompts(names)).cpu()

        reports = []
        for target in targets:
            features = self.features(model, target)
            report = OODReport(
                dataset=target.name,
                image_ood=image_ood_score(head, features.trunk),
                text_ood=text_ood_score(features.embeddings, target.class_names, anchor.class_names, encode_names, tau),
            )
            if accuracies is not None and target.name in accuracies:
                report = report.with_accuracy(accuracies[target.name])
            log.info('%s: image %.6f text %.6f', target.name, report.image_ood, report.text_ood)
            reports.append(report)

        if len(reports) >= 2:
            reports = combine_scores(reports)
        return reports

    def correlations(self, reports: Sequence[OODReport]) -> dict[str, dict[str, float] | None]:
        result: dict[str, dict[str, float] | None] = {}
        for component in ('combined', 'image', 'text'):
            try:
                r, p = correlate(reports, component=component)
            except (ValueError, DegenerateStatisticError) as e:
                log.warning('No %s correlation: %s', component, e)
                result[component] = None
            else:
                result[component] = {'pearson_r': r, 'p_value': p}
        return result

    def write_scores(
        self,
        reports: Sequence[OODReport],
        path: pathlib.Path,
        *,
        checkpoint_digest: str,
        config: SNGPConfig,
    ) -> dict[str, Any]:
        """Writes the score table and a JSON sidecar with the bounds and correlations."""
        write_csv(
            path,
            SCORE_COLUMNS,
            [
                (r.dataset, r.image_ood, r.text_ood, r.image_norm, r.text_norm, r.combined, r.accuracy)
                for r in reports
            ],
        )
        summary: dict[str, Any] = {
            'checkpoint_digest': checkpoint_digest,
            'sngp': config.to_dict(),
            'bounds': score_bounds(reports),
            'image_degenerate': any(r.image_degenerate for r in reports),
            'text_degenerate': any(r.text_degenerate for r in reports),
            'correlation': self.correlations(reports),
        }
        write_json(path.with_suffix('.json'), summary)
        return summary

    def read_scores(self, path: pathlib.Path) -> list[OODReport]:
        def number(raw: str) -> float | None:
            return float(raw) if raw else None

        return [
            OODReport(
                dataset=row['dataset'],
                image_ood=float(row['image_ood_raw']),
                text_ood=float(row['text_ood_raw']),
                image_norm=number(row['image_ood_norm']),
                text_norm=number(row['text_ood_norm']),
                combined=number(row['combined']),
                accuracy=number(row['accuracy']),
            )
            for row in read_csv(path)
        ]

    def pairwise(
        self, model: DualEncoder, domains: Sequence[DatasetManifest], config: SNGPConfig
    ) -> tuple[np.ndarray, PCAResult]:
        """Symmetric domain-shift matrix over ``domains`` and its two-dimensional PCA."""
        n_classes = max(len(d.class_names) for d in domains)
        pairs = []
        for domain in domains:
            features = self.features(model, domain)
            pairs.append((features.trunk, features.labels))
        matrix = pairwise_ood_matrix(pairs, config, n_classes=n_classes)
        return matrix, pca_embed(matrix)

    def write_pca(
        self, names: Sequence[str], matrix: np.ndarray, pca: PCAResult, out: pathlib.Path
    ) -> dict[str, Any]:
        write_csv(out / 'pairwise.csv', ('domain', *names), [(name, *map(float, row)) for name, row in zip(names, matrix)])
        write_csv(
            out / 'pca.csv',
            ('domain', 'pc1', 'pc2'),
            [(name, float(x), float(y)) for name, (x, y) in zip(names, pca.coordinates)],
        )
        summary = {
            'domains': list(names),
            'explained_variance': [float(v) for v in pca.explained_variance],
            'explained_ratio': [float(v) for v in pca.explained_ratio],
            'rank_deficient': pca.rank_deficient,
        }
        write_json(out / 'pca.json', summary)
        return summary


def setup(harness: Harness) -> None:
    harness.add_stage(OODScore(harness))
