"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Any, Callable, Literal, NamedTuple, Sequence

import numpy as np
import torch
from scipy import stats

from .errors import DegenerateStatisticError, DomainTooSmallError, EmptySequenceError
from .sngp import SNGPConfig, SNGPHead, fit_sngp


__all__ = (
    'OODReport',
    'image_ood_score',
    'text_ood_score',
    'combine_scores',
    'score_bounds',
    'pairwise_ood_matrix',
    'PCAResult',
    'pca_embed',
    'correlate',
)

log = logging.getLogger(__name__)

Component = Literal['combined', 'image', 'text']


@dataclasses.dataclass(frozen=True)
class OODReport:
    dataset: str
    image_ood: float
    text_ood: float
    image_norm: float | None = None
    text_norm: float | None = None
    combined: float | None = None
    accuracy: float | None = None
    image_degenerate: bool = False
    text_degenerate: bool = False

    def with_accuracy(self, accuracy: float) -> OODReport:
        return dataclasses.replace(self, accuracy=accuracy)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def image_ood_score(head: SNGPHead, features: torch.Tensor) -> float:
    """Mean predictive uncertainty of the head over a dataset's trunk features."""
    if features.shape[0] == 0:
        raise EmptySequenceError('Cannot score an empty dataset.')
    per_sample = head.uncertainty(features).tolist()
    # fsum makes the mean independent of sample order
    return math.fsum(per_sample) / len(per_sample)


def _dedup_folded(names: Sequence[str]) -> list[str]:
    seen: dict[str, None] = {}
    for name in names:
        seen.setdefault(name.casefold(), None)
    return list(seen)


def text_ood_score(
    image_embeddings: torch.Tensor,
    target_names: Sequence[str],
    anchor_names: Sequence[str],
    encode_names: Callable[[Sequence[str]], torch.Tensor],
    tau: float,
) -> float:
    """Probability mass that zero-shot classification over the joint label set puts on target-only names.

    Names are compared case-folded; a target name that is also an anchor name
    counts as an anchor name. If every target name collides the score is 0.
    """
    if not target_names:
        raise EmptySequenceError('At least one target class name is required.')
    anchors = _dedup_folded(anchor_names)
    anchor_set = set(anchors)
    targets = [name for name in _dedup_folded(target_names) if name not in anchor_set]
    if not targets:
        return 0.0
    if image_embeddings.shape[0] == 0:
        raise EmptySequenceError('Cannot score an empty dataset.')

    with torch.no_grad():
        names = encode_names(anchors + targets).double()
        logits = image_embeddings.double() @ names.T / float(tau)
        probs = torch.softmax(logits, dim=1)
        mass = probs[:, len(anchors) :].sum(dim=1)
    score = math.fsum(mass.tolist()) / mass.shape[0]
    return min(max(score, 0.0), 1.0)


def _min_max(values: list[float]) -> tuple[list[float], bool]:
    lo, hi = min(values), max(values)
    if hi - lo <= 0.0:
        return [0.5] * len(values), True
    return [(v - lo) / (hi - lo) for v in values], False


def combine_scores(reports: Sequence[OODReport]) -> list[OODReport]:
    """Min-max normalises both raw scores across the collection and averages them.

    A component with no spread is set to 0.5 everywhere and flagged.
    """
    if len(reports) < 2:
        raise ValueError('Combining scores needs at least two datasets.')
    image, image_flat = _min_max([r.image_ood for r in reports])
    text, text_flat = _min_max([r.text_ood for r in reports])
    if image_flat or text_flat:
        log.warning('Degenerate min-max normalisation (image=%s, text=%s)', image_flat, text_flat)
    return [
        dataclasses.replace(
            r,
            image_norm=i,
            text_norm=t,
            combined=(i + t) / 2,
            image_degenerate=image_flat,
            text_degenerate=text_flat,
        )
        for r, i, t in zip(reports, image, text)
    ]


def score_bounds(reports: Sequence[OODReport]) -> dict[str, dict[str, float]]:
    return {
        'image_ood': {'min': min(r.image_ood for r in reports), 'max': max(r.image_ood for r in reports)},
        'text_ood': {'min': min(r.text_ood for r in reports), 'max': max(r.text_ood for r in reports)},
    }


def pairwise_ood_matrix(
    domains: Sequence[tuple[torch.Tensor, torch.Tensor]],
    config: SNGPConfig,
    *,
    n_classes: int | None = None,
) -> np.ndarray:
    """Entry (i, j) scores domain j under a head fitted on domain i.

    Each row has its self-score subtracted, then the matrix is symmetrised,
    so the diagonal is exactly zero.
    """
    k = len(domains)
    if k < 2:
        raise ValueError('A pairwise matrix needs at least two domains.')
    if n_classes is None:
        n_classes = max(int(labels.max()) + 1 for _, labels in domains)

    raw = np.zeros((k, k), dtype=np.float64)
    for i, (features, labels) in enumerate(domains):
        if features.shape[0] < max(2, n_classes):
            raise DomainTooSmallError(f'Domain {i} has {features.shape[0]} samples, too few to fit a head.')
        head = fit_sngp(features, labels, config, n_classes=n_classes)
        for j, (other, _) in enumerate(domains):
            raw[i, j] = image_ood_score(head, other)
        log.info('Pairwise row %d/%d done', i + 1, k)

    shifted = raw - np.diag(raw)[:, None]
    matrix = (shifted + shifted.T) / 2
    np.fill_diagonal(matrix, 0.0)
    return matrix


class PCAResult(NamedTuple):
    coordinates: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    rank_deficient: bool

    @property
    def explained_ratio(self) -> np.ndarray:
        total = self.explained_variance.sum()
        return self.explained_variance / total if total > 0 else np.zeros_like(self.explained_variance)


def pca_embed(matrix: np.ndarray, *, tolerance: float = 1e-12) -> PCAResult:
    """Two-dimensional PCA of the rows of a square matrix.

    Each component's largest-magnitude loading is made positive. If the
    centred rows span fewer than two dimensions, the missing coordinates are
    zeroed and ``rank_deficient`` is set.
    """
    data = np.asarray(matrix, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise ValueError(f'Expected a square matrix, got shape {data.shape}')
    if data.shape[0] < 3:
        raise ValueError('PCA of domains needs at least three of them.')

    mean = data.mean(axis=0)
    centred = data - mean
    covariance = centred.T @ centred / (data.shape[0] - 1)
    values, vectors = np.linalg.eigh(covariance)
    order = np.argsort(values)[::-1][:2]
    values = np.clip(values[order], 0.0, None)
    vectors = vectors[:, order]
    for c in range(2):
        pivot = int(np.argmax(np.abs(vectors[:, c])))
        if vectors[pivot, c] < 0:
            vectors[:, c] = -vectors[:, c]

    coordinates = centred @ vectors
    scale = max(values[0], 0.0)
    deficient = False
    for c in range(2):
        if values[c] <= tolerance * max(scale, 1.0):
            coordinates[:, c] = 0.0
            values[c] = 0.0
            deficient = True
    if deficient:
        log.warning('Pairwise matrix has rank below two; PCA coordinates are partially zeroed.')
    return PCAResult(coordinates, values, vectors, mean, deficient)


def _component(report: OODReport, component: Component) -> float:
    if component == 'combined':
        if report.combined is None:
            raise ValueError(f'Report {report.dataset!r} has no combined score; run combine_scores first.')
        return report.combined
    if component == 'image':
        return report.image_ood
    if component == 'text':
        return report.text_ood
    raise ValueError(f'Unknown component {component!r}')


def correlate(reports: Sequence[OODReport], *, component: Component = 'combined') -> tuple[float, float]:
    """Pearson r between an OOD score and accuracy with a two-sided t-test p-value."""
    usable = [r for r in reports if r.accuracy is not None]
    if len(usable) < 3:
        raise ValueError('Correlation needs at least three reports with an accuracy.')
    x = np.array([_component(r, component) for r in usable], dtype=np.float64)
    y = np.array([r.accuracy for r in usable], dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateStatisticError(f'Zero variance in the {component} score or in accuracy.')

    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    dof = len(usable) - 2
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt(dof / (1.0 - r * r))
    p = float(2.0 * stats.t.sf(abs(t), dof))
    return r, p
