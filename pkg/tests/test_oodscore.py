from __future__ import annotations

import json
import math
import pathlib
from typing import Sequence

import numpy as np
import pytest
import torch
from scipy import stats

from harness import Harness
from utils.corpus import DatasetManifest
from utils.errors import DegenerateStatisticError, DomainTooSmallError, UnfittedHeadError
from utils.model import DualEncoder, normalize_rows
from utils.ood import OODReport, combine_scores, correlate, image_ood_score, pairwise_ood_matrix, pca_embed, text_ood_score
from utils.sngp import SNGPConfig, SNGPHead, SpectralLinear, fit_sngp


SMALL = SNGPConfig(hidden_width=16, n_features=128, epochs=150, lr=2e-2)


def clusters(
    centres: Sequence[Sequence[float]], per_cluster: int, seed: int, spread: float = 0.3
) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    features, labels = [], []
    for label, centre in enumerate(centres):
        features.append(torch.tensor(centre) + spread * torch.randn(per_cluster, len(centre), generator=gen))
        labels.append(torch.full((per_cluster,), label, dtype=torch.long))
    return torch.cat(features), torch.cat(labels)


# SNGP


def test_sngp_is_more_uncertain_far_from_the_anchor() -> None:
    features, labels = clusters([[3.0, 0.0, 0.0, 0.0], [-3.0, 0.0, 0.0, 0.0]], 20, seed=0)
    head = fit_sngp(features, labels, SMALL)
    far, _ = clusters([[0.0, 0.0, 6.0, -6.0], [0.0, 0.0, -6.0, 6.0]], 20, seed=1)

    near_score = image_ood_score(head, features)
    far_score = image_ood_score(head, far)
    assert 0.0 < near_score < far_score < 1.0


def test_sngp_spectral_bound_holds() -> None:
    features, labels = clusters([[1.0, 1.0], [-1.0, -1.0]], 10, seed=2, spread=5.0)
    head = fit_sngp(features, labels, SMALL)
    assert all(norm <= SMALL.norm_bound + 1e-5 for norm in head.spectral_norms())


def test_spectral_linear_rescales_to_the_exact_norm() -> None:
    layer = SpectralLinear(6, 4, bound=0.95)
    weight = torch.zeros(4, 6)
    weight[0, 0], weight[1, 1], weight[2, 3] = 3.0, 1.0, -2.0
    with torch.no_grad():
        layer.weight.copy_(weight)
        assert float(torch.linalg.svdvals(layer.normalized_weight())[0]) == pytest.approx(0.95, abs=1e-6)
        layer.weight.copy_(weight / 10)
        assert torch.equal(layer.normalized_weight(), weight / 10)


def test_sngp_fit_is_deterministic() -> None:
    features, labels = clusters([[1.0, 0.0], [0.0, 1.0]], 8, seed=3)
    a = fit_sngp(features, labels, SMALL).uncertainty(features)
    b = fit_sngp(features, labels, SMALL).uncertainty(features)
    assert torch.equal(a, b)


def test_sngp_errors() -> None:
    with pytest.raises(UnfittedHeadError):
        SNGPHead(4, 2, SMALL).uncertainty(torch.zeros(3, 4))
    with pytest.raises(DomainTooSmallError):
        fit_sngp(torch.zeros(1, 4), torch.zeros(1, dtype=torch.long), SMALL)
    with pytest.raises(DomainTooSmallError):
        fit_sngp(torch.zeros(3, 4), torch.tensor([0, 1, 2]), SMALL, n_classes=5)


# Text scores


UNIT = {'cat': [1.0, 0.0, 0.0], 'dog': [0.0, 1.0, 0.0], 'fox': [0.0, 0.0, 1.0]}


def encode(names: Sequence[str]) -> torch.Tensor:
    return torch.tensor([UNIT[n] for n in names])


def test_text_ood_all_collisions_score_zero() -> None:
    def never(names: Sequence[str]) -> torch.Tensor:
        raise AssertionError('nothing to encode')

    assert text_ood_score(torch.eye(3), ['CAT', 'Dog'], ['cat', 'dog'], never, 0.1) == 0.0


def test_text_ood_mass_on_target_names() -> None:
    seen: list[list[str]] = []

    def recording(names: Sequence[str]) -> torch.Tensor:
        seen.append(list(names))
        return encode(names)

    near_fox = text_ood_score(torch.tensor([[0.0, 0.0, 1.0]]), ['Cat', 'fox'], ['cat', 'dog'], recording, 0.1)
    near_cat = text_ood_score(torch.tensor([[1.0, 0.0, 0.0]]), ['Cat', 'fox'], ['cat', 'dog'], recording, 0.1)
    assert seen[0] == ['cat', 'dog', 'fox']
    assert near_fox == pytest.approx(math.exp(10) / (2 + math.exp(10)))
    assert 0.0 <= near_cat < 0.01


def test_text_ood_with_equal_logits_counts_names() -> None:
    def same(names: Sequence[str]) -> torch.Tensor:
        return torch.full((len(names), 3), 1 / math.sqrt(3))

    embeddings = normalize_rows(torch.randn(5, 3, generator=torch.Generator().manual_seed(0)))
    assert text_ood_score(embeddings, ['fox', 'owl', 'Cat'], ['cat', 'dog'], same, 0.1) == pytest.approx(2 / 4)
    assert text_ood_score(embeddings, ['fox', 'owl', 'elk'], ['cat', 'dog'], same, 0.1) == pytest.approx(3 / 5)


def test_text_ood_never_grows_with_more_anchors() -> None:
    gen = torch.Generator().manual_seed(1)
    names = ['cat', 'dog', 'owl', 'elk', 'fox', 'yak']
    table = dict(zip(names, normalize_rows(torch.randn(len(names), 4, generator=gen))))

    def lookup(batch: Sequence[str]) -> torch.Tensor:
        return torch.stack([table[n] for n in batch])

    embeddings = normalize_rows(torch.randn(8, 4, generator=gen))
    scores = [text_ood_score(embeddings, ['fox', 'yak'], names[:k], lookup, 0.5) for k in range(1, 5)]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


# Combination


def test_combine_normalises_and_flags_flat_components() -> None:
    reports = [OODReport(f'd{i}', image_ood=v, text_ood=0.3) for i, v in enumerate((0.2, 0.4, 0.6))]
    combined = combine_scores(reports)
    assert [r.image_norm for r in combined] == pytest.approx([0.0, 0.5, 1.0])
    assert [r.text_norm for r in combined] == [0.5, 0.5, 0.5]
    assert [r.combined for r in combined] == pytest.approx([0.25, 0.5, 0.75])
    assert all(r.text_degenerate and not r.image_degenerate for r in combined)
    with pytest.raises(ValueError):
        combine_scores(reports[:1])


def test_combine_two_datasets_and_affine_invariance() -> None:
    reports = [OODReport('a', 0.1, 0.5), OODReport('b', 0.3, 0.9)]
    assert [r.combined for r in combine_scores(reports)] == pytest.approx([0.0, 1.0])

    rescaled = [OODReport(r.dataset, 3 * r.image_ood + 2, 0.5 * r.text_ood - 1) for r in reports]
    reports.append(OODReport('c', 0.2, 0.6))
    rescaled.append(OODReport('c', 3 * 0.2 + 2, 0.5 * 0.6 - 1))
    expected = [r.combined for r in combine_scores(reports)]
    assert [r.combined for r in combine_scores(rescaled)] == pytest.approx(expected)


# Pairwise matrix and PCA


def test_pairwise_matrix_is_symmetric_with_zero_diagonal() -> None:
    domains = [clusters([[c, 0.0, 0.0], [0.0, c, 0.0]], 6, seed=10 + i) for i, c in enumerate((1.0, 3.0, -2.0))]
    matrix = pairwise_ood_matrix(domains, SNGPConfig(hidden_width=8, n_features=64, epochs=40))
    assert matrix.shape == (3, 3)
    assert np.array_equal(np.diag(matrix), np.zeros(3))
    assert np.array_equal(matrix, matrix.T)

    with pytest.raises(DomainTooSmallError):
        pairwise_ood_matrix([clusters([[1.0, 0.0, 0.0]], 1, seed=99)] + domains, SMALL, n_classes=2)
    with pytest.raises(ValueError):
        pairwise_ood_matrix(domains[:1], SMALL)


def test_pca_of_collinear_rows_is_rank_deficient() -> None:
    matrix = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    pca = pca_embed(matrix)
    assert pca.rank_deficient
    assert pca.coordinates[:, 0] == pytest.approx([-math.sqrt(3), 0.0, math.sqrt(3)])
    assert np.array_equal(pca.coordinates[:, 1], np.zeros(3))
    assert pca.explained_ratio.tolist() == pytest.approx([1.0, 0.0])


def test_pca_sign_convention() -> None:
    gen = np.random.default_rng(0)
    raw = gen.random((5, 5))
    matrix = raw + raw.T
    np.fill_diagonal(matrix, 0.0)
    pca = pca_embed(matrix)
    assert not pca.rank_deficient
    for c in range(2):
        component = pca.components[:, c]
        assert component[np.argmax(np.abs(component))] > 0
    assert pca.explained_variance[0] >= pca.explained_variance[1] > 0
    with pytest.raises(ValueError):
        pca_embed(np.zeros((2, 2)))


def test_pca_reconstructs_planar_rows() -> None:
    gen = np.random.default_rng(3)
    matrix = gen.normal(size=(6, 2)) @ gen.normal(size=(2, 6)) + gen.normal(size=6)
    pca = pca_embed(matrix)
    assert not pca.rank_deficient
    rebuilt = pca.coordinates @ pca.components.T + pca.mean
    assert np.abs(rebuilt - matrix).max() < 1e-8


# Correlation


def reports_with(scores: Sequence[float], accuracies: Sequence[float]) -> list[OODReport]:
    return [
        OODReport(f'd{i}', image_ood=s, text_ood=s, combined=s, accuracy=a)
        for i, (s, a) in enumerate(zip(scores, accuracies))
    ]


def test_correlate_perfect_line() -> None:
    assert correlate(reports_with([0.0, 0.5, 1.0], [1.0, 0.5, 0.0])) == (-1.0, 0.0)


def test_correlate_matches_scipy() -> None:
    scores, accuracies = [0.1, 0.4, 0.35, 0.8, 0.6], [0.9, 0.7, 0.75, 0.4, 0.6]
    r, p = correlate(reports_with(scores, accuracies), component='image')
    expected = stats.pearsonr(scores, accuracies)
    assert r == pytest.approx(expected[0])
    assert p == pytest.approx(expected[1])


def test_correlate_errors() -> None:
    with pytest.raises(DegenerateStatisticError):
        correlate(reports_with([0.1, 0.2, 0.3], [0.5, 0.5, 0.5]))
    with pytest.raises(ValueError):
        correlate(reports_with([0.1, 0.2], [0.5, 0.6]))
    with pytest.raises(ValueError):
        correlate([OODReport(f'd{i}', 0.1 * i, 0.1, accuracy=0.5) for i in range(3)])


# Stage


def test_score_ood_stage(harness: Harness, model: DualEncoder, corpus: DatasetManifest, tmp_path: pathlib.Path) -> None:
    anchor = corpus.subset(domains=['clean'], classes=['circle', 'square'], name='anchor')
    seen = corpus.subset(domains=['hue'], classes=['circle', 'square'], name='hue-0')
    novel = corpus.subset(domains=['pixel'], classes=['triangle', 'star'], name='pixel-2')
    config = SNGPConfig(hidden_width=8, n_features=64, epochs=20)

    reports = harness.oodscore.score_ood(model, anchor, [seen, novel], config, accuracies={'hue-0': 0.5})
    assert [r.dataset for r in reports] == ['hue-0', 'pixel-2']
    assert reports[0].text_ood == 0.0
    assert 0.0 < reports[1].text_ood <= 1.0
    assert reports[0].text_norm == 0.0 and reports[1].text_norm == 1.0
    assert reports[0].accuracy == 0.5 and reports[1].accuracy is None

    summary = harness.oodscore.write_scores(reports, tmp_path / 'ood.csv', checkpoint_digest='abc', config=config)
    assert summary['correlation'] == {'combined': None, 'image': None, 'text': None}
    assert json.loads((tmp_path / 'ood.json').read_text())['checkpoint_digest'] == 'abc'
    again = harness.oodscore.read_scores(tmp_path / 'ood.csv')
    assert [r.combined for r in again] == [r.combined for r in reports]


def test_pairwise_stage(harness: Harness, model: DualEncoder, corpus: DatasetManifest, tmp_path: pathlib.Path) -> None:
    names = ['clean', 'hue', 'inverted']
    domains = [corpus.subset(domains=[d], name=d) for d in names]
    matrix, pca = harness.oodscore.pairwise(model, domains, SNGPConfig(hidden_width=8, n_features=64, epochs=10))
    assert matrix.shape == (3, 3)
    assert pca.coordinates.shape == (3, 2)

    summary = harness.oodscore.write_pca(names, matrix, pca, tmp_path / 'pca')
    assert summary['domains'] == names
    assert (tmp_path / 'pca' / 'pairwise.csv').read_text().splitlines()[0] == 'domain,clean,hue,inverted'
