from __future__ import annotations

import json
import math
import pathlib
import threading

import numpy as np
import pytest
from PIL import Image

from harness import Harness
from stages.corpus import SplitConfig
from utils.corpus import (
    CorpusConfig,
    DatasetManifest,
    ImageStore,
    Sample,
    StyleBankConfig,
    StyleRecord,
    generate_corpus,
    load_style_manifest,
    style_vocabulary,
    two_stream_batches,
)
from utils.errors import (
    ConfigError,
    EmptySequenceError,
    InconsistentHiddenStateError,
    ManifestError,
    MissingHiddenStatesError,
    MissingImageError,
)
from utils.queue import Prefetcher
from utils.tokenizer import split_words


def test_corpus_layout(corpus: DatasetManifest, corpus_dir: pathlib.Path) -> None:
    assert len(corpus) == 4 * 6 * 4
    assert corpus.class_names == ('circle', 'square', 'triangle', 'star')
    assert corpus.domain_names[:2] == ('clean', 'hue')
    for domain in corpus.domain_names:
        per_domain = DatasetManifest.load(corpus_dir / 'domains' / f'{domain}.json')
        assert len(per_domain) == 16
        assert per_domain.domain_names == (domain,)


def test_corpus_is_deterministic(tmp_path: pathlib.Path, corpus_dir: pathlib.Path) -> None:
    config = CorpusConfig(n_classes=4, n_domains=6, images_per_cell=4, image_size=16)
    again = generate_corpus(config, tmp_path)
    assert (tmp_path / 'manifest.json').read_text() == (corpus_dir / 'manifest.json').read_text()
    for sample in again.samples[::7]:
        relative = sample.path.relative_to(tmp_path)
        assert sample.path.read_bytes() == (corpus_dir / relative).read_bytes()


def test_domains_change_pixels(corpus: DatasetManifest) -> None:
    def pixels(domain: str) -> np.ndarray:
        sample = next(s for s in corpus.samples if corpus.domain_names[s.domain_index] == domain)
        with Image.open(sample.path) as image:
            return np.asarray(image.convert('RGB'), dtype=np.int16)

    clean, inverted = pixels('clean'), pixels('inverted')
    assert clean.shape == (16, 16, 3)
    assert np.abs(clean - inverted).mean() > 10


def test_captions_and_subset(corpus: DatasetManifest) -> None:
    first = corpus.samples[0]
    assert corpus.caption(first) == 'a clean picture of a circle'

    sub = corpus.subset(domains=['noise'], classes=['star', 'circle'], name='noisy')
    assert sub.class_names == ('star', 'circle')
    assert len(sub) == 8
    assert {s.domain_index for s in sub.samples} == {0}
    for s in sub.samples:
        assert s.path.parts[-2] == sub.class_names[s.class_index]
    with pytest.raises(ManifestError):
        corpus.subset(classes=['hexagon'])


def test_manifest_validation(tmp_path: pathlib.Path) -> None:
    with pytest.raises(ManifestError):
        DatasetManifest('x', 'all', ('Star', 'star'), ('clean',), ())
    with pytest.raises(ManifestError):
        DatasetManifest('x', 'all', ('star',), ('clean',), (Sample(tmp_path / 'a.png', 1, 0),))

    missing = DatasetManifest('x', 'all', ('star',), ('clean',), (Sample(tmp_path / 'gone.png', 0, 0),))
    path = missing.save(tmp_path / 'x.json')
    with pytest.raises(MissingImageError):
        DatasetManifest.load(path)
    assert len(DatasetManifest.load(path, check_files=False)) == 1


@pytest.mark.parametrize(
    'config',
    [CorpusConfig(n_classes=0), CorpusConfig(n_classes=99), CorpusConfig(n_domains=99), StyleBankConfig(n_styles=10**6)],
)
def test_config_bounds(config: CorpusConfig | StyleBankConfig) -> None:
    with pytest.raises(ConfigError):
        config.validate()


def test_style_bank(styles: list[StyleRecord]) -> None:
    assert len(styles) == 6
    assert len({s.description for s in styles}) == 6
    vocabulary = set(style_vocabulary())
    for record in styles:
        assert record.hidden_state is not None and record.hidden_state.shape == (8,)
        assert len(record.image_refs) == 2
        assert set(split_words(record.description)) <= vocabulary


def test_style_manifest_requires_hidden_states(styles_dir: pathlib.Path) -> None:
    payload = json.loads((styles_dir / 'styles.json').read_text())
    payload['styles'][0]['hidden_state_file'] = None
    path = styles_dir / 'no-hidden.json'
    path.write_text(json.dumps(payload))
    with pytest.raises(MissingHiddenStatesError):
        load_style_manifest(path)
    records = load_style_manifest(path, allow_missing_hidden=True)
    assert records[0].hidden_state is None
    assert records[1].hidden_state is not None


def test_style_manifest_checks_width(styles_dir: pathlib.Path) -> None:
    payload = json.loads((styles_dir / 'styles.json').read_text())
    payload['hidden_state_width'] = 9
    path = styles_dir / 'wrong-width.json'
    path.write_text(json.dumps(payload))
    with pytest.raises(InconsistentHiddenStateError):
        load_style_manifest(path)


def test_two_stream_pattern(corpus: DatasetManifest, styles: list[StyleRecord]) -> None:
    source = corpus.subset(domains=['clean'])
    stream = two_stream_batches(source, styles, 5, 2, seed=3, style_batch_size=4, epochs=2)
    batches = list(stream)
    kinds = ''.join('S' if b.kind == 'source' else 'D' for b in batches)
    # 16 samples in batches of 5 is 4 source batches per epoch
    assert kinds == 'SSDSSD' + 'SSDSSD'
    for epoch in (0, 1):
        seen = [s for b in batches if b.kind == 'source' and b.epoch == epoch for s in b.samples]
        assert sorted(seen) == sorted(source.samples)
    assert [len(b.samples) for b in batches if b.kind == 'source'][:4] == [5, 5, 5, 1]
    for b in batches:
        if b.kind == 'diffusion':
            ids = [record.style_id for record, _ in b.styles]
            assert len(ids) == len(set(ids)) == 4
            assert all(path in record.image_refs for record, path in b.styles)


def test_two_stream_without_diffusion(corpus: DatasetManifest) -> None:
    source = corpus.subset(domains=['clean'])
    batches = list(two_stream_batches(source, [], 4, math.inf, seed=0, epochs=3))
    assert len(batches) == 12
    assert all(b.kind == 'source' for b in batches)
    with pytest.raises(EmptySequenceError):
        next(two_stream_batches(source, [], 4, 2, seed=0))


def test_two_stream_is_deterministic(corpus: DatasetManifest, styles: list[StyleRecord]) -> None:
    def run(seed: int) -> list[tuple[str, ...]]:
        stream = two_stream_batches(corpus, styles, 8, 3, seed=seed, epochs=1)
        return [tuple(s.path.name for s in b.samples) + tuple(r.style_id for r, _ in b.styles) for b in stream]

    assert run(5) == run(5)
    assert run(5) != run(6)


def test_image_store(corpus: DatasetManifest) -> None:
    store = ImageStore(8)
    batch, labels = store.samples(corpus.samples[:3])
    assert batch.pixels.shape == (3, 3, 8, 8)
    assert float(batch.pixels.min()) >= 0.0 and float(batch.pixels.max()) <= 1.0
    assert labels.tolist() == [s.class_index for s in corpus.samples[:3]]
    with pytest.raises(EmptySequenceError):
        store.stack([])

    small = ImageStore(8, max_cached=2)
    first, second, third = (s.path for s in corpus.samples[:3])
    assert small.load(first) is small.load(first)
    small.load(second)
    small.load(third)
    assert len(small._cache) == 2
    assert first not in small._cache and third in small._cache


def test_prefetcher_preserves_order_and_errors() -> None:
    threads: set[str] = set()

    def square(x: int) -> int:
        threads.add(threading.current_thread().name)
        if x == 7:
            raise ValueError('seven')
        return x * x

    assert list(Prefetcher(range(5), square, depth=2)) == [0, 1, 4, 9, 16]
    assert threads == {'prefetcher'}

    got: list[int] = []
    with pytest.raises(ValueError, match='seven'):
        for value in Prefetcher(range(10), square):
            got.append(value)
    assert got == [x * x for x in range(7)]


def test_split_data(corpus: DatasetManifest, harness: Harness, tmp_path: pathlib.Path) -> None:
    config = SplitConfig(n_pretrain_domains=5, n_anchor_classes=2, target_classes=2, val_every=2, caption_every=2)
    splits = harness.corpus.split_data(corpus, config, tmp_path / 'splits')

    source, anchor = splits['source'], splits['anchor-val']
    assert source.class_names == anchor.class_names == ('circle', 'square')
    assert set(source.samples).isdisjoint(anchor.samples)
    assert len(source) + len(anchor) == 8

    assert {splits['forget'].domain_names[s.domain_index] for s in splits['forget'].samples} == {'noise'}
    retain_domains = {splits['retain'].domain_names[s.domain_index] for s in splits['retain'].samples}
    assert retain_domains == {'clean', 'hue', 'pixel', 'stripes'}

    targets = {k: v for k, v in splits.items() if k.startswith('targets/')}
    assert len(targets) == 5
    assert splits['targets/hue-0'].class_names == ('circle', 'square')
    assert splits['targets/pixel-1'].class_names == ('square', 'triangle')
    for key in targets:
        assert DatasetManifest.load(tmp_path / 'splits' / f'{key}.json').class_names == targets[key].class_names
