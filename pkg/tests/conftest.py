from __future__ import annotations

import pathlib

import pytest

from harness import Harness
from utils.corpus import (
    CorpusConfig,
    DatasetManifest,
    StyleBankConfig,
    StyleRecord,
    generate_corpus,
    generate_style_bank,
    load_style_manifest,
)
from utils.model import DualEncoder, ModelConfig, class_prompts
from utils.tokenizer import Tokenizer


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig(
        image_size=16,
        patch_size=4,
        trunk_width=32,
        trunk_depth=1,
        heads=2,
        text_width=32,
        text_depth=1,
        embed_dim=16,
        hidden_width=8,
        max_length=12,
    )


@pytest.fixture(scope='session')
def corpus_dir(tmp_path_factory: pytest.TempPathFactory) -> pathlib.Path:
    out = tmp_path_factory.mktemp('benchmark')
    generate_corpus(CorpusConfig(n_classes=4, n_domains=6, images_per_cell=4, image_size=16), out)
    return out


@pytest.fixture
def corpus(corpus_dir: pathlib.Path) -> DatasetManifest:
    return DatasetManifest.load(corpus_dir / 'manifest.json')


@pytest.fixture(scope='session')
def styles_dir(tmp_path_factory: pytest.TempPathFactory) -> pathlib.Path:
    out = tmp_path_factory.mktemp('styles')
    generate_style_bank(StyleBankConfig(n_styles=6, images_per_style=2, image_size=16, hidden_width=8), out)
    return out


@pytest.fixture
def styles(styles_dir: pathlib.Path) -> list[StyleRecord]:
    return load_style_manifest(styles_dir / 'styles.json')


@pytest.fixture
def tokenizer(corpus: DatasetManifest, styles: list[StyleRecord]) -> Tokenizer:
    texts = corpus.captions() + class_prompts(corpus.class_names) + [s.description for s in styles]
    return Tokenizer.from_corpus(texts, max_length=12)


@pytest.fixture
def model(model_config: ModelConfig, tokenizer: Tokenizer) -> DualEncoder:
    return DualEncoder(model_config, tokenizer)


@pytest.fixture
def harness(tmp_path: pathlib.Path) -> Harness:
    return Harness(tmp_path / 'run', seed=0)
