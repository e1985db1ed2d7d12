from __future__ import annotations

import json
import math
import pathlib

import pytest

from harness import Harness, config_section
from stages.finetune import RunConfig
from stages.unlearn import UnlearnConfig
from utils.config import load_kv_config
from utils.corpus import CorpusConfig, StyleBankConfig
from utils.errors import ConfigError
from utils.flags import AblationFlags
from utils.sngp import SNGPConfig


def test_config_sections() -> None:
    assert config_section(SNGPConfig) == 'sngp'
    assert config_section(StyleBankConfig) == 'stylebank'
    assert config_section(RunConfig) == 'run'


def test_every_stage_is_loaded(harness: Harness) -> None:
    assert sorted(harness.stages) == ['Corpus', 'Evaluate', 'Finetune', 'OODScore', 'Pretrain', 'Report', 'Unlearn']
    assert {'lr', 'sngp.lr', 'run.lr', 'ratio', 'n_classes'} <= harness.known_keys()


def test_plain_and_sectioned_keys(tmp_path: pathlib.Path) -> None:
    harness = Harness(tmp_path, seed=7, overrides={'lr': '0.5', 'sngp.lr': '0.125', 'ratio': 'inf', 'ablation': 'none'})
    sngp, run, unlearn = harness.configure(SNGPConfig(), RunConfig(), UnlearnConfig())
    assert sngp.lr == 0.125
    assert run.lr == 0.5 and unlearn.lr == 0.5
    assert math.isinf(run.ratio)
    assert run.ablation == AblationFlags.none()
    assert sngp.seed == 7


def test_seed_follows_the_file_when_set(tmp_path: pathlib.Path) -> None:
    harness = Harness(tmp_path, seed=7, overrides={'seed': '3', 'stylebank.seed': '4'})
    corpus, styles = harness.configure(CorpusConfig(), StyleBankConfig())
    assert corpus.seed == 3
    assert styles.seed == 4


@pytest.mark.parametrize('overrides', [{'bogus': '1'}, {'sngp.ratio': '2'}, {'steps': 'many'}, {'with_captions': 'maybe'}])
def test_bad_overrides(tmp_path: pathlib.Path, overrides: dict[str, str]) -> None:
    harness = Harness(tmp_path, overrides=overrides)
    with pytest.raises(ConfigError):
        harness.configure(RunConfig())


def test_record_run_is_stable(tmp_path: pathlib.Path) -> None:
    harness = Harness(tmp_path, seed=1)
    first = harness.record_run('split-data', {'manifest': tmp_path / 'm.json', 'val_every': 5})
    second = harness.record_run('split-data', {'val_every': 5, 'manifest': tmp_path / 'm.json'})
    assert first == second
    stored = json.loads((tmp_path / 'run.json').read_text())
    assert stored['split-data']['config_digest'] == first
    assert stored['split-data']['config']['manifest'] == (tmp_path / 'm.json').as_posix()

    reopened = Harness(tmp_path)
    assert 'split-data' in reopened.runs
    assert reopened.runs['split-data']['seed'] == 1
    assert reopened.runs.get('pretrain') is None


def test_load_kv_config(tmp_path: pathlib.Path) -> None:
    path = tmp_path / 'bench.cfg'
    path.write_text('# comment\nlr = 0.1\n\nsngp.n-features = 64  # inline\n')
    assert load_kv_config(path) == {'lr': '0.1', 'sngp.n_features': '64'}
    path.write_text('lr 0.1\n')
    with pytest.raises(ConfigError):
        load_kv_config(path)
