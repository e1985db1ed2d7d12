from __future__ import annotations

import dataclasses
import json
import math
import pathlib

import pytest
import torch

from harness import Harness
from stages.unlearn import UnlearnAudit, UnlearnConfig, domains_of, sample_noise_batch
from utils.checkpoint import Checkpoint
from utils.corpus import DatasetManifest
from utils.errors import ConfigError, ShapeMismatchError
from utils.model import DualEncoder


@pytest.fixture
def start(model: DualEncoder) -> Checkpoint:
    return Checkpoint.from_model(model, step=0, seed=0, config_digest='', method='pretrain')


@pytest.fixture
def retain(corpus: DatasetManifest) -> DatasetManifest:
    return corpus.subset(domains=['clean', 'hue'], name='retain')


@pytest.fixture
def forget(corpus: DatasetManifest) -> DatasetManifest:
    return corpus.subset(domains=['noise'], name='forget')


CONFIG = UnlearnConfig(steps=3, batch_size=8, audit_every=2, classifier_width=16)


def test_zero_lambda_matches_retain_only(
    harness: Harness, start: Checkpoint, retain: DatasetManifest, forget: DatasetManifest
) -> None:
    plain, plain_audit = harness.unlearn.unlearn(start, CONFIG, retain, forget, retain_only=True)
    zero, zero_audit = harness.unlearn.unlearn(start, dataclasses.replace(CONFIG, lam=0.0), retain, forget)
    for name, tensor in plain.tensors.items():
        assert torch.equal(tensor, zero.tensors[name]), name
    assert plain_audit.after == zero_audit.after


def test_unlearning_changes_the_encoder(
    harness: Harness, start: Checkpoint, retain: DatasetManifest, forget: DatasetManifest
) -> None:
    ckpt, audit = harness.unlearn.unlearn(start, CONFIG, retain, forget)
    assert ckpt.step == 3
    assert ckpt.tensors.keys() == start.tensors.keys()
    assert any(not torch.equal(t, start.tensors[k]) for k, t in ckpt.tensors.items())

    assert audit.forget_domain == 'noise'
    assert sorted(audit.before) == sorted(audit.after) == ['clean', 'hue', 'noise']
    assert [entry['step'] for entry in audit.intervals] == [2]
    assert audit.forget_before == audit.before['noise']


def test_forget_set_must_be_one_unseen_domain(
    harness: Harness, start: Checkpoint, retain: DatasetManifest, corpus: DatasetManifest
) -> None:
    with pytest.raises(ConfigError):
        harness.unlearn.unlearn(start, CONFIG, retain, corpus.subset(domains=['noise', 'pixel']))
    with pytest.raises(ConfigError):
        harness.unlearn.unlearn(start, CONFIG, retain, corpus.subset(domains=['hue']))
    with pytest.raises(ConfigError):
        harness.unlearn.unlearn(start, dataclasses.replace(CONFIG, lam=-1.0), retain, corpus.subset(domains=['noise']))


def test_audit_payload(tmp_path: pathlib.Path) -> None:
    audit = UnlearnAudit('noise', {'clean': 0.5, 'noise': 0.5}, {'clean': 0.5, 'noise': 0.125})
    audit.forget_before, audit.forget_after = 0.5, 0.125
    audit.retain_before, audit.retain_after = 0.0, 0.25
    payload = audit.to_payload()
    assert payload['forget_relative_drop'] == 0.75
    assert payload['retain_relative_drop'] == 0.0
    assert payload['domains'] == [
        {'domain': 'clean', 'before': 0.5, 'after': 0.5},
        {'domain': 'noise', 'before': 0.5, 'after': 0.125},
    ]
    assert json.loads(audit.save(tmp_path / 'unlearn.json').read_text()) == payload


def test_noise_batch_and_domains(forget: DatasetManifest) -> None:
    first = sample_noise_batch((4, 3, 16, 16), 0)
    second = sample_noise_batch(torch.Size([4, 3, 16, 16]), 0)
    assert first.pixels.shape == (4, 3, 16, 16)
    assert torch.equal(first.pixels, second.pixels)
    assert not torch.equal(first.pixels, sample_noise_batch((4, 3, 16, 16), 1).pixels)

    stream = torch.Generator().manual_seed(0)
    assert torch.equal(sample_noise_batch((4, 3, 16, 16), stream).pixels, first.pixels)
    assert not torch.equal(sample_noise_batch((4, 3, 16, 16), stream).pixels, first.pixels)
    with pytest.raises(ShapeMismatchError):
        sample_noise_batch((3, 16, 16), 0)
    assert 0.0 <= float(first.pixels.min()) and float(first.pixels.max()) < 1.0
    assert domains_of(forget) == ['noise']
    assert math.isclose(UnlearnAudit.relative_drop(0.8, 0.2), 0.75)
