from __future__ import annotations

import dataclasses
import pathlib
import struct

import pytest
import torch

from utils.checkpoint import FORMAT_VERSION, Checkpoint, interpolate_weights, load_checkpoint, save_checkpoint
from utils.errors import CheckpointVersionError, CorruptedCheckpointError, ShapeMismatchError
from utils.model import DualEncoder, ModelConfig
from utils.tokenizer import Tokenizer


def make(model: DualEncoder, step: int = 0) -> Checkpoint:
    return Checkpoint.from_model(model, step=step, seed=0, config_digest='abc', method='test')


def test_save_load_preserves_everything(model: DualEncoder, tmp_path: pathlib.Path) -> None:
    ckpt = make(model, step=7)
    path = save_checkpoint(ckpt, tmp_path / 'a.ckpt')
    loaded = load_checkpoint(path)
    assert loaded.digest == ckpt.digest
    assert loaded.metadata == ckpt.metadata
    assert loaded.step == 7
    for name, tensor in ckpt.tensors.items():
        assert torch.equal(tensor, loaded.tensors[name])


def test_saving_twice_is_byte_identical(model: DualEncoder, tmp_path: pathlib.Path) -> None:
    ckpt = make(model)
    a = save_checkpoint(ckpt, tmp_path / 'a.ckpt').read_bytes()
    b = save_checkpoint(load_checkpoint(tmp_path / 'a.ckpt'), tmp_path / 'b.ckpt').read_bytes()
    assert a == b


def test_to_model_restores_weights(model: DualEncoder) -> None:
    ckpt = make(model)
    restored = ckpt.to_model()
    assert restored.tokenizer.vocab == model.tokenizer.vocab
    for name, tensor in model.state_dict().items():
        assert torch.equal(tensor, restored.state_dict()[name])


def test_checkpoint_is_immutable(model: DualEncoder) -> None:
    ckpt = make(model)
    digest = ckpt.digest
    with torch.no_grad():
        for p in model.parameters():
            p.add_(1.0)
    with pytest.raises(TypeError):
        ckpt.tensors['tau'] = torch.zeros(())  # type: ignore
    metadata = ckpt.metadata
    metadata['step'] = 99
    assert ckpt.step == 0
    assert Checkpoint(ckpt.tensors, ckpt.metadata).digest == digest


def test_version_mismatch(model: DualEncoder, tmp_path: pathlib.Path) -> None:
    path = save_checkpoint(make(model), tmp_path / 'a.ckpt')
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack('<I', FORMAT_VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError) as info:
        load_checkpoint(path)
    assert info.value.found == FORMAT_VERSION + 1


def test_truncated_and_foreign_files(model: DualEncoder, tmp_path: pathlib.Path) -> None:
    path = save_checkpoint(make(model), tmp_path / 'a.ckpt')
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 10])
    with pytest.raises(CorruptedCheckpointError):
        load_checkpoint(path)
    path.write_bytes(b'PK\x03\x04' + data[4:])
    with pytest.raises(CorruptedCheckpointError):
        load_checkpoint(path)


def test_interpolation_endpoints_and_midpoint(model: DualEncoder, model_config: ModelConfig, tokenizer: Tokenizer) -> None:
    a = make(model)
    b = make(DualEncoder(dataclasses.replace(model_config, seed=1), tokenizer))

    assert interpolate_weights(a, b, 1.0).digest == a.digest
    assert interpolate_weights(a, b, 0.0).digest == b.digest

    mid = interpolate_weights(a, b, 0.5)
    for name in a.tensors:
        assert torch.allclose(mid.tensors[name], (a.tensors[name] + b.tensors[name]) / 2, atol=1e-6)
    assert mid.metadata['parents'] == [a.digest, b.digest]
    assert mid.metadata['alpha'] == 0.5


def test_interpolation_is_affine(model: DualEncoder, model_config: ModelConfig, tokenizer: Tokenizer) -> None:
    a = make(model)
    b = make(DualEncoder(dataclasses.replace(model_config, seed=2), tokenizer))
    for alpha in (0.0, 0.25, 0.3, 0.5):
        left, right = interpolate_weights(a, b, alpha), interpolate_weights(a, b, 1.0 - alpha)
        for name in a.tensors:
            total = left.tensors[name].double() + right.tensors[name].double()
            assert torch.allclose(total, a.tensors[name].double() + b.tensors[name].double(), atol=1e-6), name


def test_interpolation_rejects_mismatches(model: DualEncoder, model_config: ModelConfig, tokenizer: Tokenizer) -> None:
    a = make(model)
    wider = make(DualEncoder(dataclasses.replace(model_config, embed_dim=8), tokenizer))
    with pytest.raises(ShapeMismatchError):
        interpolate_weights(a, wider, 0.5)
    with pytest.raises(ValueError):
        interpolate_weights(a, a, 1.5)
