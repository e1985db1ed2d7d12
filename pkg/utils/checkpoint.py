"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.

Checkpoint file layout, all integers little-endian::

    b'DCA1'                       magic
    u32                           format version
    u32 + bytes                   metadata, UTF-8 JSON
    u32                           tensor count
    per tensor:
        u16 + bytes               name, UTF-8
        u8                        dtype code (0 = float32)
        u8 + u32 * ndim           shape
        u64 u64                   payload offset and byte length
    payload                       raw float32 data, offsets relative to its start
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import pathlib
import struct
import uuid
from types import MappingProxyType
from typing import Mapping

import numpy as np
import torch

from ._types.artifacts import CheckpointMetadata
from .errors import CheckpointVersionError, CorruptedCheckpointError, ShapeMismatchError
from .model import DualEncoder, ModelConfig
from .tokenizer import Tokenizer


__all__ = ('Checkpoint', 'save_checkpoint', 'load_checkpoint', 'interpolate_weights', 'FORMAT_VERSION')

log = logging.getLogger(__name__)

MAGIC = b'DCA1'
FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype('<f4')}


class Checkpoint:
    """An immutable named-tensor map with its metadata."""

    __slots__ = ('_tensors', '_metadata', '_digest')

    def __init__(self, tensors: Mapping[str, torch.Tensor], metadata: CheckpointMetadata) -> None:
        cleaned: dict[str, torch.Tensor] = {}
        for name, tensor in tensors.items():
            t = tensor.detach().to('cpu', torch.float32).contiguous().clone()
            t.requires_grad_(False)
            cleaned[name] = t
        self._tensors = MappingProxyType(cleaned)
        self._metadata: CheckpointMetadata = copy.deepcopy(metadata)
        self._digest: str | None = None

    def __repr__(self) -> str:
        return f'<Checkpoint step={self.step} tensors={len(self._tensors)} digest={self.digest[:12]}>'

    @classmethod
    def from_model(
        cls,
        model: DualEncoder,
        *,
        step: int,
        seed: int,
        config_digest: str,
        method: str | None = None,
    ) -> Checkpoint:
        metadata: CheckpointMetadata = {
            'format_version': FORMAT_VERSION,
            'step': step,
            'seed': seed,
            'config_digest': config_digest,
            'parents': [],
            'alpha': None,
            'model': model.config.to_dict(),
            'vocab': list(model.tokenizer.vocab),
        }
        if method is not None:
            metadata['method'] = method
        return cls(model.state_dict(), metadata)

    @property
    def tensors(self) -> Mapping[str, torch.Tensor]:
        return self._tensors

    @property
    def metadata(self) -> CheckpointMetadata:
        return copy.deepcopy(self._metadata)

    @property
    def step(self) -> int:
        return self._metadata['step']

    @property
    def seed(self) -> int:
        return self._metadata['seed']

    @property
    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256()
            for name in sorted(self._tensors):
                h.update(name.encode('utf-8'))
                h.update(self._tensors[name].numpy().astype('<f4').tobytes())
            self._digest = h.hexdigest()
        return self._digest

    def to_model(self) -> DualEncoder:
        config = ModelConfig(**self._metadata['model'])
        tokenizer = Tokenizer(self._metadata['vocab'], max_length=config.max_length)
        model = DualEncoder(config, tokenizer)
        model.load_state_dict({k: v.clone() for k, v in self._tensors.items()})
        return model


def _encode(checkpoint: Checkpoint) -> bytes:
    meta = json.dumps(checkpoint._metadata, sort_keys=True, ensure_ascii=False).encode('utf-8')
    header = [MAGIC, struct.pack('<I', FORMAT_VERSION), struct.pack('<I', len(meta)), meta]
    header.append(struct.pack('<I', len(checkpoint.tensors)))
    payload: list[bytes] = []
    offset = 0
    for name in sorted(checkpoint.tensors):
        data = checkpoint.tensors[name].numpy().astype('<f4').tobytes()
        encoded = name.encode('utf-8')
        shape = checkpoint.tensors[name].shape
        header.append(struct.pack('<H', len(encoded)) + encoded)
        header.append(struct.pack('<BB', 0, len(shape)) + struct.pack(f'<{len(shape)}I', *shape))
        header.append(struct.pack('<QQ', offset, len(data)))
        payload.append(data)
        offset += len(data)
    return b''.join(header) + b''.join(payload)


def save_checkpoint(checkpoint: Checkpoint, path: pathlib.Path) -> pathlib.Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    temp = path.with_name(f'{uuid.uuid4()}-{path.name}.tmp')
    with open(temp, 'wb') as fp:
        fp.write(_encode(checkpoint))

    # atomically move the file
    os.replace(temp, path)
    log.info('Saved checkpoint %s (step %d) to %s', checkpoint.digest[:12], checkpoint.step, path)
    return path


class _Reader:
    __slots__ = ('data', 'pos')

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptedCheckpointError('Checkpoint header is truncated.')
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: pathlib.Path) -> Checkpoint:
    reader = _Reader(path.read_bytes())
    if reader.take(4) != MAGIC:
        raise CorruptedCheckpointError(f'{path} is not a checkpoint file.')
    (version,) = reader.unpack('<I')
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version, FORMAT_VERSION)
    (meta_len,) = reader.unpack('<I')
    try:
        metadata: CheckpointMetadata = json.loads(reader.take(meta_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptedCheckpointError(f'Checkpoint metadata is unreadable: {e}') from None

    (count,) = reader.unpack('<I')
    directory: list[tuple[str, np.dtype, tuple[int, ...], int, int]] = []
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8', errors='strict')
        code, ndim = reader.unpack('<BB')
        if code not in _DTYPE_CODES:
            raise CorruptedCheckpointError(f'Unknown dtype code {code} for tensor {name!r}')
        shape = reader.unpack(f'<{ndim}I') if ndim else ()
        offset, nbytes = reader.unpack('<QQ')
        directory.append((name, _DTYPE_CODES[code], tuple(shape), offset, nbytes))

    payload = reader.data[reader.pos :]
    tensors: dict[str, torch.Tensor] = {}
    for name, dtype, shape, offset, nbytes in directory:
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected or offset + nbytes > len(payload):
            raise CorruptedCheckpointError(f'Payload for tensor {name!r} is truncated or malformed.')
        array = np.frombuffer(payload, dtype=dtype, count=expected // dtype.itemsize, offset=offset)
        tensors[name] = torch.from_numpy(array.reshape(shape).astype(np.float32))
    return Checkpoint(tensors, metadata)


def interpolate_weights(a: Checkpoint, b: Checkpoint, alpha: float) -> Checkpoint:
    """Weight-space ensemble ``alpha * a + (1 - alpha) * b`` over every tensor."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f'alpha must be within [0, 1], got {alpha}')
    if set(a.tensors) != set(b.tensors):
        missing = sorted(set(a.tensors) ^ set(b.tensors))
        raise ShapeMismatchError(f'Checkpoints differ in tensor names: {missing[:5]}')

    merged: dict[str, torch.Tensor] = {}
    for name, left in a.tensors.items():
        right = b.tensors[name]
        if left.shape != right.shape:
            raise ShapeMismatchError(f'Tensor {name!r} has shape {tuple(left.shape)} vs {tuple(right.shape)}')
        # the endpoints are returned untouched so that signed zeros survive
        if alpha == 1.0:
            merged[name] = left
        elif alpha == 0.0:
            merged[name] = right
        else:
            merged[name] = alpha * left + (1.0 - alpha) * right

    metadata = a.metadata
    metadata['parents'] = [a.digest, b.digest]
    metadata['alpha'] = float(alpha)
    metadata['step'] = max(a.step, b.step)
    return Checkpoint(merged, metadata)
