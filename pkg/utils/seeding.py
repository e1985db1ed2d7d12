"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Generator

import numpy as np
import torch


__all__ = ('seeded', 'numpy_rng', 'torch_generator', 'stable_hash')


@contextlib.contextmanager
def seeded(seed: int) -> Generator[None, None, None]:
    """Runs the body under a fixed torch seed without touching the caller's RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def numpy_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def stable_hash(text: str) -> int:
    # python's hash() is salted per process
    return int.from_bytes(hashlib.sha256(text.encode('utf-8')).digest()[:4], 'little')
