"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

from typing import TYPE_CHECKING


if TYPE_CHECKING:
    from .checkpoint import Checkpoint


__all__ = (
    'BenchError',
    'ConfigError',
    'ShapeMismatchError',
    'NotNormalizedError',
    'DegenerateProjectionError',
    'EmptySequenceError',
    'CheckpointError',
    'CheckpointVersionError',
    'CorruptedCheckpointError',
    'ManifestError',
    'MissingImageError',
    'InconsistentHiddenStateError',
    'MissingHiddenStatesError',
    'UnfittedHeadError',
    'DomainTooSmallError',
    'DegenerateStatisticError',
    'DivergenceError',
)


class BenchError(RuntimeError):
    """Base for every error this repository raises on purpose."""


class ConfigError(BenchError):
    pass


class ShapeMismatchError(BenchError, ValueError):
    pass


class NotNormalizedError(BenchError, ValueError):
    pass


class DegenerateProjectionError(BenchError):
    pass


class EmptySequenceError(BenchError, ValueError):
    pass


class CheckpointError(BenchError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int) -> None:
        self.found = found
        self.expected = expected
        super().__init__(f'Checkpoint format version {found} is not supported (expected {expected}).')


class CorruptedCheckpointError(CheckpointError):
    pass


class ManifestError(BenchError):
    pass


class MissingImageError(ManifestError):
    pass


class InconsistentHiddenStateError(ManifestError):
    pass


class MissingHiddenStatesError(ManifestError):
    pass


class UnfittedHeadError(BenchError):
    pass


class DomainTooSmallError(BenchError):
    pass


class DegenerateStatisticError(BenchError):
    pass


class DivergenceError(BenchError):
    def __init__(self, step: int, last_good: Checkpoint | None) -> None:
        self.step = step
        self.last_good = last_good
        super().__init__(f'Loss became non-finite at step {step}.')
