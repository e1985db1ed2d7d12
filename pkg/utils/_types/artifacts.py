"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

from typing import Any, TypedDict

from typing_extensions import NotRequired


__all__ = (
    'CheckpointMetadata',
    'SamplePayload',
    'DatasetManifestPayload',
    'StylePayload',
    'StyleManifestPayload',
    'RunRecord',
    'UnlearnAuditPayload',
)


class CheckpointMetadata(TypedDict):
    format_version: int
    step: int
    seed: int
    config_digest: str
    parents: list[str]
    alpha: float | None
    model: dict[str, Any]
    vocab: list[str]
    method: NotRequired[str]


class SamplePayload(TypedDict):
    path: str
    class_index: int
    domain_index: int


class DatasetManifestPayload(TypedDict):
    name: str
    split: str
    class_names: list[str]
    domain_names: list[str]
    samples: list[SamplePayload]


class StylePayload(TypedDict):
    style_id: str
    description: str
    hidden_state_file: str | None
    images: list[str]


class StyleManifestPayload(TypedDict):
    hidden_state_width: int
    styles: list[StylePayload]


class RunRecord(TypedDict):
    command: str
    seed: int
    config_digest: str
    config: dict[str, Any]


class _DomainAccuracy(TypedDict):
    domain: str
    before: float
    after: float


class UnlearnAuditPayload(TypedDict):
    forget_domain: str
    forget_before: float
    forget_after: float
    forget_relative_drop: float
    retain_before: float
    retain_after: float
    retain_relative_drop: float
    domains: list[_DomainAccuracy]
    intervals: list[dict[str, Any]]
