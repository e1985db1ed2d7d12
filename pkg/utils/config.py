"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import pathlib
import threading
import types
import typing
import uuid
from typing import Any, Generic, Mapping, TypeVar, overload

from .errors import ConfigError


_T = TypeVar('_T')
_D = TypeVar('_D')


class Config(Generic[_T]):
    """A small JSON key-value store that is rewritten atomically on every change."""

    def __init__(self, name: pathlib.Path) -> None:
        self.name = name
        self.lock = threading.Lock()
        self._db: dict[str, _T | Any] = {}
        self.load_from_file()

    def load_from_file(self) -> None:
        try:
            with open(self.name, 'r', encoding='utf-8') as f:
                self._db = json.load(f)
        except FileNotFoundError:
            self._db = {}

    def _dump(self) -> None:
        self.name.parent.mkdir(parents=True, exist_ok=True)
        temp = self.name.with_stem(f'{uuid.uuid4()}-{self.name.stem}').with_suffix('.tmp')
        with open(temp, 'w', encoding='utf-8', newline='\n') as tmp:
            json.dump(self._db.copy(), tmp, ensure_ascii=True, indent=2, sort_keys=True)
            tmp.write('\n')

        # atomically move the file
        os.replace(temp, self.name)

    def save(self) -> None:
        with self.lock:
            self._dump()

    @overload
    def get(self, key: Any) -> _T | Any | None: ...

    @overload
    def get(self, key: Any, default: Any) -> _T | Any: ...

    def get(self, key: Any, default: Any = None) -> _T | Any | None:
        return self._db.get(str(key), default)

    def put(self, key: Any, value: _T | Any) -> None:
        self._db[str(key)] = value
        self.save()

    def __contains__(self, item: Any) -> bool:
        return str(item) in self._db

    def __getitem__(self, item: Any) -> _T | Any:
        return self._db[str(item)]


def load_kv_config(path: pathlib.Path) -> dict[str, str]:
    """Parses a ``key = value`` file. Blank lines and ``#`` comments are ignored."""
    result: dict[str, str] = {}
    try:
        text = path.read_text('utf-8')
    except FileNotFoundError:
        raise ConfigError(f'Config file {path} does not exist.') from None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise ConfigError(f'{path}:{lineno}: expected "key = value", got {raw!r}')
        key = key.strip().replace('-', '_')
        if not key:
            raise ConfigError(f'{path}:{lineno}: empty key')
        result[key] = value.strip()
    return result


def _coerce(name: str, raw: str, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ('none', 'null', '') and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(name, raw, inner[0])
    if origin is tuple:
        parts = [p.strip() for p in raw.split(',') if p.strip()]
        return tuple(_coerce(name, p, args[0]) for p in parts)
    if isinstance(annotation, type) and hasattr(annotation, 'parse'):
        return annotation.parse(raw)  # type: ignore
    try:
        if annotation is bool:
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw, base=10)
        if annotation is float:
            return float(raw)
        if annotation is pathlib.Path:
            return pathlib.Path(raw)
    except ValueError:
        raise ConfigError(f'Invalid value {raw!r} for {name!r}') from None
    return raw


def apply_overrides(instance: _D, overrides: Mapping[str, str], *, strict: bool = True) -> _D:
    """Returns a copy of a config dataclass with string overrides coerced onto its fields."""
    hints = typing.get_type_hints(type(instance))
    known = {f.name for f in dataclasses.fields(instance)}  # type: ignore
    changes: dict[str, Any] = {}
    for key, raw in overrides.items():
        if key not in known:
            if strict:
                raise ConfigError(f'Unknown config key {key!r} for {type(instance).__name__}')
            continue
        changes[key] = _coerce(key, raw, hints[key])
    return dataclasses.replace(instance, **changes)  # type: ignore


def json_default(o: Any) -> Any:
    if isinstance(o, pathlib.Path):
        return o.as_posix()
    if dataclasses.is_dataclass(o) and not isinstance(o, type):
        return dataclasses.asdict(o)
    if hasattr(o, 'to_dict'):
        return o.to_dict()
    raise TypeError(f'Object of type {type(o).__name__} is not JSON serializable')


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), ensure_ascii=True, default=json_default)


def config_digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()
