"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import pathlib
import uuid
from typing import Any, Iterable, Sequence, SupportsAbs

from .config import json_default


class plural:
    def __init__(self, value: SupportsAbs[int]) -> None:
        self.value = value

    def __format__(self, __format_spec: str) -> str:
        v = self.value
        skip_value = __format_spec.endswith('!')
        if skip_value:
            __format_spec = __format_spec[:-1]
        singular, _, plural = __format_spec.partition('|')
        plural = plural or f'{singular}s'
        if skip_value:
            if abs(v) != 1:
                return plural
            return singular
        if abs(v) != 1:
            return f'{v} {plural}'
        return f'{v} {singular}'


class TabularData:
    def __init__(self) -> None:
        self._widths: list[int] = []
        self._columns: list[str] = []
        self._rows: list[list[str]] = []

    def set_columns(self, columns: Iterable[str]) -> None:
        self._columns = list(columns)
        self._widths = [len(c) + 2 for c in self._columns]

    def add_row(self, row: Iterable[Any]) -> None:
        rows = [format_cell(r) for r in row]
        self._rows.append(rows)
        for index, element in enumerate(rows):
            width = len(element) + 2
            if width > self._widths[index]:
                self._widths[index] = width

    def add_rows(self, rows: Iterable[Iterable[Any]]) -> None:
        for row in rows:
            self.add_row(row)

    def render(self) -> str:
        top = '┌' + '┬'.join('─' * w for w in self._widths) + '┐'
        bottom = '└' + '┴'.join('─' * w for w in self._widths) + '┘'
        sep = '├' + '┼'.join('─' * w for w in self._widths) + '┤'

        to_draw = [top]

        def get_entry(d: Sequence[str]) -> str:
            elem = '│'.join(f'{e:^{self._widths[i]}}' for i, e in enumerate(d))
            return f'│{elem}│'

        to_draw.append(get_entry(self._columns))
        to_draw.append(sep)

        for row in self._rows:
            to_draw.append(get_entry(row))

        to_draw.append(bottom)
        return '\n'.join(to_draw)


def format_cell(value: Any) -> str:
    """Stable text for a CSV or table cell. Floats use ``repr`` so they round-trip exactly."""
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        if math.isnan(value):
            return 'nan'
        return repr(value)
    return str(value)


def _atomic_write(path: pathlib.Path, text: str) -> pathlib.Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    temp = path.with_name(f'{uuid.uuid4()}-{path.name}.tmp')
    with open(temp, 'w', encoding='utf-8', newline='') as fp:
        fp.write(text)

    # atomically move the file
    os.replace(temp, path)
    return path


def write_csv(path: pathlib.Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> pathlib.Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f'Row has {len(row)} cells, expected {len(columns)}')
        writer.writerow([format_cell(v) for v in row])
    return _atomic_write(path, buffer.getvalue())


def read_csv(path: pathlib.Path) -> list[dict[str, str]]:
    with open(path, 'r', encoding='utf-8', newline='') as fp:
        return list(csv.DictReader(fp))


def write_json(path: pathlib.Path, payload: Any) -> pathlib.Path:
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False, default=json_default)
    return _atomic_write(path, text + '\n')
