"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import logging
import pathlib
from typing import TYPE_CHECKING, Any, NamedTuple, Sequence

import numpy as np

from harness import Stage
from stages.evaluate import EvalTable
from utils.errors import ConfigError
from utils.formats import write_csv, write_json


if TYPE_CHECKING:
    from harness import Harness

log = logging.getLogger(__name__)

SCATTER_COLUMNS = ('method', 'dataset', 'combined_ood', 'zeroshot_accuracy', 'accuracy', 'improvement')


class ScatterPoint(NamedTuple):
    method: str
    dataset: str
    combined_ood: float
    zeroshot_accuracy: float
    accuracy: float
    improvement: float


def fit_line(x: Sequence[float], y: Sequence[float]) -> tuple[float, float] | None:
    """Least-squares slope and intercept, or ``None`` when ``x`` has no spread."""
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.size < 2:
        return None
    dx = xs - xs.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        return None
    slope = float(dx @ (ys - ys.mean())) / sxx
    return slope, float(ys.mean() - slope * xs.mean())


class Report(Stage):
    """Improvement over the zero-shot baseline against the combined OOD score."""

    def scatter(self, table: EvalTable, *, baseline: str = 'zeroshot') -> list[ScatterPoint]:
        if baseline not in table.methods():
            raise ConfigError(f'No {baseline!r} rows to measure improvement against.')
        ood = {row.dataset: row.combined_ood for row in table.rows if row.combined_ood is not None}
        points = []
        for row in table.rows:
            if row.method == baseline:
                continue
            reference = table.accuracy_of(baseline, row.dataset)
            score = row.combined_ood if row.combined_ood is not None else ood.get(row.dataset)
            if reference is None or score is None:
                log.warning('Skipping %s on %s: no baseline accuracy or OOD score', row.method, row.dataset)
                continue
            points.append(ScatterPoint(row.method, row.dataset, score, reference, row.accuracy, row.accuracy - reference))
        return points

    def report(self, tables: Sequence[EvalTable], out: pathlib.Path, *, baseline: str = 'zeroshot') -> dict[str, Any]:
        if not tables:
            raise ConfigError('At least one evaluation table is required.')
        points = self.scatter(EvalTable.merge(*tables), baseline=baseline)
        write_csv(out / 'scatter.csv', SCATTER_COLUMNS, points)

        fits: dict[str, Any] = {}
        for method in dict.fromkeys(p.method for p in points):
            mine = [p for p in points if p.method == method]
            line = fit_line([p.combined_ood for p in mine], [p.improvement for p in mine])
            fits[method] = {
                'points': len(mine),
                'slope': None if line is None else line[0],
                'intercept': None if line is None else line[1],
                'mean_improvement': float(np.mean([p.improvement for p in mine])),
            }
        summary = {'baseline': baseline, 'fits': fits}
        write_json(out / 'fits.json', summary)
        log.info('Wrote a scatter of %d points over %d methods', len(points), len(fits))
        return summary


def setup(harness: Harness) -> None:
    harness.add_stage(Report(harness))
