"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import logging
import pathlib
from typing import TYPE_CHECKING, Iterator, NamedTuple, Sequence

import torch

from harness import Stage
from utils.checkpoint import Checkpoint
from utils.corpus import DatasetManifest, ImageStore
from utils.errors import ManifestError
from utils.formats import TabularData, read_csv, write_csv
from utils.model import DualEncoder, class_prompts, zero_shot_classify


if TYPE_CHECKING:
    from harness import Harness
    from utils.ood import OODReport

log = logging.getLogger(__name__)


class EvalRow(NamedTuple):
    method: str
    dataset: str
    accuracy: float
    combined_ood: float | None = None


@dataclasses.dataclass(frozen=True)
class EvalTable:
    rows: tuple[EvalRow, ...] = ()

    COLUMNS = ('method', 'dataset', 'accuracy', 'combined_ood')

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[EvalRow]:
        return iter(self.rows)

    @classmethod
    def merge(cls, *tables: EvalTable) -> EvalTable:
        return cls(tuple(row for table in tables for row in table.rows))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(row.method for row in self.rows))

    def accuracy_of(self, method: str, dataset: str) -> float | None:
        for row in self.rows:
            if row.method == method and row.dataset == dataset:
                return row.accuracy
        return None

    def with_ood(self, reports: Sequence[OODReport]) -> EvalTable:
        """Fills ``combined_ood`` from reports with matching dataset names."""
        by_name = {r.dataset: r.combined for r in reports}
        return EvalTable(tuple(row._replace(combined_ood=by_name.get(row.dataset, row.combined_ood)) for row in self.rows))

    def render(self) -> str:
        table = TabularData()
        table.set_columns(self.COLUMNS)
        table.add_rows(
            (r.method, r.dataset, f'{r.accuracy:.4f}', '' if r.combined_ood is None else f'{r.combined_ood:.4f}')
            for r in self.rows
        )
        return table.render()

    def save(self, path: pathlib.Path) -> pathlib.Path:
        return write_csv(path, self.COLUMNS, self.rows)

    @classmethod
    def load(cls, path: pathlib.Path) -> EvalTable:
        rows = []
        for entry in read_csv(path):
            ood = entry.get('combined_ood') or ''
            rows.append(
                EvalRow(
                    method=entry['method'],
                    dataset=entry['dataset'],
                    accuracy=float(entry['accuracy']),
                    combined_ood=float(ood) if ood else None,
                )
            )
        return cls(tuple(rows))


class Evaluate(Stage):
    """Zero-shot top-1 accuracy of a checkpoint over a set of datasets."""

    chunk_size: int = 256

    def __init__(self, harness: Harness) -> None:
        super().__init__(harness)
        self._stores: dict[int, ImageStore] = {}

    def store(self, image_size: int) -> ImageStore:
        try:
            return self._stores[image_size]
        except KeyError:
            store = self._stores[image_size] = ImageStore(image_size)
            return store

    @torch.no_grad()
    def accuracy(self, model: DualEncoder, manifest: DatasetManifest) -> float:
        if not manifest.class_names:
            raise ManifestError(f'{manifest.name!r} has no class names to build prompts from.')
        if not manifest.samples:
            raise ManifestError(f'{manifest.name!r} has no samples to evaluate.')
        store = self.store(model.config.image_size)
        prompts = model.tokenizer.encode(class_prompts(manifest.class_names))
        correct = 0
        for start in range(0, len(manifest.samples), self.chunk_size):
            images, labels = store.samples(manifest.samples[start : start + self.chunk_size])
            predictions = zero_shot_classify(images, prompts, model).cpu()
            correct += int((predictions == labels).sum())
        return correct / len(manifest.samples)

    def evaluate(
        self,
        model: Checkpoint | DualEncoder,
        manifests: Sequence[DatasetManifest],
        *,
        method: str,
        ood: Sequence[OODReport] | None = None,
    ) -> EvalTable:
        if isinstance(model, Checkpoint):
            model = model.to_model()
        model.eval()
        rows = []
        for manifest in manifests:
            accuracy = self.accuracy(model, manifest)
            log.info('[%s] %s accuracy %.4f', method, manifest.name, accuracy)
            rows.append(EvalRow(method, manifest.name, accuracy))
        table = EvalTable(tuple(rows))
        return table.with_ood(ood) if ood else table


def setup(harness: Harness) -> None:
    harness.add_stage(Evaluate(harness))
