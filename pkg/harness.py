"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import importlib
import json
import logging
import pathlib
from typing import TYPE_CHECKING, Any, ClassVar, Mapping

import psutil

from utils._types.artifacts import RunRecord
from utils.config import Config, apply_overrides, canonical_json, config_digest
from utils.errors import ConfigError


if TYPE_CHECKING:
    from stages.corpus import Corpus
    from stages.evaluate import Evaluate
    from stages.finetune import Finetune
    from stages.oodscore import OODScore
    from stages.pretrain import Pretrain
    from stages.report import Report
    from stages.unlearn import Unlearn

log = logging.getLogger(__name__)


def config_section(config: type) -> str:
    """``SNGPConfig`` -> ``sngp``, ``StyleBankConfig`` -> ``stylebank``."""
    return config.__name__.removesuffix('Config').lower()


EXTENSIONS: tuple[str, ...] = (
    'stages.corpus',
    'stages.pretrain',
    'stages.finetune',
    'stages.unlearn',
    'stages.oodscore',
    'stages.evaluate',
    'stages.report',
)


class Stage:
    """A group of pipeline operations sharing one harness.

    ``configs`` lists the config dataclasses the stage's operations accept;
    their field names make up the keys a ``--config`` file may use.
    """

    configs: ClassVar[tuple[type, ...]] = ()

    def __init__(self, harness: Harness) -> None:
        self.harness = harness

    def __repr__(self) -> str:
        return f'<{self.qualified_name} out={self.harness.out}>'

    @property
    def qualified_name(self) -> str:
        return type(self).__name__


class Harness:
    """Owns a run directory: its stages, its effective configuration and ``run.json``."""

    def __init__(self, out: pathlib.Path, *, seed: int = 0, overrides: Mapping[str, str] | None = None) -> None:
        self.out = out
        self.seed = seed
        self.overrides: dict[str, str] = dict(overrides or {})
        self.process = psutil.Process()
        self.stages: dict[str, Stage] = {}
        out.mkdir(parents=True, exist_ok=True)
        self.runs: Config[RunRecord] = Config(out / 'run.json')
        for extension in EXTENSIONS:
            try:
                self.load_extension(extension)
            except Exception:
                log.exception('Failed to load stage %s', extension)

    def __repr__(self) -> str:
        return f'<Harness out={self.out} seed={self.seed} stages={len(self.stages)}>'

    def load_extension(self, name: str) -> None:
        module = importlib.import_module(name)
        setup = getattr(module, 'setup', None)
        if setup is None:
            raise ConfigError(f'Stage module {name} has no setup function.')
        setup(self)

    def add_stage(self, stage: Stage) -> None:
        self.stages[stage.qualified_name] = stage

    def get_stage(self, name: str) -> Stage:
        try:
            return self.stages[name]
        except KeyError:
            raise ConfigError(f'Stage {name} is not loaded.') from None

    @property
    def corpus(self) -> Corpus:
        return self.get_stage('Corpus')  # type: ignore

    @property
    def pretrain(self) -> Pretrain:
        return self.get_stage('Pretrain')  # type: ignore

    @property
    def finetune(self) -> Finetune:
        return self.get_stage('Finetune')  # type: ignore

    @property
    def unlearn(self) -> Unlearn:
        return self.get_stage('Unlearn')  # type: ignore

    @property
    def oodscore(self) -> OODScore:
        return self.get_stage('OODScore')  # type: ignore

    @property
    def evaluate(self) -> Evaluate:
        return self.get_stage('Evaluate')  # type: ignore

    @property
    def report(self) -> Report:
        return self.get_stage('Report')  # type: ignore

    def known_keys(self) -> set[str]:
        keys: set[str] = set()
        for stage in self.stages.values():
            for config in stage.configs:
                for field in dataclasses.fields(config):
                    keys.add(field.name)
                    keys.add(f'{config_section(config)}.{field.name}')
        return keys

    def configure(self, *defaults: Any) -> list[Any]:
        """Applies the ``--config`` overrides onto config dataclasses.

        A plain key feeds every dataclass with a field of that name; a key
        prefixed with a section (``sngp.lr``) feeds only that dataclass and wins
        over the plain one. Keys no loaded stage knows about are an error. A
        ``seed`` field follows ``--seed`` unless the file sets it.
        """
        unknown = sorted(set(self.overrides) - self.known_keys())
        if unknown:
            raise ConfigError(f'Unknown config keys: {", ".join(unknown)}')

        result = []
        for default in defaults:
            section = config_section(type(default))
            fields = {f.name for f in dataclasses.fields(default)}
            mine = {k: v for k, v in self.overrides.items() if k in fields}
            for key, value in self.overrides.items():
                prefix, _, name = key.partition('.')
                if prefix == section and name in fields:
                    mine[name] = value
            if 'seed' in fields and 'seed' not in mine:
                default = dataclasses.replace(default, seed=self.seed)
            result.append(apply_overrides(default, mine))
        return result

    def record_run(self, command: str, config: dict[str, Any]) -> str:
        """Stores the seed and the digest of the effective configuration for ``command``."""
        digest = config_digest({'command': command, 'seed': self.seed, 'config': config})
        record: RunRecord = {
            'command': command,
            'seed': self.seed,
            'config_digest': digest,
            'config': config,
        }
        self.runs.put(command, json.loads(canonical_json(record)))
        log.info('Recorded %s run with config digest %s', command, digest[:12])
        return digest

    def log_memory(self, stage: str) -> None:
        rss = self.process.memory_info().rss / 1024**2
        log.info('%s finished, resident memory %.1f MiB', stage, rss)
