#!/usr/bin/env python
"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""


from __future__ import annotations

import contextlib
import dataclasses
import functools
import logging
import pathlib
import sys
import traceback
from logging.handlers import RotatingFileHandler
from typing import Any, Callable, Generator, TypeVar

import click

from harness import Harness
from stages.corpus import SplitConfig
from stages.evaluate import EvalTable
from stages.finetune import METHODS, RunConfig
from stages.pretrain import PretrainConfig
from stages.unlearn import UnlearnConfig
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import load_kv_config
from utils.corpus import CorpusConfig, DatasetManifest, StyleBankConfig, load_style_manifest
from utils.errors import BenchError, DivergenceError
from utils.formats import plural
from utils.model import ModelConfig
from utils.sngp import SNGPConfig


F = TypeVar('F', bound=Callable[..., Any])

EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=pathlib.Path)


class RemoveNoise(logging.Filter):
    def __init__(self) -> None:
        super().__init__(name='PIL.PngImagePlugin')

    def filter(self, record: logging.LogRecord) -> bool:
        if record.levelname == 'DEBUG' and 'STREAM' in str(record.msg):
            return False
        return True


@contextlib.contextmanager
def setup_logging(out: pathlib.Path, *, verbose: bool = False) -> Generator[None, None, None]:
    log = logging.getLogger()
    installed: list[logging.Handler] = []
    try:
        # __enter__
        out.mkdir(parents=True, exist_ok=True)
        logging.getLogger('PIL').setLevel(logging.INFO)
        logging.getLogger('PIL.PngImagePlugin').addFilter(RemoveNoise())
        handler = RotatingFileHandler(
            filename=out / 'dcabench.log', encoding='utf-8', mode='w', maxBytes=32 * 1024 * 1024, backupCount=5
        )
        log.setLevel(logging.DEBUG if verbose else logging.INFO)
        dt_fmt = '%Y-%m-%d %H:%M:%S'
        fmt = logging.Formatter('[{asctime}] [{levelname:<7}] {name}: {message}', dt_fmt, style='{')
        handler.setFormatter(fmt)
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(fmt)
        installed.extend((handler, stream))
        for hdlr in installed:
            log.addHandler(hdlr)
        yield
    finally:
        # __exit__
        for hdlr in installed:
            hdlr.close()
            log.removeHandler(hdlr)


def reports_errors(func: F) -> F:
    """Turns a :class:`BenchError` into a red message and a non-zero exit."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except BenchError as e:
            traceback.print_exc()
            click.secho(f'{func.__name__.replace("_", "-")} failed: {e}', fg='red')
            sys.exit(1)

    return wrapper  # type: ignore


@contextlib.contextmanager
def keeps_last_good(harness: Harness) -> Generator[None, None, None]:
    """Saves the newest finite snapshot of a diverged run as ``checkpoints/last-good.ckpt``."""
    try:
        yield
    except DivergenceError as e:
        if e.last_good is not None:
            path = save_checkpoint(e.last_good, harness.out / 'checkpoints' / 'last-good.ckpt')
            click.secho(f'Diverged at step {e.step}, saved step {e.last_good.step} to {path}', fg='yellow')
        raise


def load_targets(paths: tuple[pathlib.Path, ...]) -> list[DatasetManifest]:
    return [DatasetManifest.load(p) for p in paths]


@click.group(options_metavar='[options]')
@click.option('--config', 'config_file', type=EXISTING_FILE, help='A key = value file of config overrides.')
@click.option('--seed', type=int, default=0, show_default=True, help='Seed for every random choice of the run.')
@click.option(
    '--out',
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    default='runs',
    show_default=True,
    help='Run directory.',
)
@click.option('--verbose', '-v', is_flag=True, help='Log at debug level.')
@click.pass_context
@reports_errors
def main(ctx: click.Context, config_file: pathlib.Path | None, seed: int, out: pathlib.Path, verbose: bool) -> None:
    """Desk-scale domain-aware CLIP finetuning benchmark."""
    overrides = load_kv_config(config_file) if config_file is not None else {}
    ctx.with_resource(setup_logging(out, verbose=verbose))
    ctx.obj = Harness(out, seed=seed, overrides=overrides)


@main.command('generate-data')
@click.pass_obj
@reports_errors
def generate_data(harness: Harness) -> None:
    """Renders the procedural multi-domain benchmark."""
    (config,) = harness.configure(CorpusConfig())
    harness.record_run('generate-data', config.to_dict())
    manifest = harness.corpus.generate_data(config, harness.out / 'benchmark')
    harness.log_memory('generate-data')
    click.secho(f'Generated {plural(len(manifest)):image} in {harness.out / "benchmark"}', fg='green')


@main.command('generate-styles')
@click.pass_obj
@reports_errors
def generate_styles(harness: Harness) -> None:
    """Renders the captioned style bank with its hidden states."""
    (config,) = harness.configure(StyleBankConfig())
    harness.record_run('generate-styles', config.to_dict())
    records = harness.corpus.generate_styles(config, harness.out / 'styles')
    harness.log_memory('generate-styles')
    click.secho(f'Generated {plural(len(records)):style} in {harness.out / "styles"}', fg='green')


@main.command('split-data')
@click.option('--manifest', type=EXISTING_FILE, required=True, help='The benchmark manifest.json.')
@click.pass_obj
@reports_errors
def split_data(harness: Harness, manifest: pathlib.Path) -> None:
    """Cuts the benchmark into pretraining, source, anchor, retain, forget and target sets."""
    (config,) = harness.configure(SplitConfig())
    harness.record_run('split-data', {'manifest': manifest, **config.to_dict()})
    splits = harness.corpus.split_data(DatasetManifest.load(manifest), config, harness.out / 'splits')
    click.secho(f'Wrote {plural(len(splits)):split} to {harness.out / "splits"}', fg='green')


@main.command()
@click.option('--manifest', type=EXISTING_FILE, required=True, help='Captioned pretraining manifest.')
@click.option('--styles', type=EXISTING_FILE, help='Style manifest whose captions join the vocabulary.')
@click.pass_obj
@reports_errors
def pretrain(harness: Harness, manifest: pathlib.Path, styles: pathlib.Path | None) -> None:
    """Contrastively pretrains the toy dual encoder."""
    model_config, config = harness.configure(ModelConfig(), PretrainConfig())
    digest = harness.record_run(
        'pretrain', {'manifest': manifest, 'styles': styles, 'model': model_config, 'pretrain': config}
    )
    extra = []
    if styles is not None:
        extra = [r.description for r in load_style_manifest(styles, allow_missing_hidden=True)]
    with keeps_last_good(harness):
        checkpoint = harness.pretrain.pretrain_toy(
            DatasetManifest.load(manifest), model_config, config, config_digest=digest, extra_texts=extra
        )
    path = save_checkpoint(checkpoint, harness.out / 'checkpoints' / 'zeroshot.ckpt')
    harness.log_memory('pretrain')
    click.secho(f'Saved {path}', fg='green')


@main.command()
@click.option('--checkpoint', type=EXISTING_FILE, required=True, help='Checkpoint to start from.')
@click.option('--source', type=EXISTING_FILE, required=True, help='Source-domain training manifest.')
@click.option('--styles', type=EXISTING_FILE, help='Style manifest for the diffusion stream.')
@click.option('--captions', type=EXISTING_FILE, help='Captioned manifest mixed in with --with-captions.')
@click.option('--method', type=click.Choice(METHODS), help='Overrides the configured method.')
@click.option('--with-captions', is_flag=True, help='Adds a caption agreement term on the --captions set.')
@click.pass_obj
@reports_errors
def finetune(
    harness: Harness,
    checkpoint: pathlib.Path,
    source: pathlib.Path,
    styles: pathlib.Path | None,
    captions: pathlib.Path | None,
    method: str | None,
    with_captions: bool,
) -> None:
    """Finetunes a checkpoint with flyp, dann or domain-aware dca."""
    (config,) = harness.configure(RunConfig())
    if method is not None:
        config = dataclasses.replace(config, method=method)
    if with_captions:
        config = dataclasses.replace(config, with_captions=True)
    start = load_checkpoint(checkpoint)
    digest = harness.record_run(
        f'finetune-{config.method}',
        {'checkpoint': start.digest, 'source': source, 'styles': styles, 'captions': captions, 'run': config.to_dict()},
    )
    style_records = None
    if styles is not None:
        style_records = load_style_manifest(styles, allow_missing_hidden=config.loss_weights.c6 == 0.0)
    with keeps_last_good(harness):
        result = harness.finetune.finetune(
            start,
            config,
            DatasetManifest.load(source),
            styles=style_records,
            captions=DatasetManifest.load(captions) if captions is not None else None,
            config_digest=digest,
        )
    path = save_checkpoint(result, harness.out / 'checkpoints' / f'{config.method}.ckpt')
    harness.log_memory('finetune')
    click.secho(f'Saved {path}', fg='green')


@main.command('wise-ft')
@click.option('--zeroshot', type=EXISTING_FILE, required=True, help='The pretrained checkpoint.')
@click.option('--finetuned', type=EXISTING_FILE, required=True, help='The finetuned checkpoint.')
@click.option('--target', 'targets', type=EXISTING_FILE, multiple=True, required=True, help='Evaluation manifest.')
@click.option('--alpha', 'alphas', type=float, multiple=True, help='Mixing weight of the finetuned model.')
@click.option('--save', is_flag=True, help='Also writes every interpolated checkpoint.')
@click.pass_obj
@reports_errors
def wise_ft(
    harness: Harness,
    zeroshot: pathlib.Path,
    finetuned: pathlib.Path,
    targets: tuple[pathlib.Path, ...],
    alphas: tuple[float, ...],
    save: bool,
) -> None:
    """Evaluates weight-space interpolations between two checkpoints."""
    alphas = alphas or (0.0, 0.25, 0.5, 0.75, 1.0)
    a, b = load_checkpoint(zeroshot), load_checkpoint(finetuned)
    harness.record_run('wise-ft', {'zeroshot': a.digest, 'finetuned': b.digest, 'targets': targets, 'alphas': alphas})
    table, checkpoints = harness.finetune.wise_ft(a, b, load_targets(targets), alphas)
    table.save(harness.out / 'wise-ft.csv')
    if save:
        for alpha, checkpoint in zip(alphas, checkpoints):
            save_checkpoint(checkpoint, harness.out / 'checkpoints' / f'wise-ft-{alpha:g}.ckpt')
    click.echo(table.render())
    click.secho(f'Wrote {harness.out / "wise-ft.csv"}', fg='green')


@main.command()
@click.option('--checkpoint', type=EXISTING_FILE, required=True, help='Checkpoint to unlearn from.')
@click.option('--retain', type=EXISTING_FILE, required=True, help='Captioned manifest of the retained domains.')
@click.option('--forget', type=EXISTING_FILE, required=True, help='Manifest of the domain to forget.')
@click.option('--lambda', 'lam', type=float, help='Gradient reversal strength.')
@click.option('--steps', type=int, help='Number of unlearning steps.')
@click.option('--retain-only', is_flag=True, help='Drops the adversarial term (the control run).')
@click.pass_obj
@reports_errors
def unlearn(
    harness: Harness,
    checkpoint: pathlib.Path,
    retain: pathlib.Path,
    forget: pathlib.Path,
    lam: float | None,
    steps: int | None,
    retain_only: bool,
) -> None:
    """Suppresses one domain while retaining the others."""
    (config,) = harness.configure(UnlearnConfig())
    if lam is not None:
        config = dataclasses.replace(config, lam=lam)
    if steps is not None:
        config = dataclasses.replace(config, steps=steps)
    start = load_checkpoint(checkpoint)
    digest = harness.record_run(
        'unlearn',
        {'checkpoint': start.digest, 'retain': retain, 'forget': forget, 'retain_only': retain_only, **config.to_dict()},
    )
    with keeps_last_good(harness):
        result, audit = harness.unlearn.unlearn(
            start,
            config,
            DatasetManifest.load(retain),
            DatasetManifest.load(forget),
            config_digest=digest,
            retain_only=retain_only,
        )
    save_checkpoint(result, harness.out / 'checkpoints' / 'unlearned.ckpt')
    audit.save(harness.out / 'unlearn.json')
    harness.log_memory('unlearn')
    click.secho(
        f'Forget accuracy {audit.forget_before:.3f} -> {audit.forget_after:.3f}, '
        f'retain {audit.retain_before:.3f} -> {audit.retain_after:.3f}',
        fg='green',
    )


@main.command('score-ood')
@click.option('--checkpoint', type=EXISTING_FILE, required=True)
@click.option('--anchor', type=EXISTING_FILE, required=True, help='Held-out split of the finetuning data.')
@click.option('--target', 'targets', type=EXISTING_FILE, multiple=True, required=True, help='Target manifest.')
@click.option('--accuracy', type=EXISTING_FILE, help='An evaluate CSV to correlate the scores with.')
@click.option('--method', default='zeroshot', show_default=True, help='Which method of --accuracy to use.')
@click.pass_obj
@reports_errors
def score_ood(
    harness: Harness,
    checkpoint: pathlib.Path,
    anchor: pathlib.Path,
    targets: tuple[pathlib.Path, ...],
    accuracy: pathlib.Path | None,
    method: str,
) -> None:
    """Scores how far each target lies from the anchor data."""
    (config,) = harness.configure(SNGPConfig())
    ckpt = load_checkpoint(checkpoint)
    harness.record_run('score-ood', {'checkpoint': ckpt.digest, 'anchor': anchor, 'targets': targets, 'sngp': config})
    accuracies = None
    if accuracy is not None:
        table = EvalTable.load(accuracy)
        accuracies = {row.dataset: row.accuracy for row in table.rows if row.method == method}
    reports = harness.oodscore.score_ood(
        ckpt.to_model(), DatasetManifest.load(anchor), load_targets(targets), config, accuracies=accuracies
    )
    path = harness.out / 'ood.csv'
    harness.oodscore.write_scores(reports, path, checkpoint_digest=ckpt.digest, config=config)
    harness.log_memory('score-ood')
    click.secho(f'Wrote {path}', fg='green')


@main.command()
@click.option('--checkpoint', type=EXISTING_FILE, required=True)
@click.option('--domain', 'domains', type=EXISTING_FILE, multiple=True, required=True, help='Per-domain manifest.')
@click.pass_obj
@reports_errors
def pca(harness: Harness, checkpoint: pathlib.Path, domains: tuple[pathlib.Path, ...]) -> None:
    """Pairwise domain-shift matrix and its two-dimensional PCA."""
    (config,) = harness.configure(SNGPConfig())
    ckpt = load_checkpoint(checkpoint)
    harness.record_run('pca', {'checkpoint': ckpt.digest, 'domains': domains, 'sngp': config})
    manifests = load_targets(domains)
    matrix, result = harness.oodscore.pairwise(ckpt.to_model(), manifests, config)
    harness.oodscore.write_pca([m.name for m in manifests], matrix, result, harness.out / 'pca')
    harness.log_memory('pca')
    click.secho(f'Wrote the pairwise matrix and PCA to {harness.out / "pca"}', fg='green')


@main.command()
@click.option('--checkpoint', type=EXISTING_FILE, required=True)
@click.option('--method', required=True, help='Name of the evaluated model in the table.')
@click.option('--target', 'targets', type=EXISTING_FILE, multiple=True, required=True, help='Evaluation manifest.')
@click.option('--ood', type=EXISTING_FILE, help='A score-ood CSV to attach combined scores from.')
@click.pass_obj
@reports_errors
def evaluate(
    harness: Harness,
    checkpoint: pathlib.Path,
    method: str,
    targets: tuple[pathlib.Path, ...],
    ood: pathlib.Path | None,
) -> None:
    """Zero-shot accuracy of a checkpoint on each target."""
    ckpt = load_checkpoint(checkpoint)
    harness.record_run(f'evaluate-{method}', {'checkpoint': ckpt.digest, 'targets': targets, 'ood': ood})
    reports = harness.oodscore.read_scores(ood) if ood is not None else None
    table = harness.evaluate.evaluate(ckpt, load_targets(targets), method=method, ood=reports)
    path = table.save(harness.out / f'eval-{method}.csv')
    click.echo(table.render())
    click.secho(f'Wrote {path}', fg='green')


@main.command()
@click.option('--table', 'tables', type=EXISTING_FILE, multiple=True, required=True, help='An evaluate CSV.')
@click.option('--baseline', default='zeroshot', show_default=True, help='Method improvements are measured against.')
@click.pass_obj
@reports_errors
def report(harness: Harness, tables: tuple[pathlib.Path, ...], baseline: str) -> None:
    """Improvement over the baseline against the combined OOD score, with line fits per method."""
    harness.record_run('report', {'tables': tables, 'baseline': baseline})
    summary = harness.report.report([EvalTable.load(t) for t in tables], harness.out, baseline=baseline)
    click.secho(f'Fitted {plural(len(summary["fits"])):method} into {harness.out / "fits.json"}', fg='green')


if __name__ == '__main__':
    main()
