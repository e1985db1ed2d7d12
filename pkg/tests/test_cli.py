from __future__ import annotations

import functools
import json
import pathlib

import pytest
from click.testing import CliRunner, Result

from launcher import main
from stages.finetune import Finetune
from utils.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from utils.errors import DivergenceError
from utils.model import DualEncoder


SMALL_RUN = """
n_classes = 4
n_domains = 5
images_per_cell = 2
image_size = 16
n_styles = 4
images_per_style = 1
hidden_width = 8
patch_size = 4
trunk_width = 16
trunk_depth = 1
heads = 2
text_width = 16
text_depth = 1
embed_dim = 8
max_length = 12
steps = 2
batch_size = 4
style_batch_size = 2
n_features = 32
epochs = 5
n_pretrain_domains = 5
n_anchor_classes = 2
target_classes = 2
val_every = 2
audit_every = 1
"""


@pytest.fixture
def config_file(tmp_path: pathlib.Path) -> pathlib.Path:
    path = tmp_path / 'small.cfg'
    path.write_text(SMALL_RUN)
    return path


def run(out: pathlib.Path, config: pathlib.Path, *args: str) -> Result:
    result = CliRunner().invoke(main, ['--config', str(config), '--out', str(out), *args])
    assert result.exit_code == 0, result.output
    return result


def tree(root: pathlib.Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob('*')) if p.is_file()}


def test_data_generation_is_reproducible(tmp_path: pathlib.Path, config_file: pathlib.Path) -> None:
    outputs = []
    for name in ('a', 'b'):
        out = tmp_path / name
        run(out, config_file, 'generate-data')
        run(out, config_file, 'generate-styles')
        run(out, config_file, 'split-data', '--manifest', str(out / 'benchmark' / 'manifest.json'))
        outputs.append({key: tree(out / key) for key in ('benchmark', 'styles', 'splits')})
    assert outputs[0] == outputs[1]
    assert len(outputs[0]['splits']) == 6 + 4


def test_unknown_config_key_fails(tmp_path: pathlib.Path) -> None:
    path = tmp_path / 'bad.cfg'
    path.write_text('learning_rate = 0.1\n')
    result = CliRunner().invoke(main, ['--config', str(path), '--out', str(tmp_path / 'run'), 'generate-data'])
    assert result.exit_code == 1
    assert 'Unknown config keys: learning_rate' in result.output


def test_full_pipeline(tmp_path: pathlib.Path, config_file: pathlib.Path) -> None:
    out = tmp_path / 'run'
    splits, ckpts, styles = out / 'splits', out / 'checkpoints', out / 'styles' / 'styles.json'
    zeroshot = str(ckpts / 'zeroshot.ckpt')
    cli = functools.partial(run, out, config_file)

    cli('generate-data')
    cli('generate-styles')
    cli('split-data', '--manifest', str(out / 'benchmark' / 'manifest.json'))
    cli('pretrain', '--manifest', str(splits / 'pretrain.json'), '--styles', str(styles))
    cli('finetune', '--checkpoint', zeroshot, '--source', str(splits / 'source.json'), '--styles', str(styles))
    cli('finetune', '--method', 'flyp', '--checkpoint', zeroshot, '--source', str(splits / 'source.json'))

    targets = [arg for path in sorted((splits / 'targets').glob('*.json')) for arg in ('--target', str(path))]
    cli('evaluate', '--checkpoint', zeroshot, '--method', 'zeroshot', *targets)
    cli(
        'score-ood',
        '--checkpoint',
        zeroshot,
        '--anchor',
        str(splits / 'anchor-val.json'),
        '--accuracy',
        str(out / 'eval-zeroshot.csv'),
        *targets,
    )
    for method in ('zeroshot', 'dca', 'flyp'):
        ckpt = str(ckpts / f'{method}.ckpt')
        cli('evaluate', '--checkpoint', ckpt, '--method', method, '--ood', str(out / 'ood.csv'), *targets)
    tables = [arg for method in ('zeroshot', 'dca', 'flyp') for arg in ('--table', str(out / f'eval-{method}.csv'))]
    cli('report', *tables)

    fits = json.loads((out / 'fits.json').read_text())
    assert fits['baseline'] == 'zeroshot'
    assert sorted(fits['fits']) == ['dca', 'flyp']
    assert all(fit['points'] == 4 for fit in fits['fits'].values())

    ood = json.loads((out / 'ood.json').read_text())
    assert set(ood['correlation']) == {'combined', 'image', 'text'}

    cli('wise-ft', '--zeroshot', zeroshot, '--finetuned', str(ckpts / 'dca.ckpt'), '--alpha', '0.5', *targets)
    assert (out / 'wise-ft.csv').read_text().splitlines()[1].startswith('wise-ft-0.5,')

    retain, forget = str(splits / 'retain.json'), str(splits / 'forget.json')
    cli('unlearn', '--checkpoint', zeroshot, '--retain', retain, '--forget', forget)
    audit = json.loads((out / 'unlearn.json').read_text())
    assert audit['forget_domain'] == 'noise'
    assert [entry['step'] for entry in audit['intervals']] == [1]

    domains = [arg for path in sorted((out / 'benchmark' / 'domains').glob('*.json')) for arg in ('--domain', str(path))]
    cli('pca', '--checkpoint', zeroshot, *domains)
    assert json.loads((out / 'pca' / 'pca.json').read_text())['domains'] == ['clean', 'hue', 'noise', 'pixel', 'stripes']

    runs = json.loads((out / 'run.json').read_text())
    assert {'pretrain', 'finetune-dca', 'finetune-flyp', 'unlearn', 'score-ood', 'report'} <= set(runs)


def test_divergence_saves_last_good(
    tmp_path: pathlib.Path, corpus_dir: pathlib.Path, model: DualEncoder, monkeypatch: pytest.MonkeyPatch
) -> None:
    start = Checkpoint.from_model(model, step=0, seed=0, config_digest='', method='pretrain')
    path = save_checkpoint(start, tmp_path / 'start.ckpt')

    def diverge(self: Finetune, start: Checkpoint, *args: object, **kwargs: object) -> Checkpoint:
        raise DivergenceError(3, start)

    monkeypatch.setattr(Finetune, 'finetune', diverge)
    out = tmp_path / 'run'
    args = ['--out', str(out), 'finetune', '--method', 'flyp', '--checkpoint', str(path)]
    result = CliRunner().invoke(main, [*args, '--source', str(corpus_dir / 'manifest.json')])
    assert result.exit_code == 1
    assert 'Diverged at step 3' in result.output
    assert load_checkpoint(out / 'checkpoints' / 'last-good.ckpt').digest == start.digest
