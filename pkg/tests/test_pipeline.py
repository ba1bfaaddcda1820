import logging
import os

import numpy as np
import pytest

import cli
from config import load_config, parse_config_text
from errors import EmptyCatalog, MissingPrerequisite
from pipeline import (RunConfig, RunPaths, apply_seed, cmd_gen_data, cmd_pipeline, comparison_image,
                      sample_diversity)
from scheduler import run_tasks
from utils import read_jsonl

TINY_CONFIG = """
world.view_res = 16
world.catalog_size = 2
world.test_catalog_size = 1
mrc.resize_res = 32
schedule.t_train = 10
schedule.steps = 2
model.hidden = 8
model.embed_dim = 2
model.freq_count = 2
sft.steps = 2
sft.batch_size = 2
trainer.batch_size = 2
trainer.sample_minibatch = 2
trainer.train_minibatch = 2
trainer.epochs_max = 1
curate.k = 1
curate.samples_per_prompt = 1
eval.samples_per_prompt = 1
eval.sample_pngs = 1
"""


def _tiny_config(out_dir):
    return parse_config_text(TINY_CONFIG + f'out_dir = {out_dir}\n', RunConfig)


@pytest.fixture
def restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


def test_run_tasks_keeps_input_order():
    items = list(range(10))
    assert run_tasks(lambda x: x * x, items, workers=4) == [x * x for x in items]
    assert run_tasks(lambda x: x, [], workers=4) == []


def test_run_tasks_raises_lowest_index_error():
    def _fn(x):
        if x in (3, 7):
            raise ValueError(f'bad {x}')
        return x

    with pytest.raises(ValueError, match='bad 3'):
        run_tasks(_fn, range(10), workers=3)


def test_gen_data_writes_catalog(tmp_path):
    cfg = _tiny_config(tmp_path / 'run')
    data_dir = cmd_gen_data(cfg)
    files = sorted(os.listdir(data_dir))
    assert files == ['manifest.csv', 'tile_00000.raw', 'tile_00001.raw']
    assert load_config(RunPaths(cfg.out_dir).config, RunConfig) == cfg


def test_gen_data_is_byte_identical(tmp_path):
    dirs = [cmd_gen_data(_tiny_config(tmp_path / name)) for name in ('a', 'b')]
    for name in os.listdir(dirs[0]):
        with open(os.path.join(dirs[0], name), 'rb') as fa, open(os.path.join(dirs[1], name), 'rb') as fb:
            assert fa.read() == fb.read()


def test_gen_data_empty_catalog(tmp_path):
    cfg = parse_config_text(f'out_dir = {tmp_path}\nworld.catalog_size = 0\nworld.test_catalog_size = 0',
                            RunConfig)
    with pytest.raises(EmptyCatalog):
        cmd_gen_data(cfg)


def test_stage_without_prerequisite(tmp_path):
    with pytest.raises(MissingPrerequisite):
        cmd_pipeline(_tiny_config(tmp_path), 'sft')
    with pytest.raises(MissingPrerequisite):
        cmd_pipeline(_tiny_config(tmp_path), 'rlft')


def test_unknown_stage(tmp_path):
    with pytest.raises(ValueError):
        cmd_pipeline(_tiny_config(tmp_path), 'deploy')


def test_apply_seed_sets_both_seeds():
    cfg = apply_seed(RunConfig(), 5)
    assert cfg.seed == 5 and cfg.trainer.seed == 5


def test_sample_diversity():
    assert sample_diversity([np.zeros(4)]) == 0.0
    assert sample_diversity([np.zeros(4), np.ones(4)]) == 1.0
    assert sample_diversity([np.zeros(4), np.ones(4), np.full(4, 2.0)]) == pytest.approx(2.0 / 3.0)


def test_comparison_image_layout(tmp_path):
    cfg = _tiny_config(tmp_path)
    img = comparison_image(np.ones(32 * 32), cfg)
    assert img.data.shape == (32, 64)
    assert np.all(img.data == 1.0)


def test_stage_chain(tmp_path):
    cfg = _tiny_config(tmp_path / 'run')
    paths = RunPaths(cfg.out_dir)
    cmd_gen_data(cfg)

    sft = cmd_pipeline(cfg, 'sft')
    assert sft['steps'] == 2
    assert os.path.exists(paths.checkpoint('sft.ckpt'))
    assert len(read_jsonl(paths.timing)) >= 2

    curated = cmd_pipeline(cfg, 'curate')
    assert len(curated['selected']) == 1

    summary = cmd_pipeline(cfg, 'rlft')
    assert summary['epochs'] == 1
    assert summary['prompts'] == curated['selected']
    assert os.path.exists(paths.checkpoint('rlft_final.ckpt'))
    assert os.path.exists(os.path.join(paths.plots, 'rlft_reward.svg'))
    assert len(read_jsonl(paths.log('rlft_epochs.jsonl'))) == 1

    evaluation = cmd_pipeline(cfg, 'eval')
    assert set(evaluation) == {'base', 'rlft'}
    with open(paths.log('eval.csv'), encoding='utf-8') as f:
        lines = f.read().splitlines()
    assert lines[0] == 'checkpoint,prompt_id,mrc,failures,diversity'
    assert len(lines) == 3
    for line in lines[1:]:
        _, _, score, failures, _ = line.split(',')
        # 每个 prompt 一个样本：要么成功计入 MRC，要么记为失败，失败不会以 -r_fail 计入
        assert failures in ('0', '1')
        assert (score == 'nan') == (failures == '1')
        assert score == 'nan' or 0.0 <= float(score) < 1.0


def _write_conf(tmp_path, extra=''):
    conf = tmp_path / 'run.conf'
    conf.write_text(TINY_CONFIG + f'out_dir = {tmp_path / "run"}\n' + extra, encoding='utf-8')
    return str(conf)


def test_cli_config_error(tmp_path, restore_logging):
    assert cli.main(['--config', str(tmp_path / 'missing.conf')]) == cli.EXIT_CONFIG
    assert cli.main(['--config', _write_conf(tmp_path, 'bogus.key = 1\n')]) == cli.EXIT_CONFIG


def test_cli_missing_prerequisite(tmp_path, restore_logging):
    assert cli.main(['--config', _write_conf(tmp_path), '--stage', 'sft']) == cli.EXIT_PREREQUISITE


def test_cli_rejects_zero_workers(tmp_path, restore_logging):
    assert cli.main(['--config', _write_conf(tmp_path), '--workers', '0']) == cli.EXIT_CONFIG


def test_cli_gen_data_and_seed_override(tmp_path, restore_logging):
    conf = _write_conf(tmp_path)
    out = tmp_path / 'seeded'
    assert cli.main(['--config', conf, '--stage', 'gen-data', '--seed', '7', '--out', str(out)]) == cli.EXIT_OK
    saved = load_config(os.path.join(out, 'config.txt'), RunConfig)
    assert saved.seed == 7 and saved.trainer.seed == 7
    assert os.path.exists(os.path.join(out, 'logs', 'run.log'))


def test_cli_plot_needs_input(tmp_path, restore_logging):
    assert cli.main(['--config', _write_conf(tmp_path), '--stage', 'plot']) == cli.EXIT_CONFIG


def _snapshot(out_dir):
    """除耗时记录外，运行目录下所有产物的字节内容"""
    files = {}
    for sub in ('logs', 'checkpoints', 'plots', 'samples'):
        root = os.path.join(out_dir, sub)
        for name in sorted(os.listdir(root)):
            if name == 'timing.jsonl':
                continue
            with open(os.path.join(root, name), 'rb') as f:
                files[f'{sub}/{name}'] = f.read()
    return files


def test_stage_reruns_are_bit_identical(tmp_path):
    snapshots = []
    for label in ('a', 'b'):
        cfg = _tiny_config(tmp_path / label)
        cmd_gen_data(cfg)
        for stage in ('sft', 'curate', 'rlft', 'eval'):
            cmd_pipeline(cfg, stage)
        snapshots.append(_snapshot(cfg.out_dir))

    # 同一目录内重跑也不应改变任何产物
    cfg = _tiny_config(tmp_path / 'a')
    for stage in ('sft', 'rlft', 'eval'):
        cmd_pipeline(cfg, stage)
    snapshots.append(_snapshot(cfg.out_dir))

    assert 'plots/rlft_reward.svg' in snapshots[0]
    assert 'checkpoints/rlft_final.ckpt' in snapshots[0]
    assert 'logs/eval.csv' in snapshots[0]
    assert snapshots[0] == snapshots[1] == snapshots[2]


def test_cli_plot_is_bit_identical(tmp_path, restore_logging):
    conf = _write_conf(tmp_path)
    for stage in ('gen-data', 'sft', 'rlft'):
        assert cli.main(['--config', conf, '--stage', stage]) == cli.EXIT_OK
    epochs = os.path.join(tmp_path, 'run', 'logs', 'rlft_epochs.jsonl')
    svg_path = os.path.join(tmp_path, 'run', 'logs', 'rlft_epochs_kl.svg')
    outputs = []
    for _ in range(2):
        assert cli.main(['--config', conf, '--stage', 'plot', '--plot-input', epochs,
                         '--plot-kind', 'kl']) == cli.EXIT_OK
        with open(svg_path, 'rb') as f:
            outputs.append(f.read())
    assert outputs[0] == outputs[1]
