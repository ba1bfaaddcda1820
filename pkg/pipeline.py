"""
运行配置与实验流水线

阶段：gen-data（生成 SFT 数据）→ sft → curate → rlft → eval；另有 distort（指标验证）与 scale（缩放实验）。
每个运行目录的布局固定：config.txt、data/、logs/、checkpoints/、samples/、plots/。
"""

import dataclasses
import itertools
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from config import Config, dump_config
from diffusion import NoiseSchedule, load_dataset, sample_trajectories, sft_train, write_dataset
from errors import ExperimentError, EmptyCatalog, MissingPrerequisite
from imgproc import Image
from monitors import StageTimer
from mrc import (DistortionKind, MrcConfig, bbox_ablation, measure_floor, metric_comparison_report,
                 write_curves_csv)
from nncore import init_params, load_checkpoint, save_checkpoint
from plots import cmd_plot
from reconstructor import reconstruct, rerender
from rlft import (TrainerConfig, curate_prompts, scaling_run, scaling_summary, tile_mrc, train,
                  write_scaling_csv)
from sceneworld import (canonical_rig, generate_scene, prompt_catalog, render_multiview, tile_views,
                        untile_views)
from scheduler import run_tasks
from utils import ensure_dir, write_csv

logger = logging.getLogger(__name__)

STAGES = ('sft', 'rlft', 'eval', 'distort', 'scale', 'curate')
SFT_CKPT = 'sft.ckpt'
SFT_LONG_CKPT = 'sft_long.ckpt'
RLFT_CKPT = 'rlft_final.ckpt'


@dataclass(frozen=True)
class WorldConfig:
    resolution: int = Config.SCENE_RESOLUTION
    view_res: int = Config.VIEW_RES
    azimuths: tuple[float, ...] = Config.RIG_AZIMUTHS
    elevation: float = Config.RIG_ELEVATION
    catalog_size: int = Config.CATALOG_SIZE
    test_catalog_size: int = 16

    def __post_init__(self):
        if self.test_catalog_size > self.catalog_size:
            raise ValueError(f'测试集 {self.test_catalog_size} 大于 prompt 目录 {self.catalog_size}')

    @property
    def data_dim(self):
        return (2 * self.view_res) ** 2

    def rig(self):
        return canonical_rig(self.view_res, self.azimuths, self.elevation)


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = Config.HIDDEN
    embed_dim: int = Config.EMBED_DIM
    freq_count: int = Config.FREQ_COUNT


@dataclass(frozen=True)
class SftConfig:
    steps: int = Config.SFT_STEPS
    batch_size: int = Config.SFT_BATCH_SIZE
    drop_prob: float = Config.SFT_DROP_PROB
    lr: float = Config.LR
    extra_steps: int = 0  # >0 时额外保存继续训练的 sft_long 检查点


@dataclass(frozen=True)
class CurateConfig:
    k: int = 8
    samples_per_prompt: int = 4


@dataclass(frozen=True)
class EvalConfig:
    samples_per_prompt: int = 4
    sample_pngs: int = 4  # 每个检查点保存的对比图数量


@dataclass(frozen=True)
class DistortConfig:
    prompts: tuple[int, ...] = (0, 1, 2, 3)
    patch_sizes: tuple[float, ...] = (0.0, 4.0, 8.0, 12.0, 16.0)
    azimuth_steps: tuple[float, ...] = (0.0, 3.6, 7.2, 10.8)
    elevation_steps: tuple[float, ...] = (0.0, 4.0, 8.0, 12.0)
    floor_prompts: int = 16
    ablation_scale: float = 0.5
    ablation_azimuth: float = 45.0


@dataclass(frozen=True)
class ScaleConfig:
    batches: tuple[int, ...] = (64, 128)
    data_sizes: tuple[int, ...] = (5, 30)
    epochs: int = 10
    seeds: tuple[int, ...] = (0, 1)


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    mrc: MrcConfig = field(default_factory=MrcConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    curate: CurateConfig = field(default_factory=CurateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    distort: DistortConfig = field(default_factory=DistortConfig)
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    out_dir: str = 'runs/default'
    seed: int = 0

    def __post_init__(self):
        if self.mrc.resolution != self.world.resolution:
            raise ValueError(f'mrc.resolution ({self.mrc.resolution}) 必须等于 world.resolution '
                             f'({self.world.resolution})')


class RunPaths:
    """运行目录布局"""

    def __init__(self, out_dir):
        self.root = out_dir
        self.config = os.path.join(out_dir, 'config.txt')
        self.data = os.path.join(out_dir, 'data')
        self.logs = os.path.join(out_dir, 'logs')
        self.checkpoints = os.path.join(out_dir, 'checkpoints')
        self.samples = os.path.join(out_dir, 'samples')
        self.plots = os.path.join(out_dir, 'plots')
        self.timing = os.path.join(self.logs, 'timing.jsonl')

    def create(self):
        for path in (self.root, self.logs, self.checkpoints, self.samples, self.plots):
            ensure_dir(path)
        return self

    def log(self, name):
        return os.path.join(self.logs, name)

    def checkpoint(self, name):
        return os.path.join(self.checkpoints, name)


def _fresh(path):
    """阶段重跑时先删除本阶段自己的旧产物，保证逐位可复现"""
    if os.path.exists(path):
        os.remove(path)
    return path


def _require(path, what):
    if not os.path.exists(path):
        raise MissingPrerequisite(f'缺少{what}: {path}')
    return path


# ── 数据 ──────────────────────────────────────────────────────────────────

def cmd_gen_data(cfg):
    """
    生成 prompt 目录中每个场景的 2x2 多视角拼接图与 manifest

    Returns:
        数据集目录
    """
    world = cfg.world
    if world.catalog_size <= 0:
        raise EmptyCatalog('prompt 目录大小为 0')
    paths = RunPaths(cfg.out_dir).create()
    dump_config(cfg, paths.config)
    rig = world.rig()
    tiles = []
    with StageTimer('gen-data', paths.timing):
        for prompt in prompt_catalog(world.catalog_size):
            _, tile = render_multiview(generate_scene(prompt, world.resolution), rig)
            tiles.append((prompt, tile))
        write_dataset(paths.data, tiles)
    logger.info(f"已生成 {len(tiles)} 个多视角拼接图: {paths.data}")
    return paths.data


# ── 辅助 ──────────────────────────────────────────────────────────────────

def comparison_image(tile_vector, cfg):
    """生成图与重建后重渲染图左右并排，重建失败时右侧留白"""
    world = cfg.world
    rig = world.rig()
    side = 2 * world.view_res
    tile = Image(np.clip(tile_vector, 0.0, 1.0).reshape(side, side))
    try:
        recon = reconstruct(untile_views(tile), rig.poses, world.resolution, cfg.mrc.recon)
        rerendered = tile_views(rerender(recon.grid, rig.poses, world.view_res))
    except ExperimentError:
        rerendered = Image.white(side)
    return Image(np.concatenate([tile.data, rerendered.data], axis=1))


def sample_diversity(tiles):
    """同一 prompt 多个样本两两 L1 距离的均值；少于两个样本时为 0"""
    tiles = [np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) for t in tiles]
    pairs = list(itertools.combinations(range(len(tiles)), 2))
    if not pairs:
        return 0.0
    return float(np.mean([np.mean(np.abs(tiles[i] - tiles[j])) for i, j in pairs]))


def _save_samples(params, prompts, cfg, paths, label, workers):
    """用给定参数采样若干个 prompt，保存生成图与重渲染图的并排对比"""
    chosen = list(prompts)[:cfg.eval.sample_pngs]
    trajs = sample_trajectories(params, params, chosen, cfg.seed, cfg.schedule, cfg.trainer.cfg_scale,
                                minibatch=1, workers=workers)
    for i, tr in enumerate(trajs):
        png = os.path.join(paths.samples, f'{label}_{i:02d}_prompt{tr.prompt}.png')
        comparison_image(tr.x0, cfg).save_png(png)


def _load_params(paths, name=SFT_CKPT):
    return load_checkpoint(_require(paths.checkpoint(name), ' SFT 检查点（请先运行 sft 阶段）'))


def _training_prompts(cfg, paths):
    """优先使用 curate 阶段筛选出的 prompt，否则使用整个目录"""
    curated = paths.log('curated.csv')
    if os.path.exists(curated):
        with open(curated, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()[1:]
        return [int(line.split(',')[0]) for line in lines if line]
    return prompt_catalog(cfg.world.catalog_size)


# ── 阶段 ──────────────────────────────────────────────────────────────────

def stage_sft(cfg, paths, workers):
    dataset = load_dataset(_require(paths.data, 'SFT 数据集（请先运行 gen-data）'))
    params = init_params(cfg.world.data_dim, cfg.world.catalog_size, cfg.model.hidden,
                         cfg.model.embed_dim, cfg.model.freq_count, seed=cfg.seed)
    params, losses = sft_train(params, dataset, cfg.sft.steps, cfg.sft.drop_prob, cfg.seed,
                               cfg.schedule, cfg.sft.batch_size, cfg.sft.lr)
    save_checkpoint(paths.checkpoint(SFT_CKPT), params)
    rows = [(i, loss) for i, loss in enumerate(losses)]
    write_csv(paths.log('sft_loss.csv'), ['step', 'loss'], rows)

    result = {'steps': cfg.sft.steps, 'final_loss': float(np.mean(losses[-200:])) if losses else None}
    if cfg.sft.extra_steps > 0:
        longer, _ = sft_train(params, dataset, cfg.sft.extra_steps, cfg.sft.drop_prob, cfg.seed + 1,
                              cfg.schedule, cfg.sft.batch_size, cfg.sft.lr)
        save_checkpoint(paths.checkpoint(SFT_LONG_CKPT), longer)
        result['extra_steps'] = cfg.sft.extra_steps
    return result


def stage_curate(cfg, paths, workers):
    params = _load_params(paths)
    catalog = prompt_catalog(cfg.world.catalog_size)
    selected = curate_prompts(params, catalog, cfg.curate.k, cfg.curate.samples_per_prompt, cfg.trainer,
                              cfg.schedule, cfg.mrc, cfg.world.rig(), cfg.seed, workers)
    write_csv(paths.log('curated.csv'), ['prompt_id', 'rank'], [(c, i) for i, c in enumerate(selected)])
    return {'selected': selected}


def stage_rlft(cfg, paths, workers):
    params = _load_params(paths)
    base = params.freeze()
    prompts = _training_prompts(cfg, paths)
    log_path = _fresh(paths.log('rlft_epochs.jsonl'))
    state = train(params, base, prompts, cfg.trainer, cfg.schedule, cfg.mrc, cfg.world.rig(),
                  workers, log_path=log_path, timing_path=paths.timing,
                  checkpoint_dir=paths.checkpoints)
    summary = {
        'epochs': len(state.logs),
        'stopped_epoch': state.stopped_epoch,
        'final_reward': state.logs[-1].reward_mean if state.logs else None,
        'prompts': prompts,
    }
    with open(paths.log('rlft_summary.json'), 'w', encoding='utf-8') as f:
        json.dump(summary, f, sort_keys=True, ensure_ascii=False, indent=2)
    for kind in ('reward', 'kl'):
        cmd_plot(log_path, kind, os.path.join(paths.plots, f'rlft_{kind}.svg'))
    _save_samples(state.params, prompts, cfg, paths, 'rlft', workers)
    return summary


def stage_eval(cfg, paths, workers):
    """在测试 prompt 上评估各检查点：每个 prompt 成功样本的平均 MRC、失败样本数与样本多样性"""
    _require(paths.checkpoint(SFT_CKPT), ' SFT 检查点（请先运行 sft 阶段）')
    test_prompts = prompt_catalog(cfg.world.test_catalog_size)
    queries = [c for c in test_prompts for _ in range(cfg.eval.samples_per_prompt)]
    rig = cfg.world.rig()
    rows, summary = [], {}
    for label, name in (('base', SFT_CKPT), ('sft_long', SFT_LONG_CKPT), ('rlft', RLFT_CKPT)):
        path = paths.checkpoint(name)
        if not os.path.exists(path):
            continue
        params = load_checkpoint(path)
        trajs = sample_trajectories(params, params, queries, cfg.seed, cfg.schedule, cfg.trainer.cfg_scale,
                                    minibatch=cfg.trainer.sample_minibatch, workers=workers)
        scores = run_tasks(lambda tr: tile_mrc(tr.x0, cfg.mrc, rig), trajs, workers=workers)
        succeeded = []
        for c in test_prompts:
            mine = [(tr, s) for tr, s in zip(trajs, scores) if tr.prompt == c]
            ok = [s for _, s in mine if s is not None]
            tiles = [tr.clamped_x0() for tr, _ in mine]
            rows.append((label, c, float(np.mean(ok)) if ok else float('nan'), len(mine) - len(ok),
                         sample_diversity(tiles)))
            succeeded.extend(ok)
        failures = len(scores) - len(succeeded)
        summary[label] = float(np.mean(succeeded)) if succeeded else float('nan')
        for i, tr in enumerate(trajs[:cfg.eval.sample_pngs]):
            png = os.path.join(paths.samples, f'eval_{label}_{i:02d}_prompt{tr.prompt}.png')
            comparison_image(tr.x0, cfg).save_png(png)
        logger.info(f"[eval] {label}: 平均 MRC {summary[label]:.4f}（失败样本 {failures}/{len(scores)}）")
    write_csv(paths.log('eval.csv'), ['checkpoint', 'prompt_id', 'mrc', 'failures', 'diversity'], rows)
    return summary


def stage_distort(cfg, paths, workers):
    """三种扰动、五种距离的曲线，MRC 下限与包围盒消融"""
    rig = cfg.world.rig()
    dist = cfg.distort
    prompts = list(dist.prompts)
    smooth_rows = []
    for kind, levels in ((DistortionKind.PATCH, dist.patch_sizes),
                         (DistortionKind.AZIMUTH, dist.azimuth_steps),
                         (DistortionKind.ELEVATION, dist.elevation_steps)):
        report = metric_comparison_report(prompts, kind, levels, cfg.seed, cfg.mrc, rig, workers=workers)
        csv_path = paths.log(f'distort_{kind.value}.csv')
        write_curves_csv(csv_path, report)
        cmd_plot(csv_path, 'curve', os.path.join(paths.plots, f'distort_{kind.value}.svg'))
        smooth_rows.extend((kind.value, m.value, s) for m, s in report.smoothness.items())
    write_csv(paths.log('smoothness.csv'), ['distortion', 'metric', 'smoothness'], smooth_rows)

    floor_mean, floor_std, floor = measure_floor(prompt_catalog(dist.floor_prompts), cfg.mrc, rig, workers)
    ablation = bbox_ablation(prompts, cfg.mrc, rig, dist.ablation_scale, dist.ablation_azimuth, workers)
    result = {'floor_mean': floor_mean, 'floor_std': floor_std, 'floor': floor, 'bbox_ablation': ablation}
    with open(paths.log('mrc_floor.json'), 'w', encoding='utf-8') as f:
        json.dump(result, f, sort_keys=True, indent=2)
    return result


def stage_scale(cfg, paths, workers):
    params = _load_params(paths)
    base = params.freeze()
    grid = list(itertools.product(cfg.scale.batches, cfg.scale.data_sizes))
    catalog = _training_prompts(cfg, paths)
    if max(cfg.scale.data_sizes) > len(catalog):
        catalog = prompt_catalog(cfg.world.catalog_size)
    rows = scaling_run(params, base, grid, cfg.scale.epochs, cfg.scale.seeds, cfg.trainer, catalog,
                       cfg.schedule, cfg.mrc, cfg.world.rig(), workers)
    csv_path = paths.log('scaling.csv')
    write_scaling_csv(csv_path, rows)
    cmd_plot(csv_path, 'scaling', os.path.join(paths.plots, 'scaling.svg'))
    cells, best, monotone = scaling_summary(rows)
    logger.info(f"[scale] 各 batch 最优 data_size: {best}，随 batch 不减: {monotone}")
    return {'best_data': {str(k): v for k, v in best.items()}, 'best_data_monotone': monotone}


_STAGE_FUNCS = {
    'sft': stage_sft,
    'rlft': stage_rlft,
    'eval': stage_eval,
    'distort': stage_distort,
    'scale': stage_scale,
    'curate': stage_curate,
}


def cmd_pipeline(cfg, stage, workers=1):
    """
    执行一个阶段：先把配置写入运行目录，再运行阶段函数

    Returns:
        阶段结果 dict

    Raises:
        MissingPrerequisite: 前置产物不存在
    """
    if stage not in _STAGE_FUNCS:
        raise ValueError(f'未知阶段: {stage}，可选 {", ".join(STAGES)}')
    paths = RunPaths(cfg.out_dir).create()
    dump_config(cfg, paths.config)
    with StageTimer(stage, paths.timing):
        result = _STAGE_FUNCS[stage](cfg, paths, workers)
    return result


def apply_seed(cfg, seed):
    """--seed 同时覆盖运行种子与训练种子"""
    return dataclasses.replace(cfg, seed=seed, trainer=dataclasses.replace(cfg.trainer, seed=seed))
