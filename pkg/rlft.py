"""
强化学习微调（RLFT）

奖励 r = -MRC，按 prompt 滑动窗口归一化为优势 A_r；KL 估计同样归一化为 A_KL；
每条轨迹的有效优势为 α·A_r - β·A_KL，使用 SF（纯 on-policy REINFORCE）或 IS（截断替代目标）估计梯度。
"""

import dataclasses
import enum
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from tqdm import tqdm

from config import Config
from diffusion import NoiseSchedule, logp_gradient, sample_trajectories
from errors import EmptyCatalog, MismatchedBatch, NonFiniteGradient
from imgproc import Image
from monitors import StageTimer
from mrc import MrcConfig, mrc_or_none, mrc_reward
from nncore import add, init_opt_state, opt_step, save_checkpoint
from sceneworld import canonical_rig, untile_views
from scheduler import run_tasks
from utils import append_jsonl, ensure_dir, keyed_rng, write_csv

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6
PROMPT_STREAM = 2 ** 31 - 1  # 抽取 prompt 的随机流编号，与样本下标不冲突
HOLDOUT_EPOCH = 2 ** 31 - 2  # 留出集使用的固定 epoch 键


class Estimator(enum.Enum):
    SF = 'sf'
    IS = 'is'


class KlSource(enum.Enum):
    TRAIN = 'train'
    HOLDOUT = 'holdout'


@dataclass(frozen=True)
class TrainerConfig:
    alpha: float = Config.ALPHA
    beta: float = Config.BETA
    batch_size: int = Config.BATCH_SIZE
    sample_minibatch: int = Config.SAMPLE_MINIBATCH
    train_minibatch: int = Config.TRAIN_MINIBATCH
    epochs_max: int = 40
    kl_stop_threshold: float = Config.KL_STOP_THRESHOLD
    estimator: Estimator = Estimator.SF
    is_clip_range: float = Config.IS_CLIP_RANGE
    is_inner_steps: int = Config.IS_INNER_STEPS
    tracker_window: int = Config.TRACKER_WINDOW
    min_count: Optional[int] = None  # None 表示 2 × 每个 prompt 的平均样本数
    advantage_clip: float = Config.ADVANTAGE_CLIP
    cfg_scale: float = Config.CFG_SCALE
    lr: float = Config.LR
    kl_source: KlSource = KlSource.TRAIN
    kl_holdout_prompts: tuple[int, ...] = ()
    holdout_samples: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f'batch_size 至少为 1: {self.batch_size}')
        for name in ('sample_minibatch', 'train_minibatch'):
            size = getattr(self, name)
            if size < 1 or self.batch_size % size:
                raise ValueError(f'batch_size {self.batch_size} 不能被 {name}={size} 整除')
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f'alpha/beta 不能为负: {self.alpha}, {self.beta}')
        if not 0 < self.is_clip_range < 1:
            raise ValueError(f'is_clip_range 必须在 (0,1) 内: {self.is_clip_range}')
        if self.is_inner_steps < 1 or self.tracker_window < 1:
            raise ValueError('is_inner_steps 与 tracker_window 至少为 1')
        if self.kl_source == KlSource.HOLDOUT and not self.kl_holdout_prompts:
            raise ValueError('kl_source=holdout 需要设置 kl_holdout_prompts')


@dataclass(frozen=True)
class RewardRecord:
    prompt: int
    reward: float
    advantage_reward: float
    kl: float
    advantage_kl: float


@dataclass
class EpochLog:
    epoch: int
    seed: int
    reward_mean: float
    reward_std: float
    reward_max: float
    reward_min: float
    kl_mean: float
    grad_norm: float
    loss: float
    per_prompt_reward: dict
    advantage_clip_fraction: float
    is_clip_fraction: float
    kl_holdout: Optional[float] = None
    aborted: bool = False
    wall_time: float = 0.0

    VOLATILE = ('wall_time',)

    def to_record(self, include_volatile=False):
        """JSON 记录；wall_time 每次运行不同，默认不写入确定性日志"""
        record = dataclasses.asdict(self)
        record['per_prompt_reward'] = {str(k): v for k, v in sorted(self.per_prompt_reward.items())}
        if not include_volatile:
            for key in self.VOLATILE:
                record.pop(key)
        return record

    @classmethod
    def from_record(cls, record):
        values = dict(record)
        values['per_prompt_reward'] = {int(k): v for k, v in values['per_prompt_reward'].items()}
        return cls(**values)


class PerPromptStats:
    """
    按 prompt 维护滑动窗口（容量 W），统计量每次都从窗口内容重新计算

    Args:
        window: 窗口容量 W
        min_count: 窗口样本数低于此值时回退到本批次全局统计
    """

    def __init__(self, window=Config.TRACKER_WINDOW, min_count=2):
        self.window = window
        self.min_count = min_count
        self.buffers = {}

    def push(self, prompt, values):
        buf = self.buffers.setdefault(int(prompt), deque(maxlen=self.window))
        buf.extend(float(v) for v in values)

    def count(self, prompt):
        return len(self.buffers.get(int(prompt), ()))

    def stats(self, prompt):
        """(均值, 带下限的总体标准差)"""
        values = np.array(self.buffers.get(int(prompt), ()), dtype=np.float64)
        if values.size == 0:
            return 0.0, 1.0
        return float(values.mean()), max(float(values.std()), STD_FLOOR)

    def copy(self):
        other = PerPromptStats(self.window, self.min_count)
        other.buffers = {k: deque(v, maxlen=self.window) for k, v in self.buffers.items()}
        return other


def _raw_advantages(values, prompts, stats):
    values = np.asarray(values, dtype=np.float64)
    prompts = np.asarray(prompts, dtype=np.int64)
    if values.shape != prompts.shape:
        raise MismatchedBatch(f'数值与 prompt 数量不一致: {values.shape} vs {prompts.shape}')
    # 按样本下标顺序、每个 prompt 一次入队
    order = list(dict.fromkeys(prompts.tolist()))
    for c in order:
        stats.push(c, values[prompts == c])
    global_mean = float(values.mean()) if values.size else 0.0
    global_std = max(float(values.std()), STD_FLOOR) if values.size else 1.0
    out = np.empty_like(values)
    for c in order:
        mask = prompts == c
        if stats.count(c) < stats.min_count:
            mean, std = global_mean, global_std
        else:
            mean, std = stats.stats(c)
        out[mask] = (values[mask] - mean) / std
    return out


def normalize_advantage(values, prompts, stats, clip=Config.ADVANTAGE_CLIP):
    """
    把数值推入各 prompt 的窗口后归一化为优势，并截断到 [-clip, clip]

    Args:
        values: 本批数值（奖励或 KL 估计）
        prompts: 每个数值对应的 prompt 编号
        stats: PerPromptStats（会被修改）

    Returns:
        优势数组
    """
    return np.clip(_raw_advantages(values, prompts, stats), -clip, clip)


def estimate_kl(traj):
    """KL 估计：各步 logp_θ - logp_base 的平均"""
    steps = traj.steps
    if not steps:
        return 0.0
    return float(np.mean([s.logp_current - s.logp_base for s in steps]))


# ── 策略梯度 ──────────────────────────────────────────────────────────────

def sf_step_weights(advantages):
    """SF：每步 logp 的权重就是轨迹优势"""
    return np.asarray(advantages, dtype=np.float64)


def is_step_weights(logp, logp_old, advantages, clip_range):
    """
    截断替代目标 min(ρ·A, clip(ρ)·A) 对 logp 的导数

    Returns:
        (权重, 目标项, 是否被截断的掩码)
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    ratio = np.exp(np.asarray(logp, dtype=np.float64) - np.asarray(logp_old, dtype=np.float64))
    clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range)
    unclipped_term = ratio * advantages
    clipped_term = clipped * advantages
    use_unclipped = unclipped_term <= clipped_term
    terms = np.where(use_unclipped, unclipped_term, clipped_term)
    weights = np.where(use_unclipped, ratio * advantages, 0.0)
    return weights, terms, ~use_unclipped


def _check_batch(trajs, advantages):
    if len(trajs) != len(advantages):
        raise MismatchedBatch(f'轨迹数 {len(trajs)} 与优势数 {len(advantages)} 不一致')
    if not trajs:
        raise MismatchedBatch('空批次')


def _accumulate(params, trajs, step_fn, schedule, cfg_scale, minibatch, workers):
    """
    按固定顺序（minibatch 下标、推理步）累积梯度

    step_fn(logp, indices, step) -> (权重, 目标项, 截断掩码)；梯度为 -(1/N)·Σ 权重·∇logp。
    """
    n = len(trajs)
    chunks = [list(range(lo, min(lo + minibatch, n))) for lo in range(0, n, minibatch)]

    def _chunk(indices):
        grads, objective, clipped, count = None, 0.0, 0, 0
        c = np.array([trajs[i].prompt for i in indices], dtype=np.int64)
        for step in range(schedule.steps):
            x = np.stack([trajs[i].steps[step].x_t for i in indices])
            a = np.stack([trajs[i].steps[step].action for i in indices])
            result = {}

            def _weights(logp):
                w, terms, mask = step_fn(logp, indices, step)
                result['terms'], result['mask'] = terms, mask
                return -np.asarray(w) / n

            g, _ = logp_gradient(params, x, a, step, c, schedule, cfg_scale, _weights)
            grads = g if grads is None else add(grads, g)
            objective += float(np.sum(result['terms']))
            clipped += int(np.sum(result['mask']))
            count += len(indices)
        return grads, objective, clipped, count

    parts = run_tasks(_chunk, chunks, workers=workers)
    grads = parts[0][0]
    for g, _, _, _ in parts[1:]:
        grads = add(grads, g)
    loss = -sum(p[1] for p in parts) / n
    clip_fraction = sum(p[2] for p in parts) / max(1, sum(p[3] for p in parts))
    return loss, grads, clip_fraction


def loss_sf(params, trajs, advantages, schedule, cfg_scale=Config.CFG_SCALE,
            minibatch=Config.TRAIN_MINIBATCH, workers=1):
    """
    SF 损失 -(1/N)·Σ Σ_t logp_θ·A 及其梯度；logp 在当前参数下对存储的动作重新计算

    Returns:
        (loss, grads)
    """
    _check_batch(trajs, advantages)
    adv = sf_step_weights(advantages)

    def _step(logp, indices, step):
        w = adv[indices]
        return w, logp * w, np.zeros(len(indices), dtype=bool)

    loss, grads, _ = _accumulate(params, trajs, _step, schedule, cfg_scale, minibatch, workers)
    return loss, grads


def loss_is(params, trajs, advantages, schedule, clip_range=Config.IS_CLIP_RANGE,
            cfg_scale=Config.CFG_SCALE, minibatch=Config.TRAIN_MINIBATCH, workers=1):
    """
    IS 截断替代损失及其梯度；θ_old 的 logp 取自采样时的记录

    Returns:
        (loss, grads, 被截断的比例)
    """
    _check_batch(trajs, advantages)
    adv = np.asarray(advantages, dtype=np.float64)

    def _step(logp, indices, step):
        old = np.array([trajs[i].steps[step].logp_current for i in indices])
        return is_step_weights(logp, old, adv[indices], clip_range)

    return _accumulate(params, trajs, _step, schedule, cfg_scale, minibatch, workers)


def effective_advantages(a_r, a_kl, alpha=Config.ALPHA, beta=Config.BETA):
    a_r = np.asarray(a_r, dtype=np.float64)
    a_kl = np.asarray(a_kl, dtype=np.float64)
    if a_r.shape != a_kl.shape:
        raise MismatchedBatch(f'A_r 与 A_KL 长度不一致: {a_r.shape} vs {a_kl.shape}')
    return alpha * a_r - beta * a_kl


def loss_combined(params, trajs, a_r, a_kl, schedule, alpha=Config.ALPHA, beta=Config.BETA,
                  estimator=Estimator.SF, clip_range=Config.IS_CLIP_RANGE, cfg_scale=Config.CFG_SCALE,
                  minibatch=Config.TRAIN_MINIBATCH, workers=1):
    """
    有效优势 α·A_r - β·A_KL 下的损失与梯度

    Returns:
        (loss, grads, IS 截断比例；SF 为 0)
    """
    adv = effective_advantages(a_r, a_kl, alpha, beta)
    if Estimator(estimator) == Estimator.SF:
        loss, grads = loss_sf(params, trajs, adv, schedule, cfg_scale, minibatch, workers)
        return loss, grads, 0.0
    return loss_is(params, trajs, adv, schedule, clip_range, cfg_scale, minibatch, workers)


# ── 训练循环 ──────────────────────────────────────────────────────────────

@dataclass
class TrainerState:
    """跨 epoch 的可变训练状态"""
    params: object
    opt_state: object
    reward_stats: PerPromptStats
    kl_stats: PerPromptStats
    logs: list = field(default_factory=list)
    stopped_epoch: Optional[int] = None
    last_records: list = field(default_factory=list)  # 最近一个 epoch 每个样本的 RewardRecord


def default_min_count(cfg, n_prompts):
    if cfg.min_count is not None:
        return cfg.min_count
    return max(2, math.ceil(2 * cfg.batch_size / max(1, n_prompts)))


def init_trainer(params, cfg, n_prompts):
    min_count = default_min_count(cfg, n_prompts)
    return TrainerState(params, init_opt_state(params, lr=cfg.lr),
                        PerPromptStats(cfg.tracker_window, min_count),
                        PerPromptStats(cfg.tracker_window, min_count))


def _tile_to_views(tile_vector, rig):
    side = 2 * rig.view_res
    return untile_views(Image(np.clip(tile_vector, 0.0, 1.0).reshape(side, side)))


def tile_reward(tile_vector, mrc_cfg, rig):
    """把生成的拼接图（截断到 [0,1]）拆成四个视角并计算奖励"""
    return mrc_reward(_tile_to_views(tile_vector, rig), rig.poses, mrc_cfg)


def tile_mrc(tile_vector, mrc_cfg, rig):
    """拼接图的 MRC 分数，失败样本为 None"""
    return mrc_or_none(_tile_to_views(tile_vector, rig), rig.poses, mrc_cfg)


def evaluate_rewards(trajs, mrc_cfg, rig, workers=1):
    return np.array(run_tasks(lambda tr: tile_reward(tr.x0, mrc_cfg, rig), trajs, workers=workers))


def draw_prompts(prompts, batch_size, seed, epoch):
    """均匀有放回抽取本 epoch 的 prompt"""
    rng = keyed_rng(seed, epoch, PROMPT_STREAM)
    prompts = list(prompts)
    return [prompts[i] for i in rng.integers(len(prompts), size=batch_size)]


def holdout_kl(params, base, cfg, schedule, workers=1):
    """固定留出 prompt 集（固定随机流）上的平均 KL"""
    holdouts = [c for c in cfg.kl_holdout_prompts for _ in range(cfg.holdout_samples)]
    trajs = sample_trajectories(params, base, holdouts, cfg.seed, schedule, cfg.cfg_scale,
                                epoch=HOLDOUT_EPOCH, minibatch=cfg.sample_minibatch, workers=workers)
    return float(np.mean([estimate_kl(tr) for tr in trajs]))


def rlft_epoch(state, base, prompts, cfg, epoch, schedule=None, mrc_cfg=None, rig=None, workers=1):
    """
    一个 RLFT epoch：采样 batch_size 条轨迹 → 奖励与 KL → 归一化优势 → 更新
    （SF 一次，IS 为 is_inner_steps 次）

    出现 NonFiniteGradient 时本 epoch 作废：参数、优化器状态与统计窗口保持不变。

    Args:
        state: TrainerState（成功时原地替换其中的参数、优化器状态与统计窗口）
        base: 冻结的 θ_base
        prompts: 训练 prompt 集
        cfg: TrainerConfig
        epoch: epoch 编号

    Returns:
        EpochLog
    """
    if not prompts:
        raise EmptyCatalog('训练 prompt 集为空')
    schedule = schedule or NoiseSchedule()
    mrc_cfg = mrc_cfg or MrcConfig()
    rig = rig or canonical_rig()

    drawn = draw_prompts(prompts, cfg.batch_size, cfg.seed, epoch)
    trajs = sample_trajectories(state.params, base, drawn, cfg.seed, schedule, cfg.cfg_scale,
                                epoch=epoch, minibatch=cfg.sample_minibatch, workers=workers)
    rewards = evaluate_rewards(trajs, mrc_cfg, rig, workers)
    kls = np.array([estimate_kl(tr) for tr in trajs])

    reward_stats = state.reward_stats.copy()
    kl_stats = state.kl_stats.copy()
    raw_r = _raw_advantages(rewards, drawn, reward_stats)
    raw_kl = _raw_advantages(kls, drawn, kl_stats)
    a_r = np.clip(raw_r, -cfg.advantage_clip, cfg.advantage_clip)
    a_kl = np.clip(raw_kl, -cfg.advantage_clip, cfg.advantage_clip)
    clip_fraction = float(np.mean(np.concatenate([np.abs(raw_r), np.abs(raw_kl)]) > cfg.advantage_clip))

    params, opt_state = state.params, state.opt_state
    inner = 1 if cfg.estimator == Estimator.SF else cfg.is_inner_steps
    aborted = False
    loss, grad_norm, is_clip = 0.0, 0.0, 0.0
    try:
        for _ in range(inner):
            loss, grads, is_clip = loss_combined(params, trajs, a_r, a_kl, schedule, cfg.alpha, cfg.beta,
                                                 cfg.estimator, cfg.is_clip_range, cfg.cfg_scale,
                                                 cfg.train_minibatch, workers)
            grad_norm = grads.global_norm()
            params, opt_state = opt_step(params, grads, opt_state)
    except NonFiniteGradient as e:
        logger.error(f"epoch {epoch} 梯度非有限，回滚本轮更新: {e}")
        aborted = True

    if not aborted:
        state.params, state.opt_state = params, opt_state
        state.reward_stats, state.kl_stats = reward_stats, kl_stats

    state.last_records = [RewardRecord(int(c), float(r), float(ar), float(k), float(ak))
                          for c, r, ar, k, ak in zip(drawn, rewards, a_r, kls, a_kl)]

    per_prompt = {}
    for c in sorted(set(drawn)):
        per_prompt[c] = float(np.mean(rewards[np.array(drawn) == c]))
    kl_holdout = holdout_kl(state.params, base, cfg, schedule, workers) if cfg.kl_holdout_prompts else None

    return EpochLog(
        epoch=epoch,
        seed=cfg.seed,
        reward_mean=float(rewards.mean()),
        reward_std=float(rewards.std()),
        reward_max=float(rewards.max()),
        reward_min=float(rewards.min()),
        kl_mean=float(kls.mean()),
        grad_norm=float(grad_norm),
        loss=float(loss),
        per_prompt_reward=per_prompt,
        advantage_clip_fraction=clip_fraction,
        is_clip_fraction=float(is_clip),
        kl_holdout=kl_holdout,
        aborted=aborted,
    )


def early_stop_check(logs, kl_stop_threshold, kl_source=KlSource.TRAIN):
    """最近一个 epoch 的平均 KL 达到阈值时返回 True"""
    if not logs:
        raise ValueError('至少需要一个 epoch 的日志')
    latest = logs[-1]
    kl = latest.kl_holdout if KlSource(kl_source) == KlSource.HOLDOUT else latest.kl_mean
    if kl is None:
        raise ValueError('最近一个 epoch 没有留出 KL')
    return kl >= kl_stop_threshold


def train(params, base, prompts, cfg, schedule=None, mrc_cfg=None, rig=None, workers=1,
          log_path=None, timing_path=None, checkpoint_dir=None, early_stop=True):
    """
    RLFT 训练循环：每个 epoch 写一条 JSON-lines 日志与一个检查点，KL 达到阈值时提前停止

    Returns:
        TrainerState（stopped_epoch 记录提前停止的 epoch）
    """
    state = init_trainer(params, cfg, len(prompts))
    if checkpoint_dir:
        ensure_dir(checkpoint_dir)
    for epoch in tqdm(range(cfg.epochs_max), desc='RLFT', disable=not Config.SHOW_PROGRESS, leave=False):
        with StageTimer(f'rlft/epoch-{epoch}', timing_path) as timer:
            log = rlft_epoch(state, base, prompts, cfg, epoch, schedule, mrc_cfg, rig, workers)
        log.wall_time = round(timer.elapsed, 3)
        state.logs.append(log)
        if log_path:
            append_jsonl(log_path, log.to_record())
        if checkpoint_dir:
            save_checkpoint(os.path.join(checkpoint_dir, f'rlft_epoch_{epoch:03d}.ckpt'), state.params)
        logger.info(f"epoch {epoch}: 奖励 {log.reward_mean:.4f} ± {log.reward_std:.4f}，KL {log.kl_mean:.2e}")

        if early_stop and early_stop_check(state.logs, cfg.kl_stop_threshold, cfg.kl_source):
            state.stopped_epoch = epoch
            logger.info(f"KL 达到阈值 {cfg.kl_stop_threshold}，在 epoch {epoch} 提前停止")
            break
    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, 'rlft_final.ckpt'), state.params)
    return state


# ── prompt 筛选与缩放实验 ─────────────────────────────────────────────────

def select_lowest(mean_rewards, k):
    """按平均奖励升序（相同时按编号）取前 k 个"""
    if not mean_rewards:
        raise EmptyCatalog('prompt 目录为空')
    if not 0 <= k <= len(mean_rewards):
        raise ValueError(f'k 必须在 [0, {len(mean_rewards)}] 内: {k}')
    ranked = sorted(mean_rewards.items(), key=lambda item: (item[1], item[0]))
    return [c for c, _ in ranked[:k]]


def prompt_rewards(params, catalog, samples_per_prompt, cfg, schedule=None, mrc_cfg=None, rig=None,
                   seed=0, workers=1):
    """当前模型在每个 prompt 上 samples_per_prompt 个样本的平均奖励"""
    schedule = schedule or NoiseSchedule()
    mrc_cfg = mrc_cfg or MrcConfig()
    rig = rig or canonical_rig()
    queries = [c for c in catalog for _ in range(samples_per_prompt)]
    trajs = sample_trajectories(params, params, queries, seed, schedule, cfg.cfg_scale,
                                minibatch=cfg.sample_minibatch, workers=workers)
    rewards = evaluate_rewards(trajs, mrc_cfg, rig, workers)
    queries = np.array(queries)
    return {int(c): float(np.mean(rewards[queries == c])) for c in catalog}, trajs


def curate_prompts(params, catalog, k, samples_per_prompt, cfg, schedule=None, mrc_cfg=None, rig=None,
                   seed=0, workers=1):
    """
    prompt 筛选：选出当前模型平均奖励最低的 k 个 prompt

    Returns:
        选中的 prompt 列表（按平均奖励升序）
    """
    if not catalog:
        raise EmptyCatalog('prompt 目录为空')
    if samples_per_prompt < 1:
        raise ValueError(f'samples_per_prompt 至少为 1: {samples_per_prompt}')
    if k > len(catalog):
        raise ValueError(f'k={k} 超过目录大小 {len(catalog)}')
    means, _ = prompt_rewards(params, catalog, samples_per_prompt, cfg, schedule, mrc_cfg, rig, seed, workers)
    selected = select_lowest(means, k)
    logger.info(f"prompt 筛选: 从 {len(catalog)} 个中选出 {k} 个，最低平均奖励 {means[selected[0]]:.4f}"
                if selected else "prompt 筛选: k=0")
    return selected


@dataclass(frozen=True)
class ScalingRow:
    batch: int
    data: int
    seed: int
    epoch: int
    reward: float
    kl: float


def scaling_run(params, base, grid, epochs, seeds, cfg, catalog, schedule=None, mrc_cfg=None, rig=None,
                workers=1):
    """
    缩放实验：每个 (batch_size, data_size) 格点、每个种子运行 epochs 个 epoch（不提前停止）

    data_size 取 catalog 的前 data_size 个 prompt。

    Returns:
        ScalingRow 列表，每行一个 (格点, 种子, epoch)
    """
    if not grid:
        raise ValueError('缩放实验格点为空')
    rows = []
    for batch, data in grid:
        if data > len(catalog):
            raise ValueError(f'data_size {data} 超过 prompt 目录大小 {len(catalog)}')
        prompts = list(catalog[:data])
        for seed in seeds:
            cell_cfg = dataclasses.replace(cfg, batch_size=batch, seed=seed,
                                           sample_minibatch=math.gcd(batch, cfg.sample_minibatch),
                                           train_minibatch=math.gcd(batch, cfg.train_minibatch))
            state = init_trainer(params, cell_cfg, len(prompts))
            for epoch in range(epochs):
                log = rlft_epoch(state, base, prompts, cell_cfg, epoch, schedule, mrc_cfg, rig, workers)
                rows.append(ScalingRow(batch, data, seed, epoch, log.reward_mean, log.kl_mean))
            logger.info(f"缩放实验 batch={batch} data={data} seed={seed}: 最终奖励 {rows[-1].reward:.4f}")
    return rows


def write_scaling_csv(path, rows):
    write_csv(path, ['batch', 'data', 'seed', 'epoch', 'reward', 'kl'],
              [(r.batch, r.data, r.seed, r.epoch, r.reward, r.kl) for r in rows])


def scaling_summary(rows):
    """
    汇总：每个格点的最终奖励（跨种子均值与标准差），以及每个 batch 下最优的 data_size

    Returns:
        (cells: {(batch, data): (均值, 标准差)}, best_data: {batch: data}, 最优 data_size 是否随 batch 不减)
    """
    last_epoch = {}
    for r in rows:
        key = (r.batch, r.data, r.seed)
        if key not in last_epoch or r.epoch > last_epoch[key].epoch:
            last_epoch[key] = r
    finals = {}
    for (batch, data, _), r in last_epoch.items():
        finals.setdefault((batch, data), []).append(r.reward)
    cells = {k: (float(np.mean(v)), float(np.std(v))) for k, v in sorted(finals.items())}
    best = {}
    for (batch, data), (mean, _) in cells.items():
        if batch not in best or mean > cells[(batch, best[batch])][0]:
            best[batch] = data
    batches = sorted(best)
    monotone = all(best[a] <= best[b] for a, b in zip(batches, batches[1:]))
    return cells, best, monotone
