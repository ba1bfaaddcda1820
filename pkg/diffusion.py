"""
噪声调度、前向加噪、DDIM 采样策略（逐步各向同性高斯）、无分类器引导与 SFT 训练

生成对象是 2x2 拼接的多视角图，展平为 D 维向量，像素取值空间为 [0,1]。
"""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from config import Config
from errors import DimensionMismatch, EmptyDataset, FormatError, NonPositiveSigma
from imgproc import Image
from nncore import backward_batch, forward_batch, init_opt_state, opt_step
from scheduler import run_tasks
from utils import ensure_dir, keyed_rng

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.csv'


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int = Config.T_TRAIN
    beta_start: float = Config.BETA_START
    beta_end: float = Config.BETA_END
    steps: int = Config.INFERENCE_STEPS
    eta: float = Config.ETA

    def __post_init__(self):
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(f'beta 范围不合法: {self.beta_start} .. {self.beta_end}')
        if self.t_train < 2 or not 1 <= self.steps <= self.t_train - 1:
            raise ValueError(f'推理步数必须在 [1, {self.t_train - 1}] 内: {self.steps}')
        if self.eta < 0:
            raise ValueError(f'eta 不能为负: {self.eta}')

        betas = np.linspace(self.beta_start, self.beta_end, self.t_train)
        alpha_bars = np.cumprod(1.0 - betas)
        # 均匀子序列，倒序；最后一步的前一时刻是 t=0
        timesteps = np.round(np.linspace(1, self.t_train - 1, self.steps)).astype(np.int64)[::-1]
        if len(np.unique(timesteps)) != self.steps:
            raise ValueError(f'推理时间步重复: {timesteps.tolist()}')
        prev = np.append(timesteps[1:], 0)
        ab_t = alpha_bars[timesteps]
        ab_prev = alpha_bars[prev]
        sigmas = self.eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)

        for name, value in (('betas', betas), ('alpha_bars', alpha_bars), ('timesteps', timesteps),
                            ('prev_timesteps', prev), ('sigmas', sigmas)):
            value.flags.writeable = False
            object.__setattr__(self, name, value)

    def alpha_bar(self, step):
        return float(self.alpha_bars[self.timesteps[step]])

    def alpha_bar_prev(self, step):
        return float(self.alpha_bars[self.prev_timesteps[step]])

    def sigma(self, step):
        return float(self.sigmas[step])

    def mean_coefficients(self, step):
        """μ = k1·x_t + k2·ε̂ 中的 (k1, k2)"""
        ab_t, ab_p, sigma = self.alpha_bar(step), self.alpha_bar_prev(step), self.sigma(step)
        k1 = np.sqrt(ab_p) / np.sqrt(ab_t)
        k2 = np.sqrt(max(0.0, 1.0 - ab_p - sigma * sigma)) - np.sqrt(ab_p) * np.sqrt(1.0 - ab_t) / np.sqrt(ab_t)
        return float(k1), float(k2)


@dataclass(frozen=True, eq=False)
class StepRecord:
    step: int
    t: int
    x_t: np.ndarray
    mean: np.ndarray
    sigma: float
    action: np.ndarray
    logp_current: float
    logp_base: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    prompt: int
    seed: int
    index: int
    x_T: np.ndarray
    steps: tuple = field(default=())

    @property
    def x0(self):
        """采样链上的最后一个动作（未截断）"""
        return self.steps[-1].action

    def clamped_x0(self):
        """只用于奖励计算的截断结果"""
        return np.clip(self.x0, 0.0, 1.0)

    @property
    def logp_current(self):
        return np.array([s.logp_current for s in self.steps])

    @property
    def logp_base(self):
        return np.array([s.logp_base for s in self.steps])


def noise_at(x0, alpha_bar, eps):
    """x_t = √ᾱ·x0 + √(1-ᾱ)·eps"""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionMismatch(f'x0 与 eps 形状不一致: {x0.shape} vs {eps.shape}')
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def q_sample(x0, t, eps, schedule):
    """前向加噪到训练时间步 t"""
    if not 0 <= t < schedule.t_train:
        raise ValueError(f'时间步超出训练范围: {t}')
    return noise_at(x0, float(schedule.alpha_bars[t]), eps)


def gaussian_log_prob(action, mean, sigma):
    """
    各向同性高斯对数密度 log N(action; mean, σ²I)，沿最后一维求和

    Raises:
        NonPositiveSigma: σ <= 0
        DimensionMismatch: 形状不一致
    """
    if not sigma > 0:
        raise NonPositiveSigma(f'sigma 必须为正: {sigma}')
    action = np.asarray(action, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if action.shape != mean.shape:
        raise DimensionMismatch(f'动作与均值形状不一致: {action.shape} vs {mean.shape}')
    dim = action.shape[-1]
    sq = np.sum((action - mean) ** 2, axis=-1)
    return -0.5 * dim * np.log(2.0 * np.pi * sigma * sigma) - sq / (2.0 * sigma * sigma)


def guided_eps(params, x_t, t, c, cfg_scale):
    """无分类器引导：(1-w)·ε̂_uncond + w·ε̂_cond；返回 (ε̂, cache)，cache 供反向传播使用"""
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    batch = x.shape[0]
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (batch,))
    null = np.full(batch, params.null_prompt, dtype=np.int64)
    eps, cache = forward_batch(params, np.concatenate([x, x]), t, np.concatenate([c, null]))
    eps_hat = cfg_scale * eps[:batch] + (1.0 - cfg_scale) * eps[batch:]
    return eps_hat, cache


def ddim_step_distribution(params, x_t, step, c, schedule, cfg_scale=Config.CFG_SCALE):
    """
    第 step 个推理步的策略分布 N(μ_t, σ_t²I)

    Args:
        params: DenoiserParams
        x_t: (D,) 或 (B, D)
        step: 推理步下标 0..S-1
        c: prompt 编号
        schedule: NoiseSchedule
        cfg_scale: 引导强度

    Returns:
        (μ_t, σ_t)
    """
    if not 0 <= step < schedule.steps:
        raise ValueError(f'推理步超出范围: {step}')
    if cfg_scale < 0:
        raise ValueError(f'cfg_scale 不能为负: {cfg_scale}')
    x = np.asarray(x_t, dtype=np.float64)
    t = int(schedule.timesteps[step])
    eps_hat, _ = guided_eps(params, x, t, c, cfg_scale)
    k1, k2 = schedule.mean_coefficients(step)
    mean = k1 * np.atleast_2d(x) + k2 * eps_hat
    return (mean[0] if x.ndim == 1 else mean), schedule.sigma(step)


def logp_gradient(params, x_t, actions, step, c, schedule, cfg_scale, weights):
    """
    Σ_i weights_i · ∇_θ log p_θ(action_i | x_t_i) 的精确梯度

    weights 可以是数组，也可以是函数 weights(logp)，用于权重依赖当前 logp 的情形（重要性采样比）。

    dlogp/dμ = (a-μ)/σ²，μ = k1·x_t + k2·ε̂，ε̂ 的条件/无条件分支分别乘 w 与 (1-w)。

    Returns:
        (梯度 DenoiserParams, 当前参数下的 logp 数组)
    """
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    t = int(schedule.timesteps[step])
    eps_hat, cache = guided_eps(params, x, t, c, cfg_scale)
    k1, k2 = schedule.mean_coefficients(step)
    sigma = schedule.sigma(step)
    mean = k1 * x + k2 * eps_hat
    logp = gaussian_log_prob(a, mean, sigma)
    if callable(weights):
        weights = weights(logp)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)

    g_eps = weights[:, None] * k2 * (a - mean) / (sigma * sigma)
    upstream = np.concatenate([cfg_scale * g_eps, (1.0 - cfg_scale) * g_eps])
    return backward_batch(params, cache, upstream), logp


def _rollout_chunk(params_current, params_base, prompts, seed, epoch, indices, schedule, cfg_scale):
    """对一组样本批量执行完整的 S 步采样；每个样本的随机流由 (seed, epoch, index) 决定"""
    rngs = [keyed_rng(seed, epoch, int(i)) for i in indices]
    dim = params_current.data_dim
    x = np.stack([rng.standard_normal(dim) for rng in rngs])
    x_T = x.copy()
    c = np.asarray(prompts, dtype=np.int64)
    records = [[] for _ in indices]
    same = params_base is params_current
    for step in range(schedule.steps):
        mean, sigma = ddim_step_distribution(params_current, x, step, c, schedule, cfg_scale)
        noise = np.stack([rng.standard_normal(dim) for rng in rngs])
        action = mean + sigma * noise
        logp_cur = gaussian_log_prob(action, mean, sigma)
        if same:
            logp_base = logp_cur
        else:
            base_mean, _ = ddim_step_distribution(params_base, x, step, c, schedule, cfg_scale)
            logp_base = gaussian_log_prob(action, base_mean, sigma)
        t = int(schedule.timesteps[step])
        for k in range(len(indices)):
            records[k].append(StepRecord(step, t, x[k], mean[k], sigma, action[k],
                                         float(logp_cur[k]), float(logp_base[k])))
        x = action
    return [Trajectory(int(c[k]), int(seed), int(indices[k]), x_T[k], tuple(records[k])) for k in range(len(indices))]


def sample_trajectory(params_current, params_base, c, seed, schedule, cfg_scale=Config.CFG_SCALE,
                      epoch=0, index=0):
    """
    采样一条完整轨迹，并在同样的动作上记录基座模型的 logp

    Args:
        params_current: 当前参数 θ
        params_base: 冻结的基座参数 θ_base
        c: prompt 编号
        seed: 全局种子

    Returns:
        Trajectory
    """
    if not schedule.eta > 0:
        raise NonPositiveSigma('确定性采样器（eta=0）没有策略密度')
    (traj,) = _rollout_chunk(params_current, params_base, [c], seed, epoch, [index], schedule, cfg_scale)
    return traj


def sample_trajectories(params_current, params_base, prompts, seed, schedule, cfg_scale=Config.CFG_SCALE,
                        epoch=0, minibatch=Config.SAMPLE_MINIBATCH, workers=1):
    """
    批量采样；按固定的 minibatch 划分执行，结果与线程数无关

    Returns:
        与 prompts 等长的 Trajectory 列表
    """
    if not schedule.eta > 0:
        raise NonPositiveSigma('确定性采样器（eta=0）没有策略密度')
    prompts = list(prompts)
    chunks = [list(range(lo, min(lo + minibatch, len(prompts)))) for lo in range(0, len(prompts), minibatch)]

    def _run(indices):
        return _rollout_chunk(params_current, params_base, [prompts[i] for i in indices], seed, epoch,
                              indices, schedule, cfg_scale)

    results = run_tasks(_run, chunks, workers=workers)
    return [traj for chunk in results for traj in chunk]


# ── SFT ───────────────────────────────────────────────────────────────────

def sft_train(params, dataset, steps, drop_prob=Config.SFT_DROP_PROB, seed=0, schedule=None,
              batch_size=Config.SFT_BATCH_SIZE, lr=Config.LR):
    """
    ε 预测监督训练

    Args:
        params: 初始参数
        dataset: [(tile 向量 (D,), prompt 编号), ...]
        steps: 训练步数
        drop_prob: 把条件替换为 null prompt 的概率（用于无分类器引导）
        seed: 随机种子
        schedule: NoiseSchedule

    Returns:
        (训练后的参数, 每步损失列表)
    """
    if not dataset:
        raise EmptyDataset('SFT 数据集为空')
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f'drop_prob 必须在 [0,1) 内: {drop_prob}')
    if steps <= 0:
        return params, []

    schedule = schedule or NoiseSchedule()
    tiles = np.stack([np.asarray(tile, dtype=np.float64) for tile, _ in dataset])
    labels = np.array([c for _, c in dataset], dtype=np.int64)
    if tiles.shape[1] != params.data_dim:
        raise DimensionMismatch(f'数据维度 {tiles.shape[1]} 与网络输出维度 {params.data_dim} 不一致')

    state = init_opt_state(params, lr=lr)
    losses = []
    for step in tqdm(range(steps), desc='SFT', disable=not Config.SHOW_PROGRESS, leave=False):
        rng = keyed_rng(seed, step)
        idx = rng.integers(len(dataset), size=batch_size)
        t = rng.integers(schedule.t_train, size=batch_size)
        eps = rng.standard_normal((batch_size, params.data_dim))
        c = np.where(rng.random(batch_size) < drop_prob, params.null_prompt, labels[idx])

        ab = schedule.alpha_bars[t][:, None]
        x_t = np.sqrt(ab) * tiles[idx] + np.sqrt(1.0 - ab) * eps
        eps_hat, cache = forward_batch(params, x_t, t, c)
        diff = eps_hat - eps
        losses.append(float(np.mean(diff * diff)))
        grads = backward_batch(params, cache, 2.0 * diff / diff.size)
        params, state = opt_step(params, grads, state)

        if (step + 1) % 500 == 0:
            logger.info(f"SFT 第 {step + 1}/{steps} 步，近 200 步平均损失 {np.mean(losses[-200:]):.5f}")
    return params, losses


# ── 数据集 ────────────────────────────────────────────────────────────────

def write_dataset(directory, tiles):
    """
    写 SFT 数据集：每个 tile 一个原始格式文件，外加 manifest.csv（prompt_id, tile_path）

    Args:
        directory: 输出目录
        tiles: [(prompt 编号, Image), ...]
    """
    ensure_dir(directory)
    rows = []
    for prompt, tile in tiles:
        name = f'tile_{prompt:05d}.raw'
        with open(os.path.join(directory, name), 'wb') as f:
            f.write(tile.to_raw())
        rows.append((prompt, name))
    with open(os.path.join(directory, MANIFEST_NAME), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['prompt_id', 'tile_path'])
        writer.writerows(rows)
    return directory


def load_dataset(directory):
    """读取 SFT 数据集，返回 [(tile 向量, prompt 编号), ...]"""
    manifest = os.path.join(directory, MANIFEST_NAME)
    with open(manifest, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ['prompt_id', 'tile_path']:
            raise FormatError(f'manifest 表头不符: {header}')
        entries = [(int(prompt), path) for prompt, path in reader]
    dataset = []
    for prompt, path in entries:
        with open(os.path.join(directory, path), 'rb') as f:
            tile = Image.from_raw(f.read())
        dataset.append((tile.data.ravel().copy(), prompt))
    if not dataset:
        raise EmptyDataset(f'数据集为空: {directory}')
    return dataset
