"""
多视角重建一致性（MRC）指标

流程：重建 → 同位姿重渲染 → 每个视角在原图上算正方形包围盒 → 原图与重渲染图用同一包围盒裁剪
→ 缩放到 resize_res → 计算距离 → 对视角取平均。
"""

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from config import Config
from errors import EmptyCatalog, ExperimentError, InvalidIntensities, NoForeground
from imgproc import (MetricKind, SquareBbox, compute_square_bbox, crop_and_resize,
                     foreground_mask, image_distance)
from reconstructor import ReconConfig, reconstruct, rerender
from sceneworld import (VoxelScene, canonical_rig, generate_scene, patch_distort, render_multiview,
                        rotation_distort)
from scheduler import run_tasks
from utils import write_csv

logger = logging.getLogger(__name__)

DISTORTED_VIEW = 3  # 只扰动第 4 个视角
ABLATION_AZIMUTH = 45.0  # 消融实验中第 4 个视角的方位偏移（度）
MSGD_MIN_RESIZE = 32


@dataclass(frozen=True)
class MrcConfig:
    resize_res: int = Config.RESIZE_RES
    metric: MetricKind = MetricKind.MSGD
    tau: float = Config.FOREGROUND_TAU
    bbox_norm: bool = True
    r_fail: float = Config.R_FAIL
    resolution: int = Config.SCENE_RESOLUTION  # 重建网格分辨率
    recon: ReconConfig = field(default_factory=ReconConfig)

    def __post_init__(self):
        if self.resize_res < 16:
            raise ValueError(f'resize_res 至少为 16: {self.resize_res}')
        if self.metric == MetricKind.MSGD and self.resize_res < MSGD_MIN_RESIZE:
            raise ValueError(f'MSGD 需要 resize_res >= {MSGD_MIN_RESIZE}: {self.resize_res}')


@dataclass(frozen=True)
class MrcResult:
    score: float
    per_view: tuple
    bboxes: tuple
    recon_diagnostics: object = None


class DistortionKind(enum.Enum):
    PATCH = 'patch'
    AZIMUTH = 'azimuth'
    ELEVATION = 'elevation'


@dataclass(frozen=True)
class DistortionCurve:
    distortion_kind: DistortionKind
    intensities: tuple
    scores: tuple
    prompt: int
    seed: int
    metric: MetricKind = MetricKind.MSGD


@dataclass(frozen=True)
class ComparisonReport:
    """每种距离类型在同一批扰动视角上的曲线与平滑度统计"""
    distortion_kind: DistortionKind
    intensities: tuple
    curves: dict  # MetricKind -> [DistortionCurve, ...]（按 prompt）
    mean_curves: dict  # MetricKind -> tuple
    smoothness: dict  # MetricKind -> float（平均曲线的平滑度）


def _full_frame_bbox(img):
    side = min(img.width, img.height)
    return SquareBbox(0, 0, side - 1, side - 1)


def score_views(views, rendered, cfg, diagnostics=None):
    """给定原始视角与重渲染视角，计算 MRC 分数"""
    per_view, bboxes = [], []
    for original, render in zip(views, rendered):
        if cfg.bbox_norm:
            bbox = compute_square_bbox(original, cfg.tau)
        else:
            if not foreground_mask(original, cfg.tau).any():
                raise NoForeground('图像中没有前景像素')
            bbox = _full_frame_bbox(original)
        a = crop_and_resize(original, bbox, cfg.resize_res)
        b = crop_and_resize(render, bbox, cfg.resize_res)
        per_view.append(image_distance(a, b, cfg.metric))
        bboxes.append(bbox)
    score = float(np.mean(per_view))
    return MrcResult(score=score, per_view=tuple(per_view), bboxes=tuple(bboxes),
                     recon_diagnostics=diagnostics)


def compute_mrc(views, poses, cfg=None):
    """计算四个视角的 MRC

    Args:
        views: 4 个 Image
        poses: 对应的 4 个 CameraPose
        cfg: MrcConfig

    Returns:
        MrcResult

    Raises:
        NoForeground: 某个视角没有前景
        DimensionMismatch: 视角尺寸不一致
    """
    cfg = cfg or MrcConfig()
    recon = reconstruct(views, poses, cfg.resolution, cfg.recon)
    rendered = rerender(recon.grid, poses, views[0].width)
    return score_views(views, rendered, cfg, recon.diagnostics)


def mrc_reward(views, poses, cfg=None):
    """奖励 r = -MRC；无法计算（如全白样本）时返回 r_fail，保证采样过程不中断"""
    cfg = cfg or MrcConfig()
    try:
        return -compute_mrc(views, poses, cfg).score
    except ExperimentError as e:
        logger.debug(f"MRC 计算失败，使用 r_fail={cfg.r_fail}: {e}")
        return cfg.r_fail


def mrc_or_none(views, poses, cfg=None):
    """计算 MRC 分数；无法计算的样本返回 None，由调用方单独计数"""
    try:
        return compute_mrc(views, poses, cfg).score
    except ExperimentError as e:
        logger.debug(f"MRC 计算失败: {e}")
        return None


def measure_floor(prompts, cfg=None, rig=None, workers=1):
    """一致视角（直接渲染）的 MRC 下限：返回 (均值, 标准差, 均值 + 3σ)"""
    cfg = cfg or MrcConfig()
    rig = rig or canonical_rig()

    def _score(prompt):
        views, _ = render_multiview(generate_scene(prompt, cfg.resolution), rig)
        return compute_mrc(views, rig.poses, cfg).score

    scores = np.array(run_tasks(_score, list(prompts), workers=workers))
    return float(scores.mean()), float(scores.std()), float(scores.mean() + 3.0 * scores.std())


# ── 受控扰动实验 ───────────────────────────────────────────────────────────

def _check_intensities(intensities):
    values = [float(v) for v in intensities]
    if not values:
        raise InvalidIntensities('扰动强度列表为空')
    if values[0] != 0.0:
        raise InvalidIntensities(f'扰动强度必须从 0 开始: {values}')
    if any(b <= a for a, b in zip(values, values[1:])):
        raise InvalidIntensities(f'扰动强度必须严格递增: {values}')
    return values


def distorted_view_sets(prompt, kind, intensities, seed, rig, resolution):
    """生成场景与 GT 视角，对第 4 个视角按每个强度施加扰动"""
    kind = DistortionKind(kind)
    scene = generate_scene(prompt, resolution)
    views, _ = render_multiview(scene, rig)
    sets = []
    for level in intensities:
        distorted = list(views)
        pose = rig.poses[DISTORTED_VIEW]
        if kind == DistortionKind.PATCH:
            distorted[DISTORTED_VIEW] = patch_distort(views[DISTORTED_VIEW], int(level), seed)
        elif kind == DistortionKind.AZIMUTH:
            distorted[DISTORTED_VIEW] = rotation_distort(scene, pose, level, 0.0, rig.view_res)
        else:
            distorted[DISTORTED_VIEW] = rotation_distort(scene, pose, 0.0, level, rig.view_res)
        sets.append(distorted)
    return sets


def distortion_experiment(prompt, kind, intensities, cfg=None, seed=0, rig=None):
    """单个 prompt 的扰动曲线：每个强度一个 MRC 值"""
    cfg = cfg or MrcConfig()
    rig = rig or canonical_rig()
    levels = _check_intensities(intensities)
    scores = []
    for views in distorted_view_sets(prompt, kind, levels, seed, rig, cfg.resolution):
        scores.append(compute_mrc(views, rig.poses, cfg).score)
    return DistortionCurve(DistortionKind(kind), tuple(levels), tuple(scores), prompt, seed, cfg.metric)


def smoothness(curve_scores):
    """平滑度统计：min-max 归一化后二阶差分绝对值的均值（越小越平滑）"""
    values = np.asarray(curve_scores, dtype=np.float64)
    if values.size < 3:
        return 0.0
    span = values.max() - values.min()
    normalized = (values - values.min()) / span if span > 0 else np.zeros_like(values)
    return float(np.mean(np.abs(np.diff(normalized, n=2))))


def metric_comparison_report(prompts, kind, intensities, seed=0, cfg=None, rig=None,
                             metrics=tuple(MetricKind), workers=1):
    """在同一批扰动视角上比较五种距离

    扰动与重建对每个 (prompt, 强度) 只做一次，只有距离阶段随类型变化。
    """
    if not prompts:
        raise EmptyCatalog('至少需要一个 prompt')
    cfg = cfg or MrcConfig()
    rig = rig or canonical_rig()
    kind = DistortionKind(kind)
    levels = _check_intensities(intensities)

    def _per_prompt(prompt):
        table = {m: [] for m in metrics}
        for views in distorted_view_sets(prompt, kind, levels, seed, rig, cfg.resolution):
            recon = reconstruct(views, rig.poses, cfg.resolution, cfg.recon)
            rendered = rerender(recon.grid, rig.poses, rig.view_res)
            for m in metrics:
                table[m].append(score_views(views, rendered, replace(cfg, metric=m)).score)
        return {m: DistortionCurve(kind, tuple(levels), tuple(s), prompt, seed, m)
                for m, s in table.items()}

    per_prompt = run_tasks(_per_prompt, list(prompts), workers=workers)
    curves = {m: [pp[m] for pp in per_prompt] for m in metrics}
    mean_curves = {m: tuple(np.mean([c.scores for c in curves[m]], axis=0).tolist()) for m in metrics}
    smooth = {m: smoothness(mean_curves[m]) for m in metrics}
    for m in metrics:
        logger.info(f"[{kind.value}] {m.value}: 平均曲线 {np.round(mean_curves[m], 4).tolist()}，"
                    f"平滑度 {smooth[m]:.4f}")
    return ComparisonReport(kind, tuple(levels), curves, mean_curves, smooth)


def ablation_view_sets(prompt, rig, resolution, scale=0.5, delta_az=ABLATION_AZIMUTH):
    """同一 prompt 的大/小两组视角，第 4 个视角都从偏转 delta_az 的方位渲染

    小物体按 scale 重新生成图元；大物体的密度乘以 scale，
    使两者沿视线的平均密度（即前景对比度）处在同一水平，只有相对尺寸不同。

    Returns:
        {'big': [4 个 Image], 'small': [4 个 Image]}
    """
    full = generate_scene(prompt, resolution)
    scenes = {
        'big': VoxelScene(full.density * scale),
        'small': generate_scene(prompt, resolution, scale=scale),
    }
    pose = rig.poses[DISTORTED_VIEW]
    out = {}
    for label, scene in scenes.items():
        views, _ = render_multiview(scene, rig)
        views[DISTORTED_VIEW] = rotation_distort(scene, pose, delta_az, 0.0, rig.view_res)
        out[label] = views
    return out


def bbox_ablation(prompts, cfg=None, rig=None, scale=0.5, delta_az=ABLATION_AZIMUTH, workers=1):
    """包围盒归一化消融：物体缩小后，归一化与不归一化 MRC 的变化

    大小物体使用同样的视角不一致（第 4 个视角偏转 delta_az），对比度一致。
    任一尺寸出现无前景视角的 prompt 跳过并记录警告。

    Returns:
        dict，键为 norm_big / norm_small / unnorm_big / unnorm_small 的平均 MRC，
        以及参与平均的 prompt 数 count

    Raises:
        EmptyCatalog: prompts 为空
        NoForeground: 所有 prompt 都被跳过
    """
    if not prompts:
        raise EmptyCatalog('至少需要一个 prompt')
    cfg = cfg or MrcConfig()
    rig = rig or canonical_rig()
    norm_cfg = replace(cfg, bbox_norm=True)
    unnorm_cfg = replace(cfg, bbox_norm=False)

    def _scores(prompt):
        out = {}
        for label, views in ablation_view_sets(prompt, rig, cfg.resolution, scale, delta_az).items():
            try:
                recon = reconstruct(views, rig.poses, cfg.resolution, cfg.recon)
                rendered = rerender(recon.grid, rig.poses, rig.view_res)
                out['norm_' + label] = score_views(views, rendered, norm_cfg).score
                out['unnorm_' + label] = score_views(views, rendered, unnorm_cfg).score
            except NoForeground:
                logger.warning(f"prompt {prompt} 的 {label} 视角组没有前景，跳过")
                return None
        return out

    rows = [r for r in run_tasks(_scores, list(prompts), workers=workers) if r is not None]
    if not rows:
        raise NoForeground('所有 prompt 都没有可用的前景')
    result = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}
    result['count'] = len(rows)
    logger.info(f"包围盒消融（{len(rows)} 个 prompt）: 归一化 {result['norm_big']:.4f} → {result['norm_small']:.4f}，"
                f"不归一化 {result['unnorm_big']:.4f} → {result['unnorm_small']:.4f}")
    return result


def write_curves_csv(path, report):
    """扰动曲线 CSV：kind,intensity,score（kind 为距离类型，score 为各 prompt 平均）"""
    rows = []
    for m, curve in report.mean_curves.items():
        for level, score in zip(report.intensities, curve):
            rows.append((m.value, float(level), float(score)))
    write_csv(path, ['kind', 'intensity', 'score'], rows)
