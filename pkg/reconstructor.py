"""
稀疏视角重建：由四个视角求解体素网格

网格参数化为 g = P·c。P 是顶点帽函数基：每轴 basis_intervals 个区间，节点覆盖 [-h, h]³；
basis_intervals = 0 时 P 为单位阵，直接求解体素网格。求解

min_c  Σ_views ‖render(P·c, pose) - view‖² + lambda_reg · (2h)² · ‖c‖²

对正规方程使用共轭梯度。h 从 0.5 开始，剪影半径不超过 h 的 5/8 时减半（最多 3 次），
小物体因此使用更细的节点格。足迹几乎全部落在某个视角背景中的未知量固定为 0（视觉外壳）。
求解完成后网格截断到 [0,1]。
"""

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from config import Config
from errors import DimensionMismatch, PoseDegeneracy
from imgproc import foreground_mask, silhouette_radius
from sceneworld import (SUPPORT_RADIUS, VoxelScene, hat_weights, projection_operator, prolong_nodes,
                        render_view, resample, resample_adjoint)

logger = logging.getLogger(__name__)

LEVEL_SHRINK = 0.625
MAX_BASIS_LEVEL = 3


@dataclass(frozen=True)
class ReconConfig:
    lambda_reg: float = Config.LAMBDA_REG
    max_iters: int = Config.CG_MAX_ITERS
    tol: float = Config.CG_TOL
    basis_intervals: int = Config.RECON_BASIS_INTERVALS
    hull_threshold: float = Config.HULL_THRESHOLD

    def __post_init__(self):
        if self.lambda_reg <= 0:
            raise ValueError(f'lambda_reg 必须为正: {self.lambda_reg}')
        if self.max_iters < 1:
            raise ValueError(f'max_iters 至少为 1: {self.max_iters}')
        if self.tol <= 0:
            raise ValueError(f'tol 必须为正: {self.tol}')
        if self.basis_intervals < 0:
            raise ValueError(f'basis_intervals 不能为负: {self.basis_intervals}')
        if self.hull_threshold <= 0:
            raise ValueError(f'hull_threshold 必须为正: {self.hull_threshold}')


@dataclass(frozen=True)
class ReconDiagnostics:
    """重建诊断信息；未收敛不是错误，只在这里标记"""
    iterations: int
    residual: float  # 正规方程相对残差
    converged: bool
    data_residual: float  # 未截断解的数据项 Σ‖A c - y‖²
    residual_history: tuple = field(default=())
    objective_history: tuple = field(default=())
    half_extent: float = SUPPORT_RADIUS
    active_unknowns: int = 0


@dataclass(frozen=True, eq=False)
class ReconResult:
    grid: VoxelScene
    diagnostics: ReconDiagnostics


def basis_half_extent(views, tau=Config.FOREGROUND_TAU):
    """按四个视角的剪影半径选择基的覆盖范围 h"""
    rho = max(silhouette_radius(v, tau) for v in views)
    h = SUPPORT_RADIUS
    for _ in range(MAX_BASIS_LEVEL):
        if rho > h * LEVEL_SHRINK:
            break
        h /= 2.0
    return h


@functools.lru_cache(maxsize=256)
def basis_projection(resolution, azimuth, elevation, intervals, half_extent):
    """单个位姿下基系数到投影图的稠密矩阵，形状 (resolution², (intervals+1)³)"""
    w = sparse.csr_matrix(hat_weights(resolution, intervals, half_extent))
    prolong = sparse.kron(sparse.kron(w, w), w).tocsc()
    out = (projection_operator(resolution, azimuth, elevation) @ prolong).toarray()
    out.flags.writeable = False
    return out


class StackedRenderOperator:
    """四个视角堆叠的线性渲染算子 A 及其转置

    未知量是基系数（basis_intervals = 0 时为体素）；先得到投影图，再面积重采样到视图分辨率。
    """

    def __init__(self, poses, resolution, view_res, basis_intervals=0, half_extent=SUPPORT_RADIUS):
        self.resolution = resolution
        self.view_res = view_res
        self.basis_intervals = basis_intervals
        self.half_extent = half_extent
        if basis_intervals:
            self.blocks = [basis_projection(resolution, p.azimuth, p.elevation, basis_intervals, half_extent)
                           for p in poses]
            self.n_unknowns = (basis_intervals + 1) ** 3
        else:
            self.blocks = [projection_operator(resolution, p.azimuth, p.elevation) for p in poses]
            self.n_unknowns = resolution ** 3
        self.n_pixels = len(self.blocks) * view_res * view_res

    def view_matvec(self, index, x):
        r = self.resolution
        return resample((self.blocks[index] @ x).reshape(r, r), self.view_res).ravel()

    def view_rmatvec(self, index, y):
        image = y.reshape(self.view_res, self.view_res)
        return self.blocks[index].T @ resample_adjoint(image, self.resolution).ravel()

    def matvec(self, x):
        return np.concatenate([self.view_matvec(i, x) for i in range(len(self.blocks))])

    def rmatvec(self, y):
        per_view = y.reshape(len(self.blocks), -1)
        out = np.zeros(self.n_unknowns)
        for i, v in enumerate(per_view):
            out += self.view_rmatvec(i, v)
        return out

    def normal_matvec(self, x, lambda_reg):
        out = lambda_reg * x
        for i in range(len(self.blocks)):
            out = out + self.view_rmatvec(i, self.view_matvec(i, x))
        return out

    def expand(self, x):
        """未知量展开为体素网格（未截断）"""
        r = self.resolution
        if not self.basis_intervals:
            return np.asarray(x).reshape((r,) * 3)
        m = self.basis_intervals + 1
        return prolong_nodes(np.asarray(x).reshape((m,) * 3),
                             hat_weights(r, self.basis_intervals, self.half_extent))

    def hull_mask(self, views, threshold, tau=Config.FOREGROUND_TAU):
        """视觉外壳：任一视角中足迹的背景占比 >= threshold 的未知量为 False"""
        mask = np.ones(self.n_unknowns, dtype=bool)
        if threshold >= 1.0:
            return mask
        ones = np.ones(self.view_res * self.view_res)
        for i, view in enumerate(views):
            background = (~foreground_mask(view, tau)).astype(np.float64).ravel()
            footprint = self.view_rmatvec(i, ones)
            covered = self.view_rmatvec(i, background)
            ratio = np.divide(covered, footprint, out=np.ones_like(footprint), where=footprint > 0)
            mask &= ratio < threshold
        return mask

    def as_linear_operator(self):
        return LinearOperator((self.n_pixels, self.n_unknowns), matvec=self.matvec,
                              rmatvec=self.rmatvec, dtype=np.float64)


def _check_inputs(views, poses):
    if len(views) != 4 or len(poses) != 4:
        raise DimensionMismatch(f'需要 4 个视角与 4 个位姿，实际 {len(views)} / {len(poses)}')
    shapes = {v.data.shape for v in views}
    if len(shapes) != 1:
        raise DimensionMismatch(f'视角分辨率不一致: {sorted(shapes)}')
    (shape,) = shapes
    if shape[0] != shape[1]:
        raise DimensionMismatch(f'视角必须是正方形: {shape}')
    if len(set(poses)) != len(poses):
        raise PoseDegeneracy('相机位姿存在重复')
    return shape[0]


def reconstruct(views, poses, resolution=Config.SCENE_RESOLUTION, cfg=None, track_history=False):
    """由四个视角重建体素网格

    Args:
        views: 4 个 Image
        poses: 4 个 CameraPose，两两不同
        resolution: 体素分辨率
        cfg: ReconConfig
        track_history: 是否记录每次迭代的残差与二次目标值（多一次算子乘法）

    Returns:
        ReconResult(grid, diagnostics)
    """
    cfg = cfg or ReconConfig()
    view_res = _check_inputs(views, poses)
    half_extent = basis_half_extent(views) if cfg.basis_intervals else SUPPORT_RADIUS
    op = StackedRenderOperator(poses, resolution, view_res, cfg.basis_intervals, half_extent)
    lambda_reg = cfg.lambda_reg * (2.0 * half_extent) ** 2
    active = op.hull_mask(views, cfg.hull_threshold)

    y = np.concatenate([(1.0 - v.data).ravel() for v in views])
    rhs = np.where(active, op.rmatvec(y), 0.0)
    rhs_norm = float(np.linalg.norm(rhs))

    def _normal(x):
        # 外壳外的未知量只保留单位映射，右端为 0，解中恒为 0
        return np.where(active, op.normal_matvec(np.where(active, x, 0.0), lambda_reg), x)

    normal = LinearOperator((op.n_unknowns, op.n_unknowns), matvec=_normal, dtype=np.float64)

    residuals, objectives = [], []
    iterations = 0

    def _callback(xk):
        nonlocal iterations
        iterations += 1
        if track_history:
            mx = normal.matvec(xk)
            residuals.append(float(np.linalg.norm(rhs - mx)))
            objectives.append(float(0.5 * xk @ mx - rhs @ xk))

    if rhs_norm == 0.0:
        solution, info = np.zeros(op.n_unknowns), 0
    else:
        solution, info = cg(normal, rhs, x0=np.zeros(op.n_unknowns), rtol=cfg.tol,
                            maxiter=cfg.max_iters, callback=_callback)

    final_residual = float(np.linalg.norm(rhs - normal.matvec(solution)))
    relative = final_residual / rhs_norm if rhs_norm > 0 else 0.0
    data_residual = float(np.sum((op.matvec(solution) - y) ** 2))
    converged = info == 0
    if not converged:
        logger.debug(f"重建未收敛: {iterations} 次迭代，相对残差 {relative:.3e}")

    diagnostics = ReconDiagnostics(
        iterations=iterations,
        residual=relative,
        converged=converged,
        data_residual=data_residual,
        residual_history=tuple(residuals),
        objective_history=tuple(objectives),
        half_extent=half_extent,
        active_unknowns=int(active.sum()),
    )
    grid = VoxelScene(np.clip(op.expand(solution), 0.0, 1.0))
    return ReconResult(grid, diagnostics)


def rerender(grid, poses, view_res=Config.VIEW_RES):
    """按同样的位姿重新渲染重建结果"""
    return [render_view(grid, pose, view_res) for pose in poses]


def view_residuals(views, rendered):
    """每个视角的均方误差"""
    return [float(np.mean((a.data - b.data) ** 2)) for a, b in zip(views, rendered)]
