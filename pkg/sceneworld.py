"""
玩具三维世界：程序化体素场景、正交多视角渲染、标准四视角相机组与受控扰动

渲染是关于密度的仿射映射：像素 = 1 - 沿视线的平均密度。
每个 (分辨率, 位姿) 对应一个稀疏投影算子 B，视图前景 = U·(B·density)·Uᵀ，
U 为面积重采样（视图分辨率是体素分辨率整数倍时即块复制）。重建模块直接使用同一组算子及其转置。
"""

import functools
import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from config import Config
from errors import DimensionMismatch, FormatError, GenerationExhausted, SizeTooLarge
from imgproc import Image, silhouette_radius
from utils import keyed_rng

logger = logging.getLogger(__name__)

SCENE_MAGIC = b'VOXS'
ANGLE_DECIMALS = 9
PRIMITIVE_KINDS = ('box', 'sphere', 'cylinder')
OCCUPANCY_RANGE = (0.06, 0.60)
MAX_GENERATION_ATTEMPTS = 256
SUPPORT_RADIUS = 0.5  # 归一化坐标下物体所在球的半径，保证任意旋转不被裁剪


@dataclass(frozen=True, eq=False)
class VoxelScene:
    """体素场景，density 形状为 (z, y, x)，取值 [0,1]"""
    density: np.ndarray

    def __post_init__(self):
        arr = np.array(self.density, dtype=np.float64)
        if arr.ndim == 1:
            res = round(arr.size ** (1.0 / 3.0))
            if res ** 3 != arr.size:
                raise DimensionMismatch(f'密度长度 {arr.size} 不是立方数')
            arr = arr.reshape(res, res, res)
        if arr.ndim != 3 or len(set(arr.shape)) != 1:
            raise DimensionMismatch(f'体素网格必须是立方体，实际形状: {arr.shape}')
        if arr.shape[0] < 4:
            raise DimensionMismatch(f'体素分辨率至少为 4: {arr.shape[0]}')
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError('体素密度必须在 [0,1] 内')
        arr.flags.writeable = False
        object.__setattr__(self, 'density', arr)

    @property
    def resolution(self):
        return self.density.shape[0]

    @classmethod
    def empty(cls, resolution):
        return cls(np.zeros((resolution,) * 3))

    def occupancy(self):
        return float(np.count_nonzero(self.density)) / self.density.size

    def equals(self, other):
        return np.array_equal(self.density, other.density)

    def to_bytes(self):
        """二进制格式：魔数 VOXS，uint32 小端分辨率，float64 小端密度（z 最慢）"""
        return SCENE_MAGIC + struct.pack('<I', self.resolution) + self.density.astype('<f8').tobytes()

    @classmethod
    def from_bytes(cls, payload):
        if payload[:4] != SCENE_MAGIC:
            raise FormatError('场景文件魔数不符')
        (res,) = struct.unpack('<I', payload[4:8])
        body = payload[8:]
        if len(body) != res ** 3 * 8:
            raise FormatError(f'场景数据长度不符: 期望 {res ** 3 * 8}，实际 {len(body)}')
        return cls(np.frombuffer(body, dtype='<f8').reshape(res, res, res))


@dataclass(frozen=True)
class CameraPose:
    """相机位姿（度）；构造时规范化：方位角 [0,360)，仰角截断到 [-90,90]"""
    azimuth: float
    elevation: float

    def __post_init__(self):
        az = round(float(self.azimuth) % 360.0, ANGLE_DECIMALS) % 360.0
        el = min(90.0, max(-90.0, round(float(self.elevation), ANGLE_DECIMALS)))
        object.__setattr__(self, 'azimuth', az + 0.0)
        object.__setattr__(self, 'elevation', el + 0.0)

    def rotated(self, delta_az, delta_el):
        return CameraPose(self.azimuth + delta_az, self.elevation + delta_el)


@dataclass(frozen=True)
class ViewRig:
    """四视角相机组，平铺顺序：左上、右上、左下、右下"""
    poses: tuple
    view_res: int = Config.VIEW_RES

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) != 4:
            raise ValueError(f'相机组必须恰好有 4 个位姿，实际 {len(poses)}')
        if self.view_res < 16 or self.view_res % 2:
            raise ValueError(f'视图分辨率必须为不小于 16 的偶数: {self.view_res}')
        object.__setattr__(self, 'poses', poses)


def canonical_rig(view_res=Config.VIEW_RES, azimuths=Config.RIG_AZIMUTHS, elevation=Config.RIG_ELEVATION):
    return ViewRig(tuple(CameraPose(az, elevation) for az in azimuths), view_res)


# ── 程序化场景 ─────────────────────────────────────────────────────────────
#
# 图元先在一个 (k+1)^3 的节点格上取软占用值（节点覆盖物体所在的立方体 [-s/2, s/2]^3），
# 再用顶点帽函数（三线性插值）延拓到体素网格。缩放 0.5 的场景恰好落在重建基的下一级节点格上。

def _draw_primitives(rng):
    count = int(rng.integers(1, 5))
    prims = []
    for _ in range(count):
        kind = PRIMITIVE_KINDS[int(rng.integers(0, len(PRIMITIVE_KINDS)))]
        center = rng.uniform(-0.12, 0.12, size=3)
        intensity = float(rng.uniform(0.3, 1.0))
        if kind == 'box':
            size = rng.uniform(0.13, 0.195, size=3)
        elif kind == 'sphere':
            size = np.full(3, rng.uniform(0.156, 0.325))
        else:
            radius = rng.uniform(0.13, 0.26)
            size = np.array([radius, rng.uniform(0.13, 0.26), radius])
        prims.append((kind, center, size, intensity))
    return prims


@functools.lru_cache(maxsize=64)
def hat_weights(resolution, intervals, half_extent):
    """一维顶点帽函数权重，形状 (resolution, intervals + 1)

    节点等距分布在 [-half_extent, half_extent]，体素中心坐标 u = (i + 0.5) / resolution - 0.5，
    节点范围之外的体素权重为 0。
    """
    u = (np.arange(resolution) + 0.5) / resolution - 0.5
    spacing = 2.0 * half_extent / intervals
    nodes = -half_extent + spacing * np.arange(intervals + 1)
    weights = np.maximum(0.0, 1.0 - np.abs(u[:, None] - nodes[None, :]) / spacing)
    weights.flags.writeable = False
    return weights


def prolong_nodes(nodes, weights):
    """节点值 (a, b, c) 延拓到体素网格 (z, y, x)，三个轴共用同一组一维权重"""
    return np.einsum('za,yb,xc,abc->zyx', weights, weights, weights, nodes)


def _node_values(prims, intervals, scale):
    spacing = scale / intervals
    k = -0.5 * scale + spacing * np.arange(intervals + 1)
    z, y, x = np.meshgrid(k, k, k, indexing='ij')
    values = np.zeros((intervals + 1,) * 3)
    for kind, center, size, intensity in prims:
        cx, cy, cz = center * scale
        sx, sy, sz = size * scale
        dx, dy, dz = x - cx, y - cy, z - cz
        if kind == 'box':
            sd = np.maximum(np.abs(dx) - sx, np.maximum(np.abs(dy) - sy, np.abs(dz) - sz))
        elif kind == 'sphere':
            sd = np.sqrt(dx ** 2 + dy ** 2 + dz ** 2) - sx
        else:
            sd = np.maximum(np.sqrt(dx ** 2 + dz ** 2) - sx, np.abs(dy) - sy)
        occupancy = np.clip(0.5 - sd / spacing, 0.0, 1.0)
        values = np.maximum(values, occupancy * intensity)
    values[x ** 2 + y ** 2 + z ** 2 > (SUPPORT_RADIUS * scale) ** 2 + 1e-12] = 0.0
    return values


def _rasterize(prims, resolution, scale):
    intervals = Config.SCENE_NODE_INTERVALS
    nodes = _node_values(prims, intervals, scale)
    density = prolong_nodes(nodes, hat_weights(resolution, intervals, SUPPORT_RADIUS * scale))
    return np.clip(density, 0.0, 1.0)


def _is_asymmetric(density):
    # 对镜像与绕竖直轴 90° 倍数旋转都不对称，四个视角才会两两不同
    if np.array_equal(density, density[:, :, ::-1]) or np.array_equal(density, density[::-1]):
        return False
    for k in (1, 2, 3):
        if np.array_equal(density, np.rot90(density, k, axes=(0, 2))):
            return False
    return True


def rig_silhouette_radius(density, rig=None, tau=Config.FOREGROUND_TAU):
    """标准四视角下的剪影半径（各视角取最大）"""
    rig = rig or canonical_rig()
    return max(silhouette_radius(Image(1.0 - render_foreground(density, pose, rig.view_res)), tau)
               for pose in rig.poses)


@functools.lru_cache(maxsize=1024)
def _accepted_primitives(prompt, resolution):
    for attempt in range(MAX_GENERATION_ATTEMPTS):
        prims = _draw_primitives(keyed_rng(prompt, attempt))
        density = _rasterize(prims, resolution, 1.0)
        occ = np.count_nonzero(density) / density.size
        if not OCCUPANCY_RANGE[0] <= occ <= OCCUPANCY_RANGE[1] or not _is_asymmetric(density):
            continue
        if rig_silhouette_radius(density) >= Config.MIN_SILHOUETTE_RADIUS:
            return attempt, tuple(prims)
    raise GenerationExhausted(f'prompt {prompt} 在 {MAX_GENERATION_ATTEMPTS} 次尝试内未生成合格场景')


def generate_scene(prompt, resolution=Config.SCENE_RESOLUTION, scale=1.0):
    """按 prompt id 确定性地生成场景

    Args:
        prompt: 非负整数 prompt id
        resolution: 体素分辨率（>= 4）
        scale: 图元相对网格中心的缩放，1.0 为正常尺寸；0.5 用于"缩小物体"实验

    Returns:
        VoxelScene；scale=1 时占用率在 [0.06, 0.60] 内、不对称，且剪影半径不小于
        Config.MIN_SILHOUETTE_RADIUS

    Raises:
        GenerationExhausted: 尝试上限内没有合格的图元组合
    """
    if prompt < 0:
        raise ValueError(f'prompt id 必须非负: {prompt}')
    if resolution < 4:
        raise DimensionMismatch(f'体素分辨率至少为 4: {resolution}')
    if not 0.0 < scale <= 1.0:
        raise ValueError(f'scale 必须在 (0,1] 内: {scale}')
    _, prims = _accepted_primitives(int(prompt), int(resolution))
    return VoxelScene(_rasterize(prims, resolution, scale))


def describe_prompt(prompt, resolution=Config.SCENE_RESOLUTION):
    """prompt 的可读描述，例如 "sphere+box" """
    _, prims = _accepted_primitives(int(prompt), int(resolution))
    return '+'.join(kind for kind, _, _, _ in prims)


def prompt_catalog(size, offset=0):
    return list(range(offset, offset + size))


# ── 渲染算子 ───────────────────────────────────────────────────────────────

def _rotation_matrix(azimuth, elevation):
    a = np.deg2rad(azimuth)
    e = np.deg2rad(elevation)
    ry = np.array([[np.cos(a), 0.0, np.sin(a)],
                   [0.0, 1.0, 0.0],
                   [-np.sin(a), 0.0, np.cos(a)]])
    rx = np.array([[1.0, 0.0, 0.0],
                   [0.0, np.cos(e), -np.sin(e)],
                   [0.0, np.sin(e), np.cos(e)]])
    # 物体旋转 R = Rx(-el) Ry(-az)，重采样取 R^-1 = Ry(az) Rx(el)
    return ry @ rx


def _trilinear_matrix(resolution, azimuth, elevation):
    n = resolution
    center = (n - 1) / 2.0
    idx = np.arange(n, dtype=np.float64) - center
    z, y, x = np.meshgrid(idx, idx, idx, indexing='ij')
    p = np.stack([x.ravel(), y.ravel(), z.ravel()])
    q = _rotation_matrix(azimuth, elevation) @ p + center
    base = np.floor(q)
    frac = q - base
    base = base.astype(np.int64)

    rows, cols, vals = [], [], []
    out_index = np.arange(n ** 3)
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                w = ((frac[0] if ox else 1.0 - frac[0])
                     * (frac[1] if oy else 1.0 - frac[1])
                     * (frac[2] if oz else 1.0 - frac[2]))
                xi, yi, zi = base[0] + ox, base[1] + oy, base[2] + oz
                ok = (w != 0.0) & (xi >= 0) & (xi < n) & (yi >= 0) & (yi < n) & (zi >= 0) & (zi < n)
                rows.append(out_index[ok])
                cols.append((zi * n * n + yi * n + xi)[ok])
                vals.append(w[ok])
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n ** 3, n ** 3),
    )


def _projection_matrix(resolution):
    # 沿深度 z 取均值；投影图第 r 行对应 y = n-1-r（y 向上），第 c 列对应 x = c
    n = resolution
    r, c = np.meshgrid(np.arange(n), np.arange(n), indexing='ij')
    ray = ((n - 1 - r) * n + c).ravel()
    rows = np.repeat(np.arange(n * n), n)
    cols = (np.arange(n)[None, :] * n * n + ray[:, None]).ravel()
    vals = np.full(rows.size, 1.0 / n)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n * n, n ** 3))


@functools.lru_cache(maxsize=256)
def projection_operator(resolution, azimuth, elevation):
    """单个位姿的稀疏投影算子 B，形状 (resolution², resolution³)：投影图前景 = B · density"""
    op = (_projection_matrix(resolution) @ _trilinear_matrix(resolution, azimuth, elevation)).tocsr()
    op.sum_duplicates()
    return op


@functools.lru_cache(maxsize=64)
def area_matrix(src, dst):
    """一维面积重采样矩阵，形状 (dst, src)

    目标像素取其覆盖区间内源像素的面积加权平均；dst 是 src 的整数倍时退化为块复制。
    """
    lo = np.arange(dst) * src / dst
    hi = (np.arange(dst) + 1) * src / dst
    k = np.arange(src)
    overlap = np.minimum(hi[:, None], k[None, :] + 1) - np.maximum(lo[:, None], k[None, :])
    weights = np.clip(overlap, 0.0, None) / (hi - lo)[:, None]
    weights.flags.writeable = False
    return weights


def resample(proj, view_res):
    """投影图 (n, n) 面积重采样到 (view_res, view_res)"""
    u = area_matrix(proj.shape[0], view_res)
    return u @ proj @ u.T


def resample_adjoint(view, resolution):
    """resample 的转置"""
    u = area_matrix(resolution, view.shape[0])
    return u.T @ view @ u


def render_foreground(density, pose, view_res):
    """前景项 1 - 像素，关于密度线性"""
    res = density.shape[0]
    proj = projection_operator(res, pose.azimuth, pose.elevation) @ density.ravel()
    return resample(proj.reshape(res, res), view_res)


def render_view(scene, pose, view_res=Config.VIEW_RES):
    """正交渲染一个视角：像素 = 1 - 沿视线的平均密度"""
    if view_res < 16:
        raise ValueError(f'视图分辨率至少为 16: {view_res}')
    return Image(1.0 - render_foreground(scene.density, pose, view_res))


def tile_views(views):
    """四个视角平铺为 2x2 图像"""
    if len(views) != 4:
        raise DimensionMismatch(f'平铺需要 4 个视角，实际 {len(views)}')
    d = [v.data for v in views]
    return Image(np.block([[d[0], d[1]], [d[2], d[3]]]))


def untile_views(tile):
    """2x2 平铺图像拆回四个视角"""
    h, w = tile.data.shape
    if h != w or h % 2:
        raise DimensionMismatch(f'平铺图像必须是偶数边长的正方形: {tile.data.shape}')
    s = h // 2
    d = tile.data
    return [Image(d[:s, :s]), Image(d[:s, s:]), Image(d[s:, :s]), Image(d[s:, s:])]


def render_multiview(scene, rig):
    """渲染相机组的四个视角

    Returns:
        (四个视角列表, 2x2 平铺图像)
    """
    views = [render_view(scene, pose, rig.view_res) for pose in rig.poses]
    return views, tile_views(views)


# ── 受控扰动 ───────────────────────────────────────────────────────────────

def patch_distort(img, size, seed):
    """用平滑噪声替换中心 size x size 区域（与原内容 50/50 混合）

    噪声场按 seed 在整幅图上生成并做两次 3x3 均值模糊，再取中心块，
    因此同一 seed 下更大的块是更小块的超集。
    """
    if size < 0:
        raise ValueError(f'扰动块大小不能为负: {size}')
    if size > min(img.width, img.height):
        raise SizeTooLarge(f'扰动块 {size} 超过图像尺寸 {img.width}x{img.height}')
    if size == 0:
        return img

    noise = keyed_rng(seed).uniform(0.0, 1.0, size=img.data.shape)
    for _ in range(2):
        noise = ndimage.uniform_filter(noise, size=3, mode='reflect')

    top = (img.height - size) // 2
    left = (img.width - size) // 2
    out = img.data.copy()
    window = (slice(top, top + size), slice(left, left + size))
    out[window] = 0.5 * out[window] + 0.5 * noise[window]
    return Image(out)


def rotation_distort(scene, pose, delta_az, delta_el, view_res=Config.VIEW_RES):
    """从旋转后的角度渲染，调用方仍以原始位姿标注该图像"""
    return render_view(scene, pose.rotated(delta_az, delta_el), view_res)
