"""
灰度图像、前景检测、正方形包围盒归一化与图像距离

所有图像以 float64 二维数组存储，取值 [0,1]，1.0 为白色背景。
"""

import enum
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from skimage.transform import downscale_local_mean
from skimage.util import view_as_windows

from config import Config
from errors import BboxOutOfBounds, DimensionMismatch, NoForeground, TooSmall, FormatError

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MSGD_SCALES = (1, 2, 4)
MSGD_MIN_SIDE = 4


@dataclass(frozen=True, eq=False)
class Image:
    """灰度图像（构造后只读）"""
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionMismatch(f'图像必须是非空二维数组，实际形状: {arr.shape}')
        if not np.all(np.isfinite(arr)):
            raise ValueError('图像包含非有限值')
        np.clip(arr, 0.0, 1.0, out=arr)
        arr.flags.writeable = False
        object.__setattr__(self, 'data', arr)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @classmethod
    def white(cls, height, width=None):
        return cls(np.ones((height, width or height)))

    def equals(self, other):
        """逐位相等"""
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def to_raw(self):
        """无损原始格式：宽、高（uint32 小端）+ float64 小端行优先数据"""
        return struct.pack('<II', self.width, self.height) + self.data.astype('<f8').tobytes()

    @classmethod
    def from_raw(cls, payload):
        if len(payload) < 8:
            raise FormatError('原始图像数据过短')
        width, height = struct.unpack('<II', payload[:8])
        body = payload[8:]
        if len(body) != width * height * 8:
            raise FormatError(f'原始图像长度不符: 期望 {width * height * 8} 字节，实际 {len(body)}')
        return cls(np.frombuffer(body, dtype='<f8').reshape(height, width))

    def save_png(self, path):
        """8 位灰度 PNG，强度 i 存为 round(i*255)"""
        pixels = np.round(self.data * 255.0).astype(np.uint8)
        PILImage.fromarray(pixels).save(path, format='PNG')

    @classmethod
    def load_png(cls, path):
        with PILImage.open(path) as im:
            pixels = np.asarray(im.convert('L'), dtype=np.float64)
        return cls(pixels / 255.0)


@dataclass(frozen=True)
class SquareBbox:
    """正方形包围盒，坐标均为闭区间像素坐标"""
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_max - self.x_min != self.y_max - self.y_min:
            raise ValueError(f'包围盒不是正方形: {self}')

    @property
    def side(self):
        return self.x_max - self.x_min + 1

    def inside(self, img):
        return (self.x_min >= 0 and self.y_min >= 0
                and self.x_max < img.width and self.y_max < img.height)


class MetricKind(enum.Enum):
    """图像距离类型；PSNR 与 SSIM 取负，使所有类型都是"越大越不同"的距离"""
    L1 = 'l1'
    L2 = 'l2'
    PSNR_NEG = 'psnr'
    SSIM_NEG = 'ssim'
    MSGD = 'msgd'

    @property
    def minimum(self):
        return {
            MetricKind.L1: 0.0,
            MetricKind.L2: 0.0,
            MetricKind.PSNR_NEG: -PSNR_CAP,
            MetricKind.SSIM_NEG: -1.0,
            MetricKind.MSGD: 0.0,
        }[self]


PIXEL_KINDS = (MetricKind.L1, MetricKind.L2, MetricKind.PSNR_NEG, MetricKind.SSIM_NEG)


def foreground_mask(img, tau=Config.FOREGROUND_TAU):
    """前景掩码：强度 < 1 - tau 的像素"""
    if not 0.0 < tau < 1.0:
        raise ValueError(f'前景阈值必须在 (0,1) 内: {tau}')
    return img.data < 1.0 - tau


def silhouette_radius(img, tau=Config.FOREGROUND_TAU):
    """前景到图像中心的最大切比雪夫距离，按边长归一化（中心为 0，边缘约 0.5）；无前景时为 0"""
    mask = foreground_mask(img, tau)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return 0.0
    h, w = mask.shape
    return float(max(np.abs(rows + 0.5 - h / 2.0).max() / h, np.abs(cols + 0.5 - w / 2.0).max() / w))


def _square_start(lo, length, side, limit):
    # 居中放不下时偏向较小坐标，然后平移进图像
    extra = side - length
    start = lo - (extra + 1) // 2
    return min(max(start, 0), limit - side)


def compute_square_bbox(img, tau=Config.FOREGROUND_TAU):
    """计算前景的最小正方形包围盒

    先取前景的紧致矩形，再沿短边对称扩展为正方形，最后平移（不缩小）到图像内。

    Args:
        img: 输入图像
        tau: 前景阈值

    Returns:
        SquareBbox

    Raises:
        NoForeground: 没有前景像素
        BboxOutOfBounds: 正方形边长超过图像短边
    """
    mask = foreground_mask(img, tau)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise NoForeground('图像中没有前景像素')

    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    side = max(r1 - r0 + 1, c1 - c0 + 1)
    if side > min(img.height, img.width):
        raise BboxOutOfBounds(f'正方形边长 {side} 超过图像尺寸 {img.height}x{img.width}')

    y = _square_start(r0, r1 - r0 + 1, side, img.height)
    x = _square_start(c0, c1 - c0 + 1, side, img.width)
    return SquareBbox(x, y, x + side - 1, y + side - 1)


def crop_and_resize(img, bbox, res):
    """按包围盒裁剪并双线性缩放到 res x res（角点对齐）"""
    if res < 2:
        raise ValueError(f'目标分辨率至少为 2: {res}')
    if not bbox.inside(img):
        raise BboxOutOfBounds(f'包围盒 {bbox} 超出图像 {img.width}x{img.height}')

    crop = img.data[bbox.y_min:bbox.y_max + 1, bbox.x_min:bbox.x_max + 1]
    n = bbox.side
    coords = np.arange(res, dtype=np.float64) * (n - 1) / (res - 1)
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    out = ndimage.map_coordinates(crop, [yy, xx], order=1, mode='nearest')
    return Image(out)


def _check_same_size(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionMismatch(f'图像尺寸不一致: {a.data.shape} vs {b.data.shape}')


def _mean_ssim(a, b):
    if min(a.data.shape) < SSIM_WINDOW:
        raise TooSmall(f'SSIM 需要至少 {SSIM_WINDOW}x{SSIM_WINDOW} 的图像')
    wa = view_as_windows(a.data, (SSIM_WINDOW, SSIM_WINDOW), step=SSIM_STRIDE)
    wb = view_as_windows(b.data, (SSIM_WINDOW, SSIM_WINDOW), step=SSIM_STRIDE)
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(2, 3))
    var_b = (db * db).mean(axis=(2, 3))
    cov = (da * db).mean(axis=(2, 3))

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def pixel_distance(a, b, kind):
    """像素级距离（L1 / L2 / -PSNR / -SSIM）"""
    _check_same_size(a, b)
    if kind == MetricKind.L1:
        return float(np.mean(np.abs(a.data - b.data)))
    if kind == MetricKind.L2:
        return float(np.mean((a.data - b.data) ** 2))
    if kind == MetricKind.PSNR_NEG:
        mse = float(np.mean((a.data - b.data) ** 2))
        if mse == 0.0:
            return -PSNR_CAP
        return -min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))
    if kind == MetricKind.SSIM_NEG:
        return -_mean_ssim(a, b)
    raise ValueError(f'不是像素级距离类型: {kind}')


def _halve(data):
    h, w = data.shape
    return downscale_local_mean(data[:h - h % 2, :w - w % 2], (2, 2))


def _msgd_pyramid(data):
    # 尺度 s 对应 s-1 次 2x2 均值池化
    levels = {}
    current = data
    halvings = 0
    for s in sorted(MSGD_SCALES):
        while halvings < s - 1:
            current = _halve(current)
            halvings += 1
        if min(current.shape) < MSGD_MIN_SIDE:
            raise TooSmall(f'MSGD 在尺度 {s} 下图像小于 {MSGD_MIN_SIDE}x{MSGD_MIN_SIDE}')
        levels[s] = current
    return levels


def msgd_distance(a, b):
    """多尺度梯度距离（MSGD）

    尺度 s ∈ {1, 2, 4} 先做 s-1 次 2x2 均值池化，再分别计算水平/垂直中心差分梯度，
    取梯度差绝对值的均值，最后对三个尺度取平均。只度量结构，与整体亮度无关。
    输入边长至少为 32（最粗尺度不小于 4x4）。
    """
    _check_same_size(a, b)
    pa = _msgd_pyramid(a.data)
    pb = _msgd_pyramid(b.data)
    per_scale = []
    for s in MSGD_SCALES:
        gya, gxa = np.gradient(pa[s])
        gyb, gxb = np.gradient(pb[s])
        per_scale.append(0.5 * (np.mean(np.abs(gxa - gxb)) + np.mean(np.abs(gya - gyb))))
    return float(np.mean(per_scale))


def image_distance(a, b, kind):
    """按类型计算距离，MSGD 与像素级距离统一入口"""
    if kind == MetricKind.MSGD:
        return msgd_distance(a, b)
    return pixel_distance(a, b, kind)
