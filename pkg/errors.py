"""
异常定义

计算模块抛出具体的异常类型；编排层（scheduler / pipeline / cli）负责捕获、记录并转换为结果或退出码。
"""


class ExperimentError(Exception):
    """所有业务异常的基类"""


class DimensionMismatch(ExperimentError):
    """尺寸不一致"""


class PoseDegeneracy(DimensionMismatch):
    """相机位姿重复，重建问题退化"""


class NoForeground(ExperimentError):
    """图像中没有前景像素"""


class BboxOutOfBounds(ExperimentError):
    """包围盒超出图像范围"""


class TooSmall(ExperimentError):
    """图像尺寸过小"""


class SizeTooLarge(ExperimentError):
    """扰动块大小超过图像尺寸"""


class NonPositiveSigma(ExperimentError):
    """高斯标准差必须为正"""


class NonFiniteGradient(ExperimentError):
    """梯度中出现 NaN 或 Inf"""


class MismatchedBatch(ExperimentError):
    """轨迹数与优势值数量不一致"""


class EmptyDataset(ExperimentError):
    """训练数据为空"""


class EmptyCatalog(ExperimentError):
    """prompt 目录为空"""


class InvalidIntensities(ExperimentError):
    """扰动强度列表不合法"""


class ConfigError(ExperimentError):
    """配置错误（未知键、类型错误等）"""


class MissingPrerequisite(ExperimentError):
    """缺少前置阶段的产物"""


class ParseError(ExperimentError):
    """输入文件无法解析"""


class FormatError(ExperimentError):
    """二进制格式魔数或版本不符"""


class GenerationExhausted(ExperimentError):
    """场景生成在尝试上限内没有得到合格的图元组合"""
