import os
import enum
import dataclasses
import typing

from errors import ExperimentError, ConfigError


class Config:
    # 时区配置
    TIMEZONE = os.environ.get('TIMEZONE') or 'Asia/Shanghai'  # 默认中国时区
    LOG_LEVEL = os.environ.get('LOG_LEVEL') or 'INFO'
    SHOW_PROGRESS = (os.environ.get('SHOW_PROGRESS') or '1') == '1'

    # 玩具世界
    SCENE_RESOLUTION = 32  # 体素分辨率
    SCENE_NODE_INTERVALS = 4  # 场景节点格每轴的区间数，节点覆盖物体所在立方体
    MIN_SILHOUETTE_RADIUS = 0.35  # 标准四视角下剪影半径的下限（以边长归一化）
    VIEW_RES = 32  # 单视角边长（像素）
    RIG_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)
    RIG_ELEVATION = 20.0
    CATALOG_SIZE = 32

    # MRC
    FOREGROUND_TAU = 0.0625  # 16/255
    RESIZE_RES = 64
    R_FAIL = -1.0
    LAMBDA_REG = 1e-3
    CG_MAX_ITERS = 200
    CG_TOL = 1e-8
    RECON_BASIS_INTERVALS = 4  # 重建基每轴区间数；0 表示直接求解体素网格
    HULL_THRESHOLD = 0.999  # 系数足迹中背景占比达到该值即固定为 0；>= 1 关闭

    # 扩散
    T_TRAIN = 50
    BETA_START = 1e-4
    BETA_END = 0.02
    INFERENCE_STEPS = 20
    ETA = 1.0
    CFG_SCALE = 5.0

    # 网络
    HIDDEN = (256, 256)
    EMBED_DIM = 16
    FREQ_COUNT = 8

    # 优化器（AdamW）
    LR = 3e-4
    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8
    WEIGHT_DECAY = 1e-4

    # RLFT
    ALPHA = 1.0
    BETA = 0.2
    BATCH_SIZE = 64
    SAMPLE_MINIBATCH = 8
    TRAIN_MINIBATCH = 4
    TRACKER_WINDOW = 76
    ADVANTAGE_CLIP = 5.0
    IS_CLIP_RANGE = 0.2
    IS_INNER_STEPS = 2
    KL_STOP_THRESHOLD = 0.05  # 玩具任务的阈值；大模型规模下约为 3.2e-4

    # SFT
    SFT_STEPS = 3000
    SFT_BATCH_SIZE = 16
    SFT_DROP_PROB = 0.1

    # 资源告警
    MEMORY_WARN_MB = 4096


def _convert(value, tp, key):
    """把配置文件里的字符串转换为字段类型"""
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ('none', ''):
            return None
        return _convert(value, args[0], key)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        items = [v.strip() for v in value.split(',') if v.strip()]
        return tuple(_convert(v, inner, key) for v in items)
    try:
        if tp is bool:
            lowered = value.lower()
            if lowered in ('true', '1', 'yes'):
                return True
            if lowered in ('false', '0', 'no'):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            return tp(value)
    except ValueError:
        raise ConfigError(f'配置项 {key} 的值无法解析: {value!r}')
    raise ConfigError(f'配置项 {key} 的类型不受支持: {tp}')


def _format(value):
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(_format(v) for v in value)
    if value is None:
        return 'none'
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text, root_cls):
    """解析扁平 key = value 配置文本

    Args:
        text: 配置文本，每行 `section.key = value`，`#` 开头为注释
        root_cls: 顶层 dataclass 类型

    Returns:
        root_cls 实例；未出现的键使用字段默认值

    Raises:
        ConfigError: 未知键、重复键或值无法解析
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'第 {lineno} 行缺少 "=": {raw!r}')
        key, value = (part.strip() for part in line.split('=', 1))
        if key in values:
            raise ConfigError(f'配置项重复: {key}')
        values[key] = value
    cfg = _build(root_cls, values, prefix='')
    if values:
        raise ConfigError(f'未知配置项: {", ".join(sorted(values))}')
    return cfg


def _build(cls, values, prefix):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, values, key + '.')
        elif key in values:
            kwargs[f.name] = _convert(values.pop(key), tp, key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, ExperimentError) as e:
        raise ConfigError(f'配置 {prefix or cls.__name__} 不合法: {e}')


def dump_config_text(cfg, prefix=''):
    """把配置 dataclass 写成规范化的扁平文本（与 parse_config_text 互逆）"""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            lines.append(dump_config_text(value, prefix + f.name + '.'))
        else:
            lines.append(f'{prefix}{f.name} = {_format(value)}')
    return '\n'.join(line for line in lines if line)


def override(cfg, **changes):
    """按点号路径覆盖配置，例如 override(cfg, **{'trainer.seed': 3})"""
    for path, value in changes.items():
        head, _, rest = path.partition('.')
        if rest:
            cfg = dataclasses.replace(cfg, **{head: override(getattr(cfg, head), **{rest: value})})
        else:
            cfg = dataclasses.replace(cfg, **{head: value})
    return cfg


def load_config(path, root_cls):
    """从文件读取运行配置"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f'无法读取配置文件 {path}: {e}')
    return parse_config_text(text, root_cls)


def dump_config(cfg, path):
    """把配置写到文件，读回后与原配置相等"""
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dump_config_text(cfg) + '\n')
    return path
