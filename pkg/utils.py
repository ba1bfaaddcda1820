import csv
import json
import os
from datetime import datetime

import numpy as np
import pytz

from config import Config


def get_local_time(timezone=None):
    """
    获取当前本地时间

    Args:
        timezone: 时区，默认使用配置中的时区

    Returns:
        本地时间字符串
    """
    if timezone is None:
        timezone = Config.TIMEZONE

    local_tz = pytz.timezone(timezone)
    local_time = datetime.now(local_tz)
    return local_time.strftime('%Y-%m-%d %H:%M:%S')


def format_duration(seconds):
    """
    将耗时转换为可读描述（如：2分钟13秒）

    Args:
        seconds: 秒数

    Returns:
        耗时描述
    """
    if seconds < 60:
        return f"{seconds:.2f}秒"
    elif seconds < 3600:
        return f"{int(seconds // 60)}分钟{int(seconds % 60)}秒"
    else:
        return f"{int(seconds // 3600)}小时{int(seconds % 3600 // 60)}分钟"


def keyed_rng(*keys):
    """
    基于计数器的随机数生成器（Philox），由整数键唯一确定

    同一组键永远得到同一条随机流，与调用顺序和线程无关。

    Args:
        *keys: 非负整数键，例如 (seed, epoch, sample_index)

    Returns:
        numpy.random.Generator
    """
    seed_seq = np.random.SeedSequence([int(k) for k in keys])
    return np.random.Generator(np.random.Philox(seed_seq))


def append_jsonl(path, record):
    """向 JSON-lines 文件追加一条记录（键排序，保证字节级可复现）"""
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + '\n')


def read_jsonl(path):
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, header, rows):
    """写 CSV 文件；浮点数使用 repr 保证无损"""
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
