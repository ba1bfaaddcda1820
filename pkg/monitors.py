import logging
import time

import psutil

from config import Config
from utils import append_jsonl, format_duration, get_local_time

logger = logging.getLogger(__name__)


class ResourceMonitor:
    """当前进程与本机资源"""

    @staticmethod
    def check_process_memory():
        """当前进程常驻内存（MB）"""
        return psutil.Process().memory_info().rss / (1024 * 1024)

    @staticmethod
    def check_cpu():
        # 非阻塞方式获取 CPU 使用率
        return psutil.cpu_percent(interval=0)


class StageTimer:
    """
    阶段计时器（上下文管理器）

    退出时把耗时与内存写入 timing.jsonl。这些字段每次运行都不同，因此不放进确定性日志。

    Args:
        name: 阶段名称，如 "sft"、"rlft/epoch-3"
        timing_path: timing.jsonl 路径，None 表示只记日志
    """

    def __init__(self, name, timing_path=None):
        self.name = name
        self.timing_path = timing_path
        self.start_time = None
        self.elapsed = 0.0

    def __enter__(self):
        self.start_time = time.time()
        ResourceMonitor.check_cpu()  # 第一次调用只建立基准
        return self

    def __exit__(self, exc_type, exc, tb):
        self.elapsed = time.time() - self.start_time
        rss = ResourceMonitor.check_process_memory()
        record = {
            'stage': self.name,
            'finished_at': get_local_time(),
            'wall_time': round(self.elapsed, 3),
            'rss_mb': round(rss, 1),
            'cpu_percent': ResourceMonitor.check_cpu(),
            'ok': exc_type is None,
        }
        if self.timing_path:
            append_jsonl(self.timing_path, record)
        if rss > Config.MEMORY_WARN_MB:
            logger.warning(f"[{self.name}] 进程内存过高: {rss:.0f}MB")
        logger.info(f"[{self.name}] {'完成' if exc_type is None else '失败'}，耗时 {format_duration(self.elapsed)}")
        return False
