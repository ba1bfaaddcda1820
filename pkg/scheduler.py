import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed

from tqdm import tqdm

from config import Config

logger = logging.getLogger(__name__)


def run_tasks(fn, items, workers=1, desc=None):
    """
    执行一批相互独立的任务（并行）

    结果按输入顺序返回，与线程调度顺序无关；workers <= 1 时顺序执行，作为逐位可复现模式。

    Args:
        fn: 单个任务函数 fn(item)
        items: 任务参数列表
        workers: 并发线程数
        desc: 进度条描述，None 表示不显示

    Returns:
        与 items 等长的结果列表

    Raises:
        任务中的第一个异常（按输入下标）
    """
    items = list(items)
    if not items:
        return []

    start_time = time.time()
    show = desc is not None and Config.SHOW_PROGRESS

    if workers <= 1:
        results = [fn(item) for item in tqdm(items, desc=desc, disable=not show, leave=False)]
        if desc:
            logger.debug(f"{desc}: {len(items)} 个任务完成，耗时 {time.time() - start_time:.2f}秒")
        return results

    results = [None] * len(items)
    errors = {}
    completed = 0
    failed = 0
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(fn, item): index for index, item in enumerate(items)}
        for future in tqdm(as_completed(futures), total=len(futures), desc=desc,
                           disable=not show, leave=False):
            index = futures[future]
            try:
                results[index] = future.result()
                completed += 1
            except Exception as e:
                errors[index] = e
                failed += 1
                logger.warning(f"任务 {index} 异常: {e}")

    elapsed = time.time() - start_time
    logger.debug(f"{desc or '任务'}完成: {completed} 成功, {failed} 失败, 耗时 {elapsed:.2f}秒")
    if errors:
        raise errors[min(errors)]
    return results
