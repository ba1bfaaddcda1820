"""
命令行入口

    python cli.py --config configs/default.conf --stage gen-data
    python cli.py --config configs/default.conf --stage sft --seed 1 --workers 4
    python cli.py --config configs/default.conf --stage plot --plot-input runs/default/logs/rlft_epochs.jsonl --plot-kind reward

退出码：0 成功，2 配置错误，3 缺少前置产物，4 阶段失败。
"""

import argparse
import logging
import os
import sys

from config import Config, load_config, override
from errors import ConfigError, MissingPrerequisite
from pipeline import STAGES, RunConfig, apply_seed, cmd_gen_data, cmd_pipeline
from plots import PLOT_KINDS, cmd_plot
from utils import ensure_dir, get_local_time

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_FAILURE = 4

ALL_STAGES = ('gen-data',) + STAGES + ('plot',)
LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'


def setup_logging(out_dir=None, level=None):
    """控制台与运行目录 logs/run.log 同时输出"""
    root = logging.getLogger()
    root.setLevel(level or Config.LOG_LEVEL)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    formatter = logging.Formatter(LOG_FORMAT)
    console = logging.StreamHandler()
    console.setFormatter(formatter)
    root.addHandler(console)
    if out_dir:
        log_dir = ensure_dir(os.path.join(out_dir, 'logs'))
        file_handler = logging.FileHandler(os.path.join(log_dir, 'run.log'), encoding='utf-8')
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)


def build_parser():
    parser = argparse.ArgumentParser(description='多视角重建一致性指标与 RLFT 实验')
    parser.add_argument('--config', required=True, help='配置文件路径')
    parser.add_argument('--seed', type=int, default=None, help='覆盖配置中的随机种子')
    parser.add_argument('--out', default=None, help='覆盖运行目录')
    parser.add_argument('--workers', type=int, default=1, help='并发线程数，1 为逐位可复现模式')
    parser.add_argument('--stage', choices=ALL_STAGES, default='sft', help='要执行的阶段')
    parser.add_argument('--plot-input', default=None, help='plot 阶段的输入（CSV 或 JSON-lines）')
    parser.add_argument('--plot-kind', choices=PLOT_KINDS, default='reward', help='plot 阶段的图表类型')
    return parser


def resolve_config(args):
    cfg = load_config(args.config, RunConfig)
    if args.seed is not None:
        cfg = apply_seed(cfg, args.seed)
    if args.out:
        cfg = override(cfg, out_dir=args.out)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print('--workers 至少为 1', file=sys.stderr)
        return EXIT_CONFIG

    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        setup_logging()
        logger.error(f"配置错误: {e}")
        return EXIT_CONFIG

    setup_logging(cfg.out_dir)
    logger.info(f"[{get_local_time()}] 开始阶段 {args.stage}，运行目录 {cfg.out_dir}，workers={args.workers}")
    try:
        if args.stage == 'gen-data':
            result = cmd_gen_data(cfg)
        elif args.stage == 'plot':
            if not args.plot_input:
                logger.error('plot 阶段需要 --plot-input')
                return EXIT_CONFIG
            result = cmd_plot(args.plot_input, args.plot_kind)
        else:
            result = cmd_pipeline(cfg, args.stage, workers=args.workers)
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        return EXIT_CONFIG
    except MissingPrerequisite as e:
        logger.error(f"缺少前置产物: {e}")
        return EXIT_PREREQUISITE
    except Exception as e:
        logger.exception(f"阶段 {args.stage} 失败: {e}")
        return EXIT_FAILURE

    logger.info(f"阶段 {args.stage} 完成: {result}")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
