"""
确定性 SVG 图表：奖励曲线、KL 曲线、扰动曲线与缩放实验表

模板 templates/chart.svg 由 Jinja2 渲染；同样的输入总是得到逐字节相同的输出。
"""

import csv
import json
import logging
import os

from jinja2 import Environment, FileSystemLoader

from errors import ParseError

logger = logging.getLogger(__name__)

TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'templates')
WIDTH, HEIGHT = 800, 500
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 170, 40, 50
TICK_COUNT = 5
COLORS = ('#1f77b4', '#ff7f0e', '#2ca02c', '#d62728', '#9467bd',
          '#8c564b', '#e377c2', '#7f7f7f', '#bcbd22', '#17becf')

PLOT_KINDS = ('reward', 'kl', 'curve', 'scaling')

_env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), autoescape=True,
                   keep_trailing_newline=True, trim_blocks=True, lstrip_blocks=True)


def _fmt(value):
    return '%.3f' % value


def _axis_range(values):
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def render_chart(series, title='', x_label='', y_label=''):
    """
    渲染折线图

    Args:
        series: [(图例名, [(x, y), ...]), ...]，按给定顺序绘制
        title: 标题
        x_label: 横轴名称
        y_label: 纵轴名称

    Returns:
        SVG 文本
    """
    points = [p for _, pts in series for p in pts]
    if not points:
        raise ParseError('没有可绘制的数据点')
    x_lo, x_hi = _axis_range([p[0] for p in points])
    y_lo, y_hi = _axis_range([p[1] for p in points])
    left, right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    top, bottom = MARGIN_TOP, HEIGHT - MARGIN_BOTTOM

    def sx(x):
        return left + (x - x_lo) / (x_hi - x_lo) * (right - left)

    def sy(y):
        return bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top)

    x_ticks, y_ticks = [], []
    for i in range(TICK_COUNT):
        fx = x_lo + (x_hi - x_lo) * i / (TICK_COUNT - 1)
        fy = y_lo + (y_hi - y_lo) * i / (TICK_COUNT - 1)
        x_ticks.append({'pos': _fmt(sx(fx)), 'label': _fmt(fx)})
        y_ticks.append({'pos': _fmt(sy(fy)), 'label': _fmt(fy)})

    rendered = []
    for i, (label, pts) in enumerate(series):
        rendered.append({
            'label': label,
            'color': COLORS[i % len(COLORS)],
            'points': ' '.join(f'{_fmt(sx(x))},{_fmt(sy(y))}' for x, y in pts),
        })
    return _env.get_template('chart.svg').render(
        width=WIDTH, height=HEIGHT, left=left, right=right, top=top, bottom=bottom,
        title=title, x_label=x_label, y_label=y_label,
        x_ticks=x_ticks, y_ticks=y_ticks, series=rendered,
    )


def _read_jsonl(path):
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ParseError(f'{path} 第 {lineno} 行不是合法 JSON: {e}')
    return records


def _read_csv(path, required):
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f'{path} 缺少列: {", ".join(missing)}')
        return list(reader)


def _number(value, where):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ParseError(f'{where} 不是数值: {value!r}')


def _epoch_series(records, field):
    by_seed = {}
    for i, rec in enumerate(records):
        if 'epoch' not in rec or field not in rec:
            raise ParseError(f'第 {i + 1} 条记录缺少 epoch 或 {field}')
        seed = rec.get('seed', 0)
        by_seed.setdefault(seed, []).append((_number(rec['epoch'], 'epoch'), _number(rec[field], field)))
    return [(f'seed {seed}', sorted(pts)) for seed, pts in sorted(by_seed.items())]


def chart_from_file(path, kind):
    """
    从日志或 CSV 生成 SVG 文本

    Args:
        path: rlft_epochs.jsonl（reward/kl）、扰动曲线 CSV（curve）或缩放实验 CSV（scaling）
        kind: 图表类型

    Raises:
        ParseError: 输入无法解析
    """
    if kind not in PLOT_KINDS:
        raise ParseError(f'未知的图表类型: {kind}')
    if kind in ('reward', 'kl'):
        field = 'reward_mean' if kind == 'reward' else 'kl_mean'
        series = _epoch_series(_read_jsonl(path), field)
        return render_chart(series, title=f'{kind} curve', x_label='epoch', y_label=field)

    if kind == 'curve':
        rows = _read_csv(path, ('kind', 'intensity', 'score'))
        grouped = {}
        for r in rows:
            grouped.setdefault(r['kind'], []).append((_number(r['intensity'], 'intensity'),
                                                      _number(r['score'], 'score')))
        series = [(k, sorted(v)) for k, v in grouped.items()]
        return render_chart(series, title=os.path.basename(path), x_label='intensity', y_label='MRC')

    rows = _read_csv(path, ('batch', 'data', 'seed', 'epoch', 'reward', 'kl'))
    cells = {}
    for r in rows:
        key = (int(_number(r['batch'], 'batch')), int(_number(r['data'], 'data')))
        epoch = _number(r['epoch'], 'epoch')
        cells.setdefault(key, {}).setdefault(epoch, []).append(_number(r['reward'], 'reward'))
    series = []
    for (batch, data), per_epoch in sorted(cells.items()):
        pts = [(e, sum(v) / len(v)) for e, v in sorted(per_epoch.items())]
        series.append((f'batch {batch} / data {data}', pts))
    return render_chart(series, title='scaling', x_label='epoch', y_label='reward (seed mean)')


def cmd_plot(path, kind, out_path=None):
    """生成 SVG 文件，默认与输入同名（扩展名 .svg）"""
    svg = chart_from_file(path, kind)
    out_path = out_path or os.path.splitext(path)[0] + f'_{kind}.svg'
    with open(out_path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(svg)
    logger.info(f"图表已生成: {out_path}")
    return out_path
