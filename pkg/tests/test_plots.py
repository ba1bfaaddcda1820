import json

import pytest

from errors import ParseError
from plots import chart_from_file, cmd_plot, render_chart


def _write_epochs(path, records):
    with open(path, 'w', encoding='utf-8') as f:
        for rec in records:
            f.write(json.dumps(rec) + '\n')


def test_single_series_chart():
    svg = render_chart([('reward', [(0, 0.0), (1, 1.0)])], title='t', x_label='epoch', y_label='r')
    assert svg.count('<polyline') == 1
    assert 'points="70.000,450.000 630.000,40.000"' in svg


def test_chart_output_is_stable():
    series = [('a', [(0, 1.5), (2, -0.5)]), ('b', [(1, 0.25)])]
    assert render_chart(series) == render_chart(series)


def test_chart_needs_points():
    with pytest.raises(ParseError):
        render_chart([('empty', [])])


def test_reward_chart_has_one_series_per_seed(tmp_path):
    path = tmp_path / 'rlft_epochs.jsonl'
    _write_epochs(path, [
        {'epoch': 0, 'seed': 0, 'reward_mean': -0.5, 'kl_mean': 0.0},
        {'epoch': 1, 'seed': 0, 'reward_mean': -0.4, 'kl_mean': 0.01},
        {'epoch': 0, 'seed': 1, 'reward_mean': -0.6, 'kl_mean': 0.0},
    ])
    svg = chart_from_file(path, 'reward')
    assert svg.count('<polyline') == 2
    assert 'seed 0' in svg and 'seed 1' in svg


def test_curve_chart_groups_by_metric(tmp_path):
    path = tmp_path / 'distort_patch.csv'
    path.write_text('kind,intensity,score\nl1,0.0,0.1\nl1,4.0,0.2\nmsgd,0.0,0.01\nmsgd,4.0,0.03\n',
                    encoding='utf-8')
    svg = chart_from_file(path, 'curve')
    assert svg.count('<polyline') == 2


def test_scaling_chart_averages_seeds(tmp_path):
    path = tmp_path / 'scaling.csv'
    path.write_text('batch,data,seed,epoch,reward,kl\n'
                    '8,2,0,0,-0.5,0.0\n8,2,1,0,-0.3,0.0\n8,2,0,1,-0.2,0.0\n8,2,1,1,-0.2,0.0\n',
                    encoding='utf-8')
    svg = chart_from_file(path, 'scaling')
    assert svg.count('<polyline') == 1
    assert 'batch 8 / data 2' in svg


def test_malformed_inputs(tmp_path):
    bad_json = tmp_path / 'bad.jsonl'
    bad_json.write_text('{"epoch": 0\n', encoding='utf-8')
    with pytest.raises(ParseError):
        chart_from_file(bad_json, 'reward')

    missing = tmp_path / 'missing.jsonl'
    _write_epochs(missing, [{'epoch': 0}])
    with pytest.raises(ParseError):
        chart_from_file(missing, 'kl')

    bad_csv = tmp_path / 'bad.csv'
    bad_csv.write_text('kind,score\nl1,0.1\n', encoding='utf-8')
    with pytest.raises(ParseError):
        chart_from_file(bad_csv, 'curve')

    with pytest.raises(ParseError):
        chart_from_file(bad_csv, 'histogram')


def test_cmd_plot_writes_file(tmp_path):
    path = tmp_path / 'rlft_epochs.jsonl'
    _write_epochs(path, [{'epoch': 0, 'seed': 0, 'reward_mean': -0.5, 'kl_mean': 0.0}])
    out = cmd_plot(str(path), 'kl')
    assert out.endswith('rlft_epochs_kl.svg')
    with open(out, encoding='utf-8') as f:
        assert f.read().startswith('<svg')
