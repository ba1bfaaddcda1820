import numpy as np
import pytest

import mrc
from errors import EmptyCatalog, InvalidIntensities, NoForeground
from imgproc import Image, MetricKind
from mrc import (DistortionKind, MrcConfig, ablation_view_sets, bbox_ablation, compute_mrc,
                 distortion_experiment, measure_floor, metric_comparison_report, mrc_or_none, mrc_reward,
                 score_views, smoothness, write_curves_csv)
from sceneworld import generate_scene, render_multiview


def test_pipeline_order_and_shared_bbox(monkeypatch, gt_views, rig):
    calls = []
    real = {name: getattr(mrc, name) for name in
            ('reconstruct', 'rerender', 'compute_square_bbox', 'crop_and_resize', 'image_distance')}

    def recording(name):
        def wrapper(*args):
            if name == 'crop_and_resize':
                calls.append(('crop', args[1]))
            else:
                calls.append(name)
            return real[name](*args)
        return wrapper

    for name in real:
        monkeypatch.setattr(mrc, name, recording(name))

    compute_mrc(gt_views, rig.poses)

    assert calls[:2] == ['reconstruct', 'rerender']
    per_view = calls[2:]
    assert len(per_view) == 16
    for i in range(4):
        bbox_call, crop_a, crop_b, dist = per_view[4 * i:4 * i + 4]
        assert bbox_call == 'compute_square_bbox'
        assert crop_a[0] == 'crop' and crop_b[0] == 'crop'
        assert crop_a[1] == crop_b[1]
        assert dist == 'image_distance'


def test_score_is_mean_of_per_view_distances(gt_views, rig):
    result = compute_mrc(gt_views, rig.poses)
    assert result.score == pytest.approx(float(np.mean(result.per_view)))
    assert len(result.bboxes) == 4
    assert result.recon_diagnostics is not None


def test_identical_rerender_scores_minimum(gt_views):
    for kind in MetricKind:
        result = score_views(gt_views, gt_views, MrcConfig(metric=kind))
        assert result.score == kind.minimum


def test_all_white_views(rig):
    views = [Image.white(32)] * 4
    with pytest.raises(NoForeground):
        compute_mrc(views, rig.poses)
    assert mrc_reward(views, rig.poses) == -1.0


def test_all_white_without_bbox_norm(rig):
    views = [Image.white(32)] * 4
    with pytest.raises(NoForeground):
        compute_mrc(views, rig.poses, MrcConfig(bbox_norm=False))


def test_reward_is_negative_mrc(gt_views, rig):
    assert mrc_reward(gt_views, rig.poses) == -compute_mrc(gt_views, rig.poses).score


def test_large_patch_scores_worse_than_clean():
    curve = distortion_experiment(0, DistortionKind.PATCH, [0, 16], seed=3)
    assert curve.scores[1] > curve.scores[0]


def test_zero_intensity_matches_ground_truth_mrc(rig):
    views, _ = render_multiview(generate_scene(0), rig)
    curve = distortion_experiment(0, "azimuth", [0], seed=0)
    assert curve.scores == (compute_mrc(views, rig.poses).score,)
    assert curve.distortion_kind == DistortionKind.AZIMUTH


@pytest.mark.parametrize('levels', [[], [4, 8], [0, 8, 8], [0, 8, 4]])
def test_invalid_intensities(levels):
    with pytest.raises(InvalidIntensities):
        distortion_experiment(0, 'patch', levels)


def test_smoothness_values():
    assert smoothness([1.0, 2.0]) == 0.0
    assert smoothness([3.0, 3.0, 3.0]) == 0.0
    assert smoothness([0.0, 1.0, 2.0, 3.0]) == pytest.approx(0.0)
    assert smoothness([0.0, 1.0, 0.0]) == pytest.approx(2.0)


def test_comparison_report_shapes_and_csv(tmp_path):
    metrics = (MetricKind.L1, MetricKind.MSGD)
    report = metric_comparison_report([0], 'patch', [0, 8], seed=1, metrics=metrics)
    assert set(report.mean_curves) == set(metrics)
    assert all(len(c) == 2 for c in report.mean_curves.values())
    assert report.curves[MetricKind.L1][0].metric == MetricKind.L1

    path = tmp_path / 'curves.csv'
    write_curves_csv(path, report)
    lines = path.read_text(encoding='utf-8').splitlines()
    assert lines[0] == 'kind,intensity,score'
    assert len(lines) == 1 + 4
    assert lines[1].startswith('l1,0.0,')


def test_comparison_report_matches_single_metric_experiment():
    report = metric_comparison_report([1], 'elevation', [0, 10], seed=0, metrics=(MetricKind.MSGD,))
    curve = distortion_experiment(1, 'elevation', [0, 10], seed=0)
    assert report.mean_curves[MetricKind.MSGD] == pytest.approx(curve.scores)


def test_comparison_report_needs_prompts():
    with pytest.raises(EmptyCatalog):
        metric_comparison_report([], 'patch', [0, 4])


def test_workers_do_not_change_floor(rig):
    sequential = measure_floor([0, 1], workers=1)
    threaded = measure_floor([0, 1], workers=2)
    assert sequential == threaded
    mean, std, upper = sequential
    assert upper == pytest.approx(mean + 3 * std)


def test_bbox_ablation_keys():
    result = bbox_ablation([0])
    assert set(result) == {'norm_big', 'norm_small', 'unnorm_big', 'unnorm_small', 'count'}
    assert result['count'] == 1
    assert all(np.isfinite(v) for v in result.values())


def test_bbox_ablation_needs_prompts():
    with pytest.raises(EmptyCatalog):
        bbox_ablation([])


def test_ablation_views_match_contrast(rig):
    sets = ablation_view_sets(2, rig, 32)
    full, _ = render_multiview(generate_scene(2), rig)
    # 大物体密度减半：前景正好是原场景的一半
    assert np.allclose(1.0 - sets['big'][0].data, 0.5 * (1.0 - full[0].data), atol=1e-12)
    assert sets['small'][1].equals(render_multiview(generate_scene(2, scale=0.5), rig)[0][1])
    for views in sets.values():
        assert len(views) == 4
    assert not sets['big'][3].equals(Image(1.0 - 0.5 * (1.0 - full[3].data)))


def test_msgd_needs_room_for_three_scales():
    with pytest.raises(ValueError):
        MrcConfig(resize_res=16)
    assert MrcConfig(resize_res=16, metric=MetricKind.L1).resize_res == 16


def test_report_smoothness_is_taken_on_mean_curve():
    report = metric_comparison_report([0, 1], 'patch', [0, 8, 16], seed=1, metrics=(MetricKind.L1,))
    assert report.smoothness[MetricKind.L1] == smoothness(report.mean_curves[MetricKind.L1])


def test_mrc_or_none(gt_views, rig):
    assert mrc_or_none(gt_views, rig.poses) == compute_mrc(gt_views, rig.poses).score
    assert mrc_or_none([Image.white(32)] * 4, rig.poses) is None


DISTORTION_LEVELS = [
    ('patch', [0, 4, 8, 12, 16]),
    ('azimuth', [0, 3.6, 7.2, 10.8]),
    ('elevation', [0, 4, 8, 12]),
]


@pytest.mark.slow
@pytest.mark.parametrize('kind,levels', DISTORTION_LEVELS)
def test_distortion_curves_rise_for_every_scene(kind, levels):
    report = metric_comparison_report([0, 1, 2, 3], kind, levels, seed=0)
    for metric, curves in report.curves.items():
        assert len(curves) == 4
        for curve in curves:
            s = curve.scores
            assert all(b >= a for a, b in zip(s, s[1:])), (metric, curve.prompt, s)
            assert s[-1] > s[0], (metric, curve.prompt, s)


@pytest.mark.slow
def test_msgd_patch_curve_is_smoother_than_psnr():
    report = metric_comparison_report([0, 1, 2, 3], 'patch', [0, 4, 8, 12, 16], seed=0)
    assert report.smoothness[MetricKind.MSGD] < report.smoothness[MetricKind.PSNR_NEG]


@pytest.mark.slow
def test_bbox_normalization_stabilizes_small_objects():
    result = bbox_ablation(list(range(16)))
    assert result['count'] >= 8
    assert abs(result['norm_small'] - result['norm_big']) <= 0.1 * result['norm_big']
    assert result['unnorm_small'] <= 0.6 * result['unnorm_big']
