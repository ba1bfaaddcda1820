import numpy as np
import pytest

from errors import DimensionMismatch, PoseDegeneracy
from imgproc import Image
from reconstructor import (ReconConfig, StackedRenderOperator, basis_half_extent, reconstruct, rerender,
                           view_residuals)
from sceneworld import CameraPose, generate_scene, patch_distort, render_multiview, render_view


def test_all_white_views_reconstruct_to_empty_grid(rig):
    views = [Image.white(32)] * 4
    result = reconstruct(views, rig.poses)
    assert not result.grid.density.any()
    assert result.diagnostics.iterations == 0
    assert result.diagnostics.converged
    assert result.diagnostics.active_unknowns == 0


@pytest.mark.parametrize('intervals', [0, 4])
def test_ground_truth_views_are_reproduced(gt_views, rig, intervals):
    result = reconstruct(gt_views, rig.poses, 16, ReconConfig(basis_intervals=intervals))
    rendered = rerender(result.grid, rig.poses, 32)
    assert max(view_residuals(gt_views, rendered)) <= 5e-3
    assert result.grid.density.min() >= 0.0 and result.grid.density.max() <= 1.0


def test_views_at_non_multiple_resolution_are_reproduced(scene, rig):
    views = [render_view(scene, pose, 24) for pose in rig.poses]
    result = reconstruct(views, rig.poses, 16, ReconConfig(basis_intervals=0))
    rendered = rerender(result.grid, rig.poses, 24)
    assert all(v.width == 24 for v in rendered)
    assert max(view_residuals(views, rendered)) <= 5e-3


@pytest.mark.parametrize('intervals,view_res', [(0, 32), (4, 32), (0, 24), (4, 24)])
def test_operator_adjoint(rig, rng, intervals, view_res):
    op = StackedRenderOperator(rig.poses, 16, view_res, intervals)
    x = rng.standard_normal(op.n_unknowns)
    y = rng.standard_normal(op.n_pixels)
    assert np.dot(op.matvec(x), y) == pytest.approx(np.dot(x, op.rmatvec(y)), rel=1e-10)


@pytest.mark.parametrize('intervals', [0, 4])
def test_normal_operator_matches_explicit_product(rig, rng, intervals):
    op = StackedRenderOperator(rig.poses, 16, 32, intervals)
    x = rng.standard_normal(op.n_unknowns)
    expected = op.rmatvec(op.matvec(x)) + 1e-3 * x
    assert np.allclose(op.normal_matvec(x, 1e-3), expected)


def test_linear_operator_shape(rig):
    assert StackedRenderOperator(rig.poses, 16, 32).as_linear_operator().shape == (4 * 32 * 32, 16 ** 3)
    assert StackedRenderOperator(rig.poses, 16, 32, 4).as_linear_operator().shape == (4 * 32 * 32, 125)


def test_basis_shrinks_for_small_objects(rig):
    big, _ = render_multiview(generate_scene(1), rig)
    small, _ = render_multiview(generate_scene(1, scale=0.5), rig)
    assert basis_half_extent(big) == 0.5
    assert basis_half_extent(small) <= 0.25
    assert basis_half_extent([Image.white(32)] * 4) == 0.5 / 8


def test_hull_excludes_unknowns_seen_as_background(gt_views, rig):
    op = StackedRenderOperator(rig.poses, 16, 32, 4)
    mask = op.hull_mask(gt_views, 0.999)
    assert 0 < mask.sum() < op.n_unknowns
    assert op.hull_mask(gt_views, 1.0).all()
    assert not op.hull_mask([Image.white(32)] * 4, 0.999).any()


@pytest.mark.parametrize('prompt', [0, 1, 2, 3])
def test_inconsistent_view_raises_data_residual(rig, prompt):
    views, _ = render_multiview(generate_scene(prompt), rig)
    consistent = reconstruct(views, rig.poses).diagnostics.data_residual
    distorted = list(views)
    distorted[3] = patch_distort(views[3], rig.view_res // 4, seed=prompt)
    assert reconstruct(distorted, rig.poses).diagnostics.data_residual > consistent


def test_objective_history_decreases(gt_views, rig):
    result = reconstruct(gt_views, rig.poses, 16, ReconConfig(max_iters=20), track_history=True)
    history = np.array(result.diagnostics.objective_history)
    assert len(history) == result.diagnostics.iterations
    assert np.all(np.diff(history) <= 1e-9 * np.abs(history[:-1]).max())


def test_iteration_cap_is_reported(gt_views, rig):
    result = reconstruct(gt_views, rig.poses, 16, ReconConfig(max_iters=2, tol=1e-14))
    assert result.diagnostics.iterations <= 2
    assert not result.diagnostics.converged


def test_duplicate_poses_are_degenerate(gt_views):
    poses = [CameraPose(0, 20)] * 2 + [CameraPose(90, 20), CameraPose(180, 20)]
    with pytest.raises(PoseDegeneracy):
        reconstruct(gt_views, poses)


def test_wrong_view_count(gt_views, rig):
    with pytest.raises(DimensionMismatch):
        reconstruct(gt_views[:3], rig.poses[:3])


def test_mismatched_view_sizes(gt_views, rig):
    views = gt_views[:3] + [Image.white(16)]
    with pytest.raises(DimensionMismatch):
        reconstruct(views, rig.poses)


def test_recon_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(lambda_reg=0.0)
    with pytest.raises(ValueError):
        ReconConfig(max_iters=0)
    with pytest.raises(ValueError):
        ReconConfig(basis_intervals=-1)
