import numpy as np
import pytest

from config import Config
from diffusion import NoiseSchedule
from nncore import init_params
from sceneworld import canonical_rig, generate_scene, render_multiview


@pytest.fixture(autouse=True)
def _quiet_progress(monkeypatch):
    monkeypatch.setattr(Config, 'SHOW_PROGRESS', False)


@pytest.fixture
def rig():
    return canonical_rig()


@pytest.fixture
def scene():
    return generate_scene(0, 16)


@pytest.fixture
def gt_views(scene, rig):
    views, _ = render_multiview(scene, rig)
    return views


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    """D=16、两层宽度 8 的小网络，3 个 prompt"""
    return init_params(16, 3, hidden=(8, 8), embed_dim=4, freq_count=3, seed=5)


@pytest.fixture
def short_schedule():
    return NoiseSchedule(t_train=10, steps=4)
