import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mopred.generate import SceneConfig, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_scene_config():
    return SceneConfig(
        n_agents=3, n_polylines=6, t_past=6, t_future=8, n_points=8,
        map_style="straight", process_noise=0.02,
    )


@pytest.fixture
def tiny_scene(tiny_scene_config):
    return generate_scene(7, tiny_scene_config)


@pytest.fixture
def small_scene():
    config = SceneConfig(
        n_agents=4, n_polylines=8, t_past=10, t_future=12, n_points=10,
        map_style="mixed",
    )
    return generate_scene(3, config)
