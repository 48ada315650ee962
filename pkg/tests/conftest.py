import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from auggs.core import Camera, GaussianCloud, inverse_sigmoid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_camera(width=16, height=16, fx=18.0, position=(0.0, -4.0, 1.2)) -> Camera:
    return Camera.look_at(position=position, target=(0, 0, 0), up=(0, 0, 1),
                          width=width, height=height, fx=fx, fy=fx)


def make_cloud(rng, count=6, sh_degree=1, opacity=(0.3, 0.85), scale=(0.15, 0.45),
               spread=1.0, dc=(-0.9, 0.9), rest=0.08) -> GaussianCloud:
    """Random cloud with colors kept away from the clamp boundaries."""
    k = (sh_degree + 1) ** 2
    sh = np.zeros((count, k, 3))
    sh[:, 0, :] = rng.uniform(*dc, (count, 3))
    if k > 1:
        sh[:, 1:, :] = rng.uniform(-rest, rest, (count, k - 1, 3))
    return GaussianCloud(
        centers=rng.uniform(-spread, spread, (count, 3)),
        rotations=rng.normal(size=(count, 4)),
        log_scales=np.log(rng.uniform(*scale, (count, 3))),
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity, count)),
        sh=sh,
        sh_degree=sh_degree,
    )


@pytest.fixture
def camera():
    return make_camera()
