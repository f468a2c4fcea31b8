import numpy as np
import pytest
import torch

from velocity_splat.scene import CameraModel, CanonicalScene, Gaussian3D

torch.set_num_threads(1)

IDENTITY_Q = (1.0, 0.0, 0.0, 0.0)


def pinhole(f=100.0, cx=50.0, cy=50.0, width=100, height=100, R=None, T=(0.0, 0.0, 0.0)):
    K = [[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]]
    return CameraModel(K, np.eye(3) if R is None else R, T, width, height)


def gaussian(mu, scale=0.05, color=(1.0, 0.0, 0.0), opacity=0.8, rotation=IDENTITY_Q):
    s = np.full(3, scale) if np.isscalar(scale) else scale
    return Gaussian3D(np.asarray(mu, float), s, np.asarray(rotation, float), np.asarray(color, float), opacity)


def scene_of(*gs, background=(0.0, 0.0, 0.0)):
    return CanonicalScene.from_gaussians(gs, background=background)


def random_scene(rng, n, center=(0.0, 0.0, 3.0), spread=0.3, scale=(0.05, 0.15)):
    gs = []
    for _ in range(n):
        q = rng.normal(size=4)
        gs.append(Gaussian3D(np.asarray(center) + rng.uniform(-spread, spread, 3), rng.uniform(*scale, size=3),
                             q / np.linalg.norm(q), rng.uniform(0, 1, 3), rng.uniform(0.3, 0.95)))
    return CanonicalScene.from_gaussians(gs, background=rng.uniform(0, 1, 3))


@pytest.fixture
def cam100():
    return pinhole()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
