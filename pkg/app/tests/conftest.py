"""
Shared fixtures: small cameras, random Gaussian scenes and a generated dataset
"""
import numpy as np
import pytest

from app.models.camera import CameraIntrinsics
from app.models.gaussian import GaussianMap, logit
from app.schemas.config import CameraSpec, SimSceneSpec, TrajectoryKindEnum, TrajectorySpec
from app.services.simulation_service import SimulationService


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end pipeline tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intrinsics():
    """16 x 12 image with the principal point at the center"""
    return CameraIntrinsics(fx=20.0, fy=20.0, cx=7.5, cy=5.5, width=16, height=12)


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(fx=40.0, fy=40.0, cx=15.5, cy=11.5, width=32, height=24)


def random_map(rng, n, z_range=(2.0, 4.0), spread=0.6, log_scale=(-2.5, -1.5),
               opacity=(0.1, 0.9), isotropic=False) -> GaussianMap:
    """Primitives in front of an identity camera looking down +z"""
    z = rng.uniform(*z_range, size=n)
    xy = rng.uniform(-spread, spread, size=(n, 2)) * z[:, None]
    means = np.column_stack([xy, z])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    if isotropic:
        log_scales = np.repeat(rng.uniform(*log_scale, size=(n, 1)), 3, axis=1)
    else:
        log_scales = rng.uniform(*log_scale, size=(n, 3))
    opacities = rng.uniform(*opacity, size=n)
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    gmap = GaussianMap()
    gmap.append(means, quats, log_scales, logit(opacities), colors)
    return gmap


@pytest.fixture
def make_map(rng):
    def factory(n=8, **kwargs):
        return random_map(rng, n, **kwargs)
    return factory


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six frames of a small room, walking straight ahead"""
    root = tmp_path_factory.mktemp("dataset")
    service = SimulationService(
        SimSceneSpec(n_objects=3, seed=7),
        TrajectorySpec(kind=TrajectoryKindEnum.STRAIGHT, frames=6, speed=0.03),
        CameraSpec(width=40, height=30, fov_deg=70.0),
    )
    return service.generate(root)
