"""Shared fixtures: small meshes and scenarios sized for fast unit tests."""
import numpy as np
import pytest

from retraction import fem
from retraction.harness import ScenarioConfig, build_scenario


@pytest.fixture(scope="session")
def small_mesh():
    return fem.build_grid_mesh(dims=(60.0, 60.0, 5.0), resolution=(7, 7, 2))


@pytest.fixture(scope="session")
def small_config():
    return ScenarioConfig(
        name="unit",
        dims=(60.0, 60.0, 5.0),
        resolution=(7, 7, 2),
        roi_center=(15.0, 0.0),
        roi_radius=6.0,
        seed=0,
        ap_rects=[(-30.0, -30.0, -20.0, 30.0)],
    )


@pytest.fixture(scope="session")
def small_scenario(small_config):
    return build_scenario(small_config)


def grid_cloud(n=20, spacing=2.0, z=0.0):
    """Planar grid point cloud; NN distance to a z-offset copy equals the offset."""
    from retraction.sensing import PointCloud

    xs = np.arange(n) * spacing
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), np.full(n * n, z)], axis=1)
    return PointCloud(points=pts)
