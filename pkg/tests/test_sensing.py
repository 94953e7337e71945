"""Virtual sensing: cameras, point clouds, visibility, grids, reachability."""
import numpy as np
import pytest

from retraction import fem
from retraction.sensing import (
    CameraModel,
    GraspGrid,
    InvalidMarginError,
    PointCloud,
    ROI,
    build_grasp_grid,
    capture_point_cloud,
    ray_hits,
    reachable,
    roi_sample_points,
    roi_visibility,
)


def test_camera_looking_at_builds_orthonormal_frame():
    cam = CameraModel.looking_at((0.0, 0.0, 100.0), (0.0, 0.0, 0.0))
    R = cam.rotation
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.allclose(R[:, 2], [0.0, 0.0, -1.0])  # forward towards the target


def test_camera_fov_validation():
    with pytest.raises(ValueError):
        CameraModel(position=np.zeros(3), rotation=np.eye(3), fov=180.0)


def test_ray_hits_single_triangle():
    tri = np.array([[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 4.0, 0.0]]])
    origins = np.array([1.0, 1.0, 5.0])
    t = ray_hits(origins, np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]), tri)
    assert t[0] == pytest.approx(5.0)
    assert np.isinf(t[1])  # wrong direction
    miss = ray_hits(np.array([10.0, 10.0, 5.0]), np.array([[0.0, 0.0, -1.0]]), tri)
    assert np.isinf(miss[0])


def test_point_cloud_lands_on_top_surface(small_mesh):
    cam = CameraModel.looking_at((0.0, 0.0, 90.0), (0.0, 0.0, 0.0), fov=30.0)
    pc = capture_point_cloud(small_mesh, cam, rays=(16, 16))
    assert len(pc) > 0
    assert np.allclose(pc.points[:, 2], small_mesh.top_z, atol=1e-6)


def test_point_cloud_noise_is_seeded(small_mesh):
    cam = CameraModel.looking_at((0.0, 0.0, 90.0), (0.0, 0.0, 0.0), fov=30.0)
    a = capture_point_cloud(small_mesh, cam, noise_sigma=0.1,
                            rng=np.random.default_rng(7))
    b = capture_point_cloud(small_mesh, cam, noise_sigma=0.1,
                            rng=np.random.default_rng(7))
    assert np.array_equal(a.points, b.points)


def test_point_cloud_xyz_roundtrip(tmp_path):
    pc = PointCloud(points=np.array([[1.0, 2.0, 3.0], [-0.5, 0.0, 4.25]]))
    path = tmp_path / "cloud.xyz"
    pc.save_xyz(path)
    back = PointCloud.load_xyz(path)
    assert np.allclose(back.points, pc.points, atol=1e-6)


def test_roi_samples_cover_the_disk():
    roi = ROI(center=np.array([5.0, -3.0, 0.0]), radius=8.0)
    pts = roi_sample_points(roi, 200)
    r = np.linalg.norm(pts[:, :2] - roi.center[:2], axis=1)
    assert len(pts) == 200
    assert r.max() <= 8.0 + 1e-9
    assert r.min() < 1.0  # samples reach the center region


def test_roi_validation():
    with pytest.raises(ValueError):
        ROI(center=np.zeros(3), radius=0.0)


def test_roi_visibility_occluded_and_clear(small_mesh):
    endo = CameraModel.looking_at((80.0, 0.0, 60.0), (0.0, 0.0, -2.5))
    under = ROI(center=np.array([0.0, 0.0, small_mesh.bottom_z]), radius=6.0)
    assert roi_visibility(small_mesh, under, endo) == 0.0
    outside = ROI(center=np.array([200.0, 0.0, 0.0]), radius=6.0)
    assert roi_visibility(small_mesh, outside, endo) == 1.0
    assert roi_visibility(None, under, endo) == 1.0


def test_grasp_grid_geometry(small_mesh):
    grid = build_grasp_grid(small_mesh, margin=10.0)
    assert len(grid) == 25
    assert np.allclose(grid.points[:, 2], small_mesh.top_z)
    assert grid.lateral().min() == pytest.approx(-20.0)
    assert grid.lateral().max() == pytest.approx(20.0)
    with pytest.raises(InvalidMarginError):
        build_grasp_grid(small_mesh, margin=30.0)


def test_reachability_side_rule():
    assert reachable((0.0, 5.0, 0.0), "psm1")
    assert not reachable((0.0, 5.0, 0.0), "psm2")
    assert reachable((0.0, -5.0, 0.0), "psm2")
    assert not reachable((0.0, -5.0, 0.0), "psm1")
    assert reachable((3.0, 0.0, 0.0), "psm1") and reachable((3.0, 0.0, 0.0), "psm2")


def test_refined_ray_grid_contains_coarse_rays(small_mesh):
    # inclusive fov endpoints: the (2n-1) grid revisits every coarse ray
    cam = CameraModel.looking_at((0.0, 0.0, 90.0), (0.0, 0.0, 0.0), fov=30.0)
    coarse = capture_point_cloud(small_mesh, cam, rays=(9, 9))
    fine = capture_point_cloud(small_mesh, cam, rays=(17, 17))
    from scipy.spatial import cKDTree

    d, _ = cKDTree(fine.points).query(coarse.points)
    assert d.max() < 1e-9
