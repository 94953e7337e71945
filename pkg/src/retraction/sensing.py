"""Virtual sensors and geometric reasoning over the tissue mesh.

Depth-camera point clouds, ray-cast ROI visibility from the endoscope,
the 5x5 grasp-candidate grid and the side-of-plane arm reachability rule.
All queries are stateless over immutable mesh snapshots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import TissueMesh

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

# side of the x-z plane each arm operates on (sign of y)
ARM_SIDE = {"psm1": 1.0, "psm2": -1.0}


class EmptyCloudError(ValueError):
    pass


class InvalidMarginError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    position: np.ndarray  # (3,) mm
    rotation: np.ndarray  # (3,3), columns = camera right / down / forward in world
    fov: float = 60.0  # degrees, full angle
    image_size: tuple[int, int] = (32, 32)
    role: str = "depth"

    def __post_init__(self):
        if not (0.0 < self.fov < 180.0):
            raise ValueError("fov must lie in (0, 180) degrees")

    @classmethod
    def looking_at(cls, position, target, up=(0.0, 0.0, 1.0), fov=60.0,
                   image_size=(32, 32), role="depth") -> "CameraModel":
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        forward = forward / np.linalg.norm(forward)
        up = np.asarray(up, dtype=float)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, (0.0, 1.0, 0.0))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.column_stack([right, down, forward])
        return cls(position=position, rotation=rot, fov=float(fov),
                   image_size=tuple(image_size), role=role)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) mm
    frame: str = "tissue"

    def __len__(self) -> int:
        return len(self.points)

    def save_xyz(self, path) -> None:
        with open(path, "w") as fh:
            for p in self.points:
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")

    @classmethod
    def load_xyz(cls, path, frame="tissue") -> "PointCloud":
        pts = []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if parts:
                    pts.append([float(v) for v in parts[:3]])
        return cls(points=np.array(pts).reshape(-1, 3), frame=frame)


@dataclass(frozen=True)
class ROI:
    center: np.ndarray  # (3,) mm; sits on/under the tissue bottom plane
    radius: float = 10.0  # mm

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValueError("ROI radius must be positive")


@dataclass(frozen=True)
class GraspGrid:
    points: np.ndarray  # (25, 3) mm on the top surface, row-major in (y, x)
    margin: float

    def __len__(self) -> int:
        return len(self.points)

    def lateral(self) -> np.ndarray:
        return self.points[:, :2]


def ray_hits(origins: np.ndarray, dirs: np.ndarray, triangles: np.ndarray,
             eps: float = 1e-9) -> np.ndarray:
    """Nearest ray/triangle intersection parameter per ray (inf = no hit).

    Moller-Trumbore over all ray x triangle pairs, chunked to bound memory.
    `origins` may be (3,) for a shared origin.
    """
    dirs = np.atleast_2d(dirs)
    nr = dirs.shape[0]
    if origins.ndim == 1:
        origins = np.broadcast_to(origins, (nr, 3))
    if len(triangles) == 0:
        return np.full(nr, np.inf)
    v0 = triangles[:, 0]
    e1 = triangles[:, 1] - v0
    e2 = triangles[:, 2] - v0
    best = np.full(nr, np.inf)
    chunk = max(1, int(500_000 // max(len(triangles), 1)))
    for s in range(0, nr, chunk):
        d = dirs[s : s + chunk]  # (R,3)
        o = origins[s : s + chunk]
        p = np.cross(d[:, None, :], e2[None, :, :])  # (R,T,3)
        det = np.einsum("tj,rtj->rt", e1, p)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o[:, None, :] - v0[None, :, :]
        u = np.einsum("rtj,rtj->rt", tvec, p) * inv
        q = np.cross(tvec, e1[None, :, :])
        v = np.einsum("rj,rtj->rt", d, q) * inv
        t = np.einsum("tj,rtj->rt", e2, q) * inv
        hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t > eps)
        t = np.where(hit, t, np.inf)
        best[s : s + chunk] = t.min(axis=1)
    return best


def capture_point_cloud(mesh: TissueMesh, cam: CameraModel, rays=(24, 24),
                        noise_sigma: float = 0.0,
                        rng: np.random.Generator | None = None) -> PointCloud:
    """One point per camera ray whose first hit is a tissue surface triangle.

    The ray grid uses inclusive endpoints across the field of view, so a
    refined grid (2n-1 rays per axis) contains every coarse ray.
    """
    nu, nv = int(rays[0]), int(rays[1])
    half = np.tan(np.radians(cam.fov) / 2.0)
    us = np.linspace(-half, half, nu)
    vs = np.linspace(-half, half, nv)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    d_cam = np.stack([uu.ravel(), vv.ravel(), np.ones(nu * nv)], axis=1)
    d_world = d_cam @ cam.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)

    tris = mesh.current_positions[mesh.surface_triangles()]
    t = ray_hits(cam.position, d_world, tris)
    hit = np.isfinite(t)
    pts = cam.position[None, :] + t[hit, None] * d_world[hit]
    if noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return PointCloud(points=pts, frame="tissue")


def roi_sample_points(roi: ROI, samples: int) -> np.ndarray:
    """Deterministic sunflower covering of the ROI disk (upward-facing cap)."""
    i = np.arange(samples)
    r = roi.radius * np.sqrt((i + 0.5) / samples)
    th = i * GOLDEN_ANGLE
    pts = np.stack([r * np.cos(th), r * np.sin(th), np.zeros(samples)], axis=1)
    return pts + roi.center[None, :]


def roi_visibility(mesh: TissueMesh | None, roi: ROI, endoscope: CameraModel,
                   samples: int = 200) -> float:
    """Fraction of ROI sample points with an unobstructed ray to the endoscope."""
    pts = roi_sample_points(roi, samples)
    if mesh is None:
        return 1.0
    tris = mesh.current_positions[mesh.surface_triangles()]
    if len(tris) == 0:
        return 1.0
    d = endoscope.position[None, :] - pts
    dist = np.linalg.norm(d, axis=1)
    d = d / dist[:, None]
    t = ray_hits(pts, d, tris)
    visible = t >= dist - 1e-6
    return float(visible.sum()) / samples


def reachable(point, arm: str) -> bool:
    """Same-side rule: an arm reaches points on its side of the x-z plane.

    Points on the plane (y = 0) are reachable by both arms.
    """
    side = ARM_SIDE[arm.lower()]
    y = float(point[1])
    return y == 0.0 or np.sign(y) == side


def build_grasp_grid(mesh: TissueMesh, margin: float = 10.0) -> GraspGrid:
    """25 candidate grasp points, 5x5 evenly spaced inside the lateral margin."""
    lx, ly = mesh.dims[0], mesh.dims[1]
    if margin >= min(lx, ly) / 2.0:
        raise InvalidMarginError(f"margin {margin} too large for extents {lx}x{ly}")
    xs = np.linspace(-lx / 2 + margin, lx / 2 - margin, 5)
    ys = np.linspace(-ly / 2 + margin, ly / 2 - margin, 5)
    z = mesh.top_z
    pts = np.array([(x, y, z) for y in ys for x in xs])
    return GraspGrid(points=pts, margin=float(margin))
