"""Pinhole cameras, rays, projection into source views, and pose distance.

Convention: camera-to-world rotation ``R``, camera center ``t`` in world
units, +z is the camera forward axis, image origin at the top-left, and
pixel (cx, cy) is the principal point. All functions are pure.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # 3x3 camera-to-world rotation
    t: np.ndarray  # camera center, world units
    width: int
    height: int
    t_near: float
    t_far: float

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
            raise ValueError("camera rotation determinant is not +1")
        if not (0.0 < self.t_near < self.t_far):
            raise ValueError(f"invalid scene bounds: near={self.t_near}, far={self.t_far}")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit length

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class PixelUV:
    u: float
    v: float
    in_bounds: bool


def make_ray(cam, px, py):
    """World-space ray through continuous pixel (px, py)."""
    d_cam = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])
    d = cam.R @ d_cam
    return Ray(cam.t.copy(), d / np.linalg.norm(d))


def make_rays_grid(cam, pixels_x, pixels_y):
    """Vectorized ``make_ray``: pixels_x/pixels_y (K,) -> origins (K,3), dirs (K,3)."""
    d_cam = np.stack([(pixels_x - cam.cx) / cam.fx,
                      (pixels_y - cam.cy) / cam.fy,
                      np.ones_like(pixels_x, dtype=np.float64)], axis=-1)
    d = d_cam @ cam.R.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.t, d.shape).copy()
    return origins, d


def project_point(p, cam):
    """Project world point ``p`` into the camera image plane."""
    p = np.asarray(p, dtype=np.float64)
    pc = cam.R.T @ (p - cam.t)
    depth = pc[2]
    if np.linalg.norm(p - cam.t) < 1e-12:
        raise ValueError("cannot project the camera center (degenerate projection)")
    if depth <= 0.0:
        return PixelUV(np.inf, np.inf, False)
    u = cam.fx * pc[0] / depth + cam.cx
    v = cam.fy * pc[1] / depth + cam.cy
    in_bounds = (0.0 <= u <= cam.width - 1) and (0.0 <= v <= cam.height - 1)
    return PixelUV(float(u), float(v), bool(in_bounds))


def project_points(pts, cam):
    """Vectorized projection: pts (K,3) -> (u, v, depth, valid) arrays."""
    pc = (pts - cam.t) @ cam.R
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / depth + cam.cx
        v = cam.fy * pc[:, 1] / depth + cam.cy
    valid = (depth > 0.0) & (u >= 0.0) & (u <= cam.width - 1) & (v >= 0.0) & (v <= cam.height - 1)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    return u, v, depth, valid


def bilinear_sample(grid, uv):
    """Bilinear blend of the 4 pixel neighbours of ``uv`` in grid (H,W,C)."""
    if not uv.in_bounds:
        raise ValueError(f"bilinear_sample at out-of-bounds uv=({uv.u}, {uv.v})")
    h, w = grid.shape[:2]
    x0 = min(int(np.floor(uv.u)), w - 2)
    y0 = min(int(np.floor(uv.v)), h - 2)
    fx, fy = uv.u - x0, uv.v - y0
    return ((1 - fx) * (1 - fy) * grid[y0, x0] + fx * (1 - fy) * grid[y0, x0 + 1]
            + (1 - fx) * fy * grid[y0 + 1, x0] + fx * fy * grid[y0 + 1, x0 + 1])


def view_direction(cam, p):
    """Unit vector from the camera center toward world point ``p``."""
    v = np.asarray(p, dtype=np.float64) - cam.t
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("view direction undefined at the camera center")
    return v / n


def sample_points_stratified(t_near, t_far, n, rng):
    """One depth drawn uniformly from each of ``n`` equal bins of [t_near, t_far]."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    if not t_near < t_far:
        raise ValueError(f"invalid bounds: near={t_near}, far={t_far}")
    delta = (t_far - t_near) / n
    return t_near + (np.arange(n) + rng.random(n)) * delta


def sample_points_midpoint(t_near, t_far, n):
    """Deterministic bin midpoints; RNG-free ground-truth quadrature."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    delta = (t_far - t_near) / n
    return t_near + (np.arange(n) + 0.5) * delta


def rotation_angle(ra, rb):
    """Geodesic angle between two rotation matrices, in radians."""
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_difference(a, b, rotation_weight=1.0):
    """Translation distance plus weighted rotation geodesic angle.

    Symmetric, zero iff the poses coincide. ``rotation_weight`` converts
    radians to world units (default 1 world unit per radian).
    """
    return float(np.linalg.norm(a.t - b.t)) + rotation_weight * rotation_angle(a.R, b.R)
