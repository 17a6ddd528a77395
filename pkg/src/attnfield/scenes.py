"""Procedural toy scenes with analytic density/color fields, an independent
midpoint-rule oracle renderer, and dataset persistence.

The oracle path is deliberately separate from the differentiable renderer:
ground truth comes from plain-numpy quadrature over closed-form fields,
so model-side bugs cannot leak into the reference images.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, make_rays_grid, project_point, sample_points_midpoint
from .render import RenderedImage

_HOLDOUT_EVERY = 8  # every 8th view is test (1/8 held out)


@dataclass(frozen=True)
class Primitive:
    """Emissive sphere or axis-aligned box with a smoothstep edge shell."""

    kind: str                 # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray          # sphere: (radius,); box: half-extents (3,)
    amplitude: float          # peak density, >= 0
    albedo: np.ndarray        # rgb in [0, 1]
    falloff: float = 0.1      # edge shell width, world units (0 = hard edge)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "size", np.atleast_1d(np.asarray(self.size, dtype=np.float64)))
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64))
        if self.amplitude < 0:
            raise ValueError("density amplitude must be nonnegative")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0,1]^3")

    def signed_distance(self, pts):
        rel = pts - self.center
        if self.kind == "sphere":
            return np.linalg.norm(rel, axis=-1) - self.size[0]
        if self.kind == "box":
            return np.max(np.abs(rel) - self.size, axis=-1)
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def density_profile(self, pts):
        """Smoothstep shell: 1 inside, 0 outside, C1 across the boundary."""
        d = self.signed_distance(pts)
        if self.falloff <= 0.0:
            return np.where(d < 0.0, 1.0, 0.0)
        u = np.clip(0.5 - d / self.falloff, 0.0, 1.0)
        return u * u * (3.0 - 2.0 * u)


@dataclass
class Scene:
    primitives: list
    cameras: list = field(default_factory=list)
    bounds: float = 2.0       # world half-extent containing all primitives


@dataclass
class Dataset:
    scene: Scene
    images: np.ndarray        # (V, H, W, 3) float in [0, 1]
    train_ids: list
    test_ids: list

    @property
    def cameras(self):
        return self.scene.cameras


def analytic_field_eval(scene, pts):
    """(sigma, rgb) of the analytic field at pts (..., 3).

    sigma sums primitive contributions; rgb is the density-weighted albedo
    (falling back to the strongest primitive's albedo where all weights
    vanish, which compositing multiplies by zero anyway)."""
    pts = np.asarray(pts, dtype=np.float64)
    shape = pts.shape[:-1]
    sigma = np.zeros(shape)
    weighted = np.zeros(shape + (3,))
    for prim in scene.primitives:
        w = prim.amplitude * prim.density_profile(pts)
        sigma += w
        weighted += w[..., None] * prim.albedo
    if scene.primitives:
        strongest = max(scene.primitives, key=lambda p: p.amplitude)
        fallback = np.broadcast_to(strongest.albedo, shape + (3,))
    else:
        fallback = np.zeros(shape + (3,))
    safe = np.maximum(sigma, 1e-300)
    rgb = np.where(sigma[..., None] > 0.0, weighted / safe[..., None], fallback)
    return sigma, rgb


def oracle_field_fn(scene):
    """Adapt the analytic field to the renderer's field interface."""

    def fn(points, dirs, depths_norm):
        return analytic_field_eval(scene, points)

    return fn


def oracle_render(scene, cam, n_samples=256):
    """RNG-free ground truth: midpoint quadrature of the analytic field."""
    if n_samples < 64:
        raise ValueError(f"oracle rendering needs >= 64 samples, got {n_samples}")
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w]
    origins, dirs = make_rays_grid(cam, xs.reshape(-1).astype(np.float64),
                                   ys.reshape(-1).astype(np.float64))
    depths = sample_points_midpoint(cam.t_near, cam.t_far, n_samples)
    pts = origins[:, None, :] + depths[None, :, None] * dirs[:, None, :]
    sigma, rgb = analytic_field_eval(scene, pts)
    deltas = np.concatenate([np.diff(depths), [cam.t_far - depths[-1]]])
    optical = sigma * deltas
    accum = np.cumsum(optical, axis=-1)
    trans = np.exp(-(accum - optical))
    weights = trans * (1.0 - np.exp(-optical))
    color = (weights[..., None] * rgb).sum(axis=-2)
    return RenderedImage(np.clip(color, 0.0, 1.0).reshape(h, w, 3),
                         weights.sum(axis=-1).reshape(h, w))


def _look_at_camera(position, target, width, height, focal_px, t_near, t_far):
    forward = target - position
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    # columns are the camera x (right), y (down), z (forward) axes in world frame
    R = np.stack([right, down, forward], axis=1)
    return Camera(focal_px, focal_px, (width - 1) / 2.0, (height - 1) / 2.0,
                  R, position, width, height, t_near, t_far)


_SCENE_BUILDERS = {}


def _builder(name):
    def wrap(fn):
        _SCENE_BUILDERS[name] = fn
        return fn
    return wrap


@_builder("sphere")
def _sphere_scene(rng):
    """A sphere with colored surface markers. The markers break the
    rotational symmetry so that views from different directions carry
    genuinely different information (a bare sphere looks identical from
    everywhere, which makes view-difficulty comparisons degenerate)."""
    prims = [Primitive("sphere", (0.0, 0.0, 0.0), (1.0,), 8.0,
                       (0.85, 0.3, 0.25), 0.25)]
    marker_dirs = [(1.0, 0.0, 0.0), (-0.3, 0.9, 0.3), (0.0, -0.6, -0.8),
                   (-0.6, -0.4, 0.7)]
    marker_albedos = [(0.15, 0.7, 0.75), (0.95, 0.85, 0.2),
                      (0.2, 0.3, 0.9), (0.25, 0.8, 0.3)]
    for direction, albedo in zip(marker_dirs, marker_albedos):
        u = np.asarray(direction) / np.linalg.norm(direction)
        prims.append(Primitive("sphere", u, (0.3,), 24.0, albedo, 0.15))
    return prims


@_builder("two-blobs")
def _two_blobs_scene(rng):
    return [
        Primitive("sphere", (-0.7, 0.0, 0.1), (0.6,), 6.0, (0.9, 0.2, 0.2), 0.3),
        Primitive("sphere", (0.7, 0.1, -0.1), (0.55,), 6.0, (0.2, 0.35, 0.9), 0.3),
    ]


@_builder("box-grid")
def _box_grid_scene(rng):
    prims = []
    colors = [(0.9, 0.3, 0.2), (0.2, 0.8, 0.3), (0.25, 0.35, 0.9), (0.9, 0.8, 0.2)]
    offsets = [(-0.7, -0.7), (-0.7, 0.7), (0.7, -0.7), (0.7, 0.7)]
    for (ox, oy), c in zip(offsets, colors):
        prims.append(Primitive("box", (ox, oy, 0.0), (0.35, 0.35, 0.35), 7.0, c, 0.2))
    return prims


def generate_toy_scene(spec_name, camera_count, rng, width=64, height=64,
                       hemisphere=False):
    """Procedural scene with cameras on a (jittered) sphere looking at the origin."""
    if spec_name not in _SCENE_BUILDERS:
        raise ValueError(f"unknown scene spec {spec_name!r}; "
                         f"known: {sorted(_SCENE_BUILDERS)}")
    primitives = _SCENE_BUILDERS[spec_name](rng)
    cameras = []
    focal = 1.2 * max(width, height)
    for _ in range(camera_count):
        radius = 4.0 + 0.4 * rng.uniform(-1.0, 1.0)
        azim = rng.uniform(0.0, 2.0 * np.pi)
        lo = 0.05 if hemisphere else -0.9
        elev = np.arcsin(rng.uniform(lo, 0.9))
        pos = radius * np.array([np.cos(elev) * np.cos(azim),
                                 np.cos(elev) * np.sin(azim),
                                 np.sin(elev)])
        cameras.append(_look_at_camera(pos, np.zeros(3), width, height, focal,
                                       radius - 2.0, radius + 2.0))
    scene = Scene(primitives, cameras)
    for cam in cameras:
        if not project_point(np.zeros(3), cam).in_bounds:
            raise RuntimeError("generated camera does not see the scene origin")
    return scene


def train_test_split(view_count):
    """Deterministic 1/8 holdout: every 8th view index is test."""
    ids = list(range(view_count))
    test = ids[::_HOLDOUT_EVERY]
    train = [i for i in ids if i % _HOLDOUT_EVERY]
    return train, test


def render_dataset_images(scene, n_samples=256):
    return np.stack([oracle_render(scene, cam, n_samples).rgb for cam in scene.cameras])


def _camera_to_dict(cam):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "R": cam.R.reshape(-1).tolist(), "t": cam.t.tolist(),
            "width": cam.width, "height": cam.height,
            "t_near": cam.t_near, "t_far": cam.t_far}


def _camera_from_dict(d):
    return Camera(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["R"]).reshape(3, 3),
                  np.array(d["t"]), d["width"], d["height"], d["t_near"], d["t_far"])


def save_dataset(scene, images, path):
    """Write manifest + 8-bit PNGs. Camera floats round-trip exactly
    (JSON uses shortest-repr decimal serialization)."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    train, test = train_test_split(len(scene.cameras))
    manifest = {
        "bounds": scene.bounds,
        "primitives": [{"kind": p.kind, "center": p.center.tolist(),
                        "size": p.size.tolist(), "amplitude": p.amplitude,
                        "albedo": p.albedo.tolist(), "falloff": p.falloff}
                       for p in scene.primitives],
        "views": [],
        "train_ids": train,
        "test_ids": test,
    }
    for i, (cam, img) in enumerate(zip(scene.cameras, images)):
        rel = f"images/view_{i:04d}.png"
        quantized = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
        Image.fromarray(quantized).save(path / rel)
        entry = _camera_to_dict(cam)
        entry["image"] = rel
        manifest["views"].append(entry)
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(path):
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise IOError(f"missing dataset manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    primitives = [Primitive(p["kind"], p["center"], p["size"], p["amplitude"],
                            p["albedo"], p["falloff"]) for p in manifest["primitives"]]
    cameras, images = [], []
    for entry in manifest["views"]:
        cam = _camera_from_dict(entry)
        img_path = path / entry["image"]
        if not img_path.exists():
            raise IOError(f"missing dataset image: {img_path}")
        img = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
        if img.shape[:2] != (cam.height, cam.width):
            raise IOError(f"{img_path}: image dims {img.shape[:2]} do not match manifest")
        cameras.append(cam)
        images.append(img)
    scene = Scene(primitives, cameras, manifest["bounds"])
    return Dataset(scene, np.stack(images), manifest["train_ids"], manifest["test_ids"])
