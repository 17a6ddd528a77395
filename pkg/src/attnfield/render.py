"""Discretized volume rendering: alpha compositing along rays, the squared
photometric loss, and full-image rendering.

Compositing uses segment lengths delta_i = t_{i+1} - t_i with the last
segment closed at the far bound, so total optical depth stays bounded by
the scene bounds. Rays with residual transmittance composite over black.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import make_rays_grid, sample_points_midpoint


@dataclass
class RaySamples:
    """Ordered samples along rays: depths (..., N) strictly increasing within
    [t_near, t_far], sigma (..., N) nonnegative, rgb (..., N, 3)."""

    depths: np.ndarray
    sigma: object            # DiffTensor or ndarray
    rgb: object              # DiffTensor or ndarray
    t_far: float


@dataclass
class RenderedImage:
    rgb: np.ndarray                      # (H, W, 3), clamped to [0, 1]
    opacity: np.ndarray = field(default=None)


def composite_ray(samples):
    """Front-to-back alpha compositing.

    Returns (color, opacity) with color (..., 3) and opacity (...,) as
    DiffTensors. Weights are w_i = T_i * alpha_i with
    T_i = exp(-sum_{j<i} sigma_j delta_j) and alpha_i = 1 - exp(-sigma_i delta_i).
    """
    depths = np.asarray(samples.depths, dtype=np.float64)
    if np.any(np.diff(depths, axis=-1) <= 0.0):
        raise ValueError("sample depths must be strictly increasing")
    deltas = np.concatenate(
        [np.diff(depths, axis=-1),
         np.maximum(samples.t_far - depths[..., -1:], 1e-12)], axis=-1)
    sigma = T.constant(samples.sigma)
    rgb = T.constant(samples.rgb)
    optical = sigma * deltas
    accum = T.cumsum(optical, axis=-1)
    trans = T.exp(-(accum - optical))          # T_i, transmittance before sample i
    alpha = 1.0 - T.exp(-optical)
    weights = trans * alpha
    color = T.tsum(T.reshape(weights, weights.shape + (1,)) * rgb, axis=-2)
    opacity = T.tsum(weights, axis=-1)
    return color, opacity


def composite_weights(depths, sigma, t_far):
    """Plain-numpy compositing weights, for invariant checks and analysis."""
    deltas = np.concatenate(
        [np.diff(depths, axis=-1), np.maximum(t_far - depths[..., -1:], 1e-12)], axis=-1)
    optical = sigma * deltas
    accum = np.cumsum(optical, axis=-1)
    trans = np.exp(-(accum - optical))
    return trans * (1.0 - np.exp(-optical)), trans


def rendering_loss(pred, gt):
    """Sum over the ray batch of squared color error ||pred - gt||^2."""
    pred = T.constant(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/target shapes differ: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return T.tsum(diff * diff)


def render_rays(cam, field_fn, pixels_x, pixels_y, n_samples, rng=None,
                sampler="stratified"):
    """Render a batch of pixel rays; returns (color, opacity) DiffTensors."""
    origins, dirs = make_rays_grid(cam, pixels_x, pixels_y)
    r_count = origins.shape[0]
    if sampler == "stratified":
        if rng is None:
            raise ValueError("stratified sampling requires an rng")
        delta = (cam.t_far - cam.t_near) / n_samples
        depths = cam.t_near + (np.arange(n_samples) + rng.random((r_count, n_samples))) * delta
    elif sampler == "midpoint":
        depths = np.broadcast_to(sample_points_midpoint(cam.t_near, cam.t_far, n_samples),
                                 (r_count, n_samples)).copy()
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    depths_norm = (depths - cam.t_near) / (cam.t_far - cam.t_near)
    sigma, rgb = field_fn(points, dirs, depths_norm)
    color, opacity = composite_ray(RaySamples(depths, sigma, rgb, cam.t_far))
    return color, opacity


def render_image(cam, field_fn, n_samples, rng=None, sampler="stratified",
                 ray_batch=1024):
    """Render every pixel of ``cam``; deterministic given seed and sampler.

    ``field_fn(points, dirs, depths_norm)`` maps (R,N,3), (R,3), (R,N) to
    (sigma, rgb); use ``model_field_fn`` or ``oracle_field_fn`` to adapt.
    """
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.reshape(-1).astype(np.float64)
    ys = ys.reshape(-1).astype(np.float64)
    out = np.empty((h * w, 3))
    acc = np.empty(h * w)
    for start in range(0, h * w, ray_batch):
        sl = slice(start, min(start + ray_batch, h * w))
        color, opacity = render_rays(cam, field_fn, xs[sl], ys[sl], n_samples,
                                     rng=rng, sampler=sampler)
        out[sl] = color.data
        acc[sl] = opacity.data
    return RenderedImage(np.clip(out, 0.0, 1.0).reshape(h, w, 3), acc.reshape(h, w))


def model_field_fn(model, sources):
    """Adapt a FieldModel plus conditioning views to the renderer interface."""

    def fn(points, dirs, depths_norm):
        return model.query_field(points, dirs, sources, depths_norm=depths_norm)

    return fn
