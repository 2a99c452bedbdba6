"""Discrete volume rendering: sampling, transmittance, alpha-compositing weights.

The compositing functions work on arrays whose last axis indexes samples
along a ray, so a single ray (N,) and a batch (R, N) are handled alike.
Radiance sources (ground-truth scenes and learned fields) are duck-typed:
they provide ``density(points)``, ``density_color(points)`` and a
``background`` colour.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, Pose, Rays, camera_rays, clip_rays_to_box, frustum_mask

DEPTH_EPS = 1e-6


@dataclass
class RaySamples:
    """Sample depths, spacings and field values along rays (last axis = samples)."""

    t: np.ndarray
    s: np.ndarray
    sigma: np.ndarray
    mu: Optional[np.ndarray] = None  # (..., N, 3)
    q: Optional[np.ndarray] = None  # (..., N, 3)
    v: Optional[np.ndarray] = None

    @property
    def n_samples(self) -> int:
        return self.t.shape[-1]


@dataclass
class RayWeights:
    alpha: np.ndarray
    weights: np.ndarray
    w_bg: np.ndarray


def sample_depths(near, far, n: int, rng: Optional[np.random.Generator] = None, stratified: bool = False):
    """Depths for ``n`` samples per ray: bin midpoints, or one uniform draw per bin."""
    if n < 2:
        raise ValueError("need at least two samples per ray")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    width = (far - near)[..., None] / n
    offsets = np.arange(n, dtype=np.float64)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        offsets = offsets + rng.random(near.shape + (n,))
    else:
        offsets = offsets + 0.5
    return near[..., None] + offsets * width


def sample_ray(ray: Rays, n: int, rng=None, stratified: bool = False) -> np.ndarray:
    return sample_depths(ray.near, ray.far, n, rng, stratified)


def spacings(t: np.ndarray, near, far) -> np.ndarray:
    """Distances to the next sample; the last one is the mean bin width."""
    cap = (np.asarray(far) - np.asarray(near))[..., None] / t.shape[-1]
    return np.concatenate([np.diff(t, axis=-1), cap], axis=-1)


def transmittance(sigma: np.ndarray, s: np.ndarray) -> np.ndarray:
    """T_i = exp(-sum_{j<i} sigma_j s_j), so T_0 = 1."""
    tau = np.cumsum(sigma * s, axis=-1)
    tau = np.concatenate([np.zeros_like(tau[..., :1]), tau[..., :-1]], axis=-1)
    return np.exp(-tau)


def weights_from_alpha(alpha: np.ndarray) -> RayWeights:
    """w_i = alpha_i prod_{j<i}(1 - alpha_j) and the escape mass prod_i(1 - alpha_i)."""
    keep = np.cumprod(1.0 - alpha, axis=-1)
    before = np.concatenate([np.ones_like(keep[..., :1]), keep[..., :-1]], axis=-1)
    return RayWeights(alpha, alpha * before, keep[..., -1])


def alpha_weights(sigma: np.ndarray, s: np.ndarray) -> RayWeights:
    return weights_from_alpha(1.0 - np.exp(-sigma * s))


def expected_depth(weights: np.ndarray, t: np.ndarray) -> np.ndarray:
    total = weights.sum(axis=-1)
    depth = (weights * t).sum(axis=-1) / np.maximum(total, DEPTH_EPS)
    return np.where(total < DEPTH_EPS, 0.0, depth)


def march(source, rays: Rays, n: int, rng=None, stratified: bool = False, color: bool = True) -> RaySamples:
    """Sample ``source`` along ``rays`` (density and optionally colour)."""
    t = sample_depths(rays.near, rays.far, n, rng, stratified)
    s = spacings(t, rays.near, rays.far)
    pts = rays.at(t)
    if color:
        sigma, rgb = source.density_color(pts.reshape(-1, 3))
        return RaySamples(t, s, sigma.reshape(t.shape), mu=rgb.reshape(t.shape + (3,)))
    sigma = source.density(pts.reshape(-1, 3))
    return RaySamples(t, s, sigma.reshape(t.shape))


def composite(samples: RaySamples, background) -> tuple[np.ndarray, np.ndarray, RayWeights]:
    """Expected colour and depth from sampled density/colour."""
    rw = alpha_weights(samples.sigma, samples.s)
    rgb = np.einsum("...n,...nc->...c", rw.weights, samples.mu) + rw.w_bg[..., None] * np.asarray(background)
    return rgb, expected_depth(rw.weights, samples.t), rw


def render_color(source, rays: Rays, n: int, rng=None, stratified: bool = False) -> np.ndarray:
    """sum_i w_i c_i + w_bg * background for every ray."""
    rgb, _, _ = composite(march(source, rays, n, rng, stratified), source.background)
    return rgb


def image_rays(source, pose: Pose, intr: CameraIntrinsics) -> Rays:
    """Pixel rays of ``pose`` clipped to the source's bounding box."""
    return clip_rays_to_box(camera_rays(pose, intr), source.bounds)


def render_depth(source, rays: Rays, n: int, rng=None, weight_mode: str = "standard", priors=None, stratified=False):
    """Expected depth under the standard weights ``w`` or the composited ``w*``.

    Composited mode needs a field with a visibility head and ``priors``.
    """
    if weight_mode == "standard":
        _, depth, _ = composite(march(source, rays, n, rng, stratified), source.background)
        return depth
    if weight_mode == "composited":
        from .uncertainty import composite_alpha_star

        samples = source.sample_rays(rays, n, rng, stratified)
        cw = composite_alpha_star(samples, priors)
        return expected_depth(cw.weights, samples.t)
    raise ValueError(f"unknown weight mode {weight_mode!r}")


def render_image(source, pose: Pose, intr: CameraIntrinsics, n: int, rng=None, stratified=False, chunk=8192):
    """Colour (H, W, 3), depth (H, W) and weight sum (H, W) of a full image."""
    flat = image_rays(source, pose, intr).flatten()
    rgb = np.empty((len(flat), 3))
    depth = np.empty(len(flat))
    acc = np.empty(len(flat))
    for start in range(0, len(flat), chunk):
        sl = slice(start, start + chunk)
        c, d, rw = composite(march(source, flat.subset(sl), n, rng, stratified), source.background)
        rgb[sl], depth[sl], acc[sl] = c, d, rw.weights.sum(axis=-1)
    hw = (intr.height, intr.width)
    return rgb.reshape(hw + (3,)), depth.reshape(hw), acc.reshape(hw)


def transmittance_to_points(density_fn, origin: np.ndarray, points: np.ndarray, n: int) -> np.ndarray:
    """Probability that the straight path from ``origin`` to each point is unoccluded.

    Midpoint rule with ``n`` samples per path.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    delta = pts - origin
    dist = np.linalg.norm(delta, axis=-1)
    frac = (np.arange(n) + 0.5) / n
    path = origin + frac[None, :, None] * delta[:, None, :]
    sigma = density_fn(path.reshape(-1, 3)).reshape(len(pts), n)
    return np.exp(-sigma.sum(axis=-1) * dist / n)


def visibility_from_cameras(density_fn, points, poses, intr: CameraIntrinsics, n: int, chunk: int = 4096):
    """v(x) = 1 - prod_p (1 - v_p(x)); v_p is the transmittance from camera p to x
    inside its frustum and 0 outside or behind it."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    miss = np.ones(len(pts))
    for pose in poses:
        inside = frustum_mask(pose, intr, pts)
        which = np.flatnonzero(inside)
        for start in range(0, len(which), chunk):
            sel = which[start : start + chunk]
            miss[sel] *= 1.0 - transmittance_to_points(density_fn, pose.translation, pts[sel], n)
    return 1.0 - miss
