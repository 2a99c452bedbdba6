"""Explicit voxel radiance field with colour-variance and visibility heads.

Each head is a grid of raw parameters at voxel centres. A query
interpolates the raw values trilinearly and then applies the head's
activation: softplus for density, sigmoid for colour and visibility,
softplus plus a floor for the diagonal colour variance.

Training is split in three phases that touch disjoint grids: the backbone
(density + colour) by photometric MSE, the variance head by the negative
log-likelihood of the ground-truth colour under the per-ray mixture, and
the visibility head by cross-entropy against camera visibility labels.
Gradients are written out by hand for these three losses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import render
from .config import FieldConfig
from .errors import ConfigError, FormatError
from .geometry import CameraIntrinsics, Pose, Rays, camera_rays, clip_rays_to_box
from .grid import GridSpec, interpolate, scatter
from .render import RaySamples

FIELD_MAGIC = b"NVFF"
FIELD_VERSION = 1
HEADS = ("density", "color", "variance", "visibility")


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class FieldSample:
    sigma: np.ndarray
    mu: np.ndarray
    q: np.ndarray
    v: np.ndarray


class VoxelField:
    """Four raw parameter grids over a box, stored flat as float32."""

    def __init__(self, grid: GridSpec, background=(0.5, 0.5, 0.5), variance_floor: float = 1e-6,
                 density_init: float = 0.0, variance_init: Optional[float] = None):
        self.grid = grid
        self.background = np.array(background, dtype=np.float64)
        self.variance_floor = float(variance_floor)
        n = grid.n_voxels
        self.raw_density = np.full(n, density_init, dtype=np.float32)
        self.raw_color = np.zeros((n, 3), dtype=np.float32)
        raw_q = 0.0 if variance_init is None else float(inverse_softplus(variance_init - variance_floor))
        self.raw_variance = np.full((n, 3), raw_q, dtype=np.float32)
        self.raw_visibility = np.zeros(n, dtype=np.float32)

    @classmethod
    def for_box(cls, bounds, voxels_per_unit: int, **kwargs) -> VoxelField:
        lo, hi = np.asarray(bounds, dtype=np.float64)
        res = tuple(max(2, int(round(e * voxels_per_unit))) for e in hi - lo)
        vs = float(np.max((hi - lo) / np.array(res)))
        return cls(GridSpec(res, vs, lo), **kwargs)

    @property
    def bounds(self) -> np.ndarray:
        return self.grid.bounds

    @property
    def voxel_size(self) -> float:
        return self.grid.voxel_size

    def copy(self) -> VoxelField:
        out = VoxelField.__new__(VoxelField)
        out.grid = self.grid
        out.background = self.background.copy()
        out.variance_floor = self.variance_floor
        for name in ("raw_density", "raw_color", "raw_variance", "raw_visibility"):
            setattr(out, name, getattr(self, name).copy())
        return out

    def grids_equal(self, other: VoxelField, heads: Sequence[str] = HEADS) -> bool:
        return all(np.array_equal(getattr(self, f"raw_{h}"), getattr(other, f"raw_{h}")) for h in heads)

    # -- queries ---------------------------------------------------------

    def _raw(self, heads: Sequence[str]) -> np.ndarray:
        cols = [getattr(self, f"raw_{h}").reshape(self.grid.n_voxels, -1) for h in heads]
        return np.concatenate(cols, axis=1)

    def query(self, points, heads: Sequence[str] = HEADS) -> FieldSample:
        """Activated field values at ``points`` (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        lead = pts.shape[:-1]
        pts = pts.reshape(-1, 3)
        idx, w, inside = self.grid.stencil(pts)
        raw = interpolate(self._raw(heads).astype(np.float64), idx, w)
        out = FieldSample(None, None, None, None)
        col = 0
        for h in heads:
            width = 1 if h in ("density", "visibility") else 3
            r = raw[:, col : col + width]
            col += width
            if h == "density":
                out.sigma = np.where(inside, softplus(r[:, 0]), 0.0).reshape(lead)
            elif h == "color":
                out.mu = np.where(inside[:, None], sigmoid(r), self.background).reshape(lead + (3,))
            elif h == "variance":
                q = softplus(r) + self.variance_floor
                out.q = np.where(inside[:, None], q, self.variance_floor).reshape(lead + (3,))
            else:
                out.v = np.where(inside, sigmoid(r[:, 0]), 0.0).reshape(lead)
        return out

    def density(self, points) -> np.ndarray:
        return self.query(points, ("density",)).sigma

    def density_color(self, points):
        s = self.query(points, ("density", "color"))
        return s.sigma, s.mu

    def sample_rays(self, rays: Rays, n: int, rng=None, stratified: bool = False,
                    heads: Sequence[str] = HEADS) -> RaySamples:
        t = render.sample_depths(rays.near, rays.far, n, rng, stratified)
        s = render.spacings(t, rays.near, rays.far)
        fs = self.query(rays.at(t), heads)
        return RaySamples(t, s, fs.sigma, fs.mu, fs.q, fs.v)

    def image_rays(self, pose: Pose, intr: CameraIntrinsics) -> Rays:
        return clip_rays_to_box(camera_rays(pose, intr), self.bounds)


def field_query(field: VoxelField, x) -> FieldSample:
    return field.query(x)


def new_field(bounds, cfg: FieldConfig, background=(0.5, 0.5, 0.5)) -> VoxelField:
    """Field initialised from the configured raw density and variance."""
    return VoxelField.for_box(bounds, cfg.resolution, background=background, variance_floor=cfg.variance_floor,
                              density_init=cfg.density_init, variance_init=cfg.variance_init)


# ---------------------------------------------------------------------------
# Training data


@dataclass
class TrainingSet:
    poses: list
    images: list
    intr: CameraIntrinsics

    def __post_init__(self):
        if len(self.poses) != len(self.images):
            raise ValueError("one image per pose required")
        for img in self.images:
            if img.shape != (self.intr.height, self.intr.width, 3):
                raise ValueError("image size does not match intrinsics")
            if np.any(img < 0) or np.any(img > 1):
                raise ValueError("images must lie in [0, 1]")

    def __len__(self):
        return len(self.poses)

    def rays(self, bounds) -> tuple[Rays, np.ndarray]:
        """All pixel rays clipped to ``bounds`` and their target colours."""
        if not self.poses:
            raise ConfigError("training set is empty")
        origins, dirs = [], []
        for pose in self.poses:
            r = camera_rays(pose, self.intr).flatten()
            origins.append(r.origins)
            dirs.append(r.directions)
        rays = clip_rays_to_box(Rays(np.concatenate(origins), np.concatenate(dirs), 0.0, 1.0), bounds)
        targets = np.concatenate([img.reshape(-1, 3) for img in self.images])
        return rays, targets


# ---------------------------------------------------------------------------
# Losses and their gradients with respect to raw (pre-activation) values
# at the sample points.


def mse_loss_and_grad(raw_sigma, raw_color, s, target, background):
    """Mean squared error of the composited colour.

    Shapes: raw_sigma (R, N), raw_color (R, N, 3), s (R, N), target (R, 3).
    Returns the loss and gradients with respect to both raw inputs.
    """
    sigma = softplus(raw_sigma)
    mu = sigmoid(raw_color)
    rw = render.alpha_weights(sigma, s)
    w = rw.weights
    rgb = np.einsum("rn,rnc->rc", w, mu) + rw.w_bg[:, None] * background
    resid = rgb - target
    loss = float(np.mean(resid**2))
    g_rgb = 2.0 * resid / resid.size
    # dC/dsigma_k = s_k (T_{k+1} c_k - sum_{i>k} w_i c_i - w_bg bg)
    contrib = w[..., None] * mu
    after = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    after = after + rw.w_bg[:, None, None] * background
    t_next = np.cumprod(1.0 - rw.alpha, axis=1)
    dc_dsigma = s[..., None] * (t_next[..., None] * mu - after)
    g_sigma = np.einsum("rnc,rc->rn", dc_dsigma, g_rgb) * sigmoid(raw_sigma)
    g_color = w[..., None] * g_rgb[:, None, :] * mu * (1.0 - mu)
    return loss, g_sigma, g_color


def nll_loss_and_grad(weights, mu, raw_q, target, floor):
    """Mean over rays of -log sum_i w_i N(target; mu_i, diag(Q_i)).

    Rays whose weights are all zero are skipped; their count is returned.
    Shapes: weights (R, N), mu and raw_q (R, N, 3), target (R, 3).
    """
    q = softplus(raw_q) + floor
    resid2 = (target[:, None, :] - mu) ** 2
    log_n = -0.5 * np.sum(np.log(2.0 * np.pi * q) + resid2 / q, axis=-1)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    terms = log_w + log_n
    valid = np.any(weights > 0, axis=-1)
    n_skipped = int(np.sum(~valid))
    g = np.zeros_like(raw_q)
    if not np.any(valid):
        return 0.0, g, n_skipped
    terms = terms[valid]
    top = np.max(terms, axis=-1, keepdims=True)
    lse = top[:, 0] + np.log(np.sum(np.exp(terms - top), axis=-1))
    count = int(valid.sum())
    loss = float(-np.sum(lse) / count)
    gamma = np.exp(terms - lse[:, None])  # responsibilities
    qv = q[valid]
    dlogn_dq = -0.5 * (1.0 / qv - resid2[valid] / qv**2)
    g[valid] = -(gamma[..., None] * dlogn_dq) * sigmoid(raw_q[valid]) / count
    return loss, g, n_skipped


def bce_loss_and_grad(raw_v, labels):
    """Mean binary cross-entropy of sigmoid(raw_v) against soft labels."""
    log_p = -np.logaddexp(0.0, -raw_v)
    log_1mp = -np.logaddexp(0.0, raw_v)
    loss = float(-np.mean(labels * log_p + (1.0 - labels) * log_1mp))
    return loss, (sigmoid(raw_v) - labels) / raw_v.size


class Adam:
    """Adam on a dict of flat parameter arrays, updated in place."""

    def __init__(self, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lrs[k] / bc1 * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.eps)
            p = params[k]
            p[...] = (p - update).astype(p.dtype)


def _batch_points(rays: Rays, sel, n, rng, stratified):
    batch = rays.subset(sel)
    t = render.sample_depths(batch.near, batch.far, n, rng, stratified)
    s = render.spacings(t, batch.near, batch.far)
    return batch.at(t).reshape(-1, 3), t, s


def train_backbone(field: VoxelField, data: TrainingSet, cfg: FieldConfig, rng: np.random.Generator,
                   iterations: Optional[int] = None) -> list:
    """Fit density and colour by photometric MSE. Returns the loss curve."""
    if len(data) == 0:
        raise ConfigError("cannot train on an empty training set")
    iterations = cfg.backbone_iterations if iterations is None else iterations
    rays, targets = data.rays(field.bounds)
    n = cfg.samples_per_ray
    params = {"density": field.raw_density, "color": field.raw_color}
    opt = Adam({"density": cfg.lr_density, "color": cfg.lr_color}, cfg.adam_beta1, cfg.adam_beta2)
    V = field.grid.n_voxels
    curve = []
    for _ in range(iterations):
        sel = rng.integers(0, len(targets), size=min(cfg.batch_rays, len(targets)))
        pts, t, s = _batch_points(rays, sel, n, rng, cfg.stratified)
        idx, w, inside = field.grid.stencil(pts)
        raw = interpolate(np.concatenate([field.raw_density[:, None], field.raw_color], axis=1), idx, w)
        shape = t.shape
        # Outside the box density is zero: a very negative raw value makes softplus vanish.
        raw_sigma = np.where(inside, raw[:, 0], -np.inf).reshape(shape)
        raw_color = raw[:, 1:].reshape(shape + (3,))
        with np.errstate(over="ignore"):
            loss, g_sigma, g_color = mse_loss_and_grad(raw_sigma, raw_color, s, targets[sel], field.background)
        g_sigma = np.where(inside, g_sigma.reshape(-1), 0.0)
        g_color = np.where(inside[:, None], g_color.reshape(-1, 3), 0.0)
        opt.step(params, {"density": scatter(g_sigma, idx, w, V), "color": scatter(g_color, idx, w, V)})
        curve.append(loss)
    return curve


def ray_weights_for(field: VoxelField, rays: Rays, n: int, rng=None, stratified=False):
    """Frozen backbone quantities along rays: weights, colour means and sample depths."""
    t = render.sample_depths(rays.near, rays.far, n, rng, stratified)
    s = render.spacings(t, rays.near, rays.far)
    fs = field.query(rays.at(t), ("density", "color"))
    return render.alpha_weights(fs.sigma, s).weights, fs.mu, t


def train_variance_head(field: VoxelField, data: TrainingSet, cfg: FieldConfig, rng: np.random.Generator,
                        iterations: Optional[int] = None) -> tuple[list, int]:
    """Fit the variance grid by mixture NLL with the backbone frozen.

    The backbone does not change during this phase, so sample positions,
    mixture weights, colour means and interpolation stencils are computed
    once for every training ray. Returns the loss curve and the number of
    escaped rays (all weights zero) left out of the loss.
    """
    if len(data) == 0:
        raise ConfigError("cannot train on an empty training set")
    iterations = cfg.variance_iterations if iterations is None else iterations
    if iterations == 0:
        return [], 0
    rays, targets = data.rays(field.bounds)
    n = cfg.samples_per_ray
    weights, mu, t = ray_weights_for(field, rays, n, rng, cfg.stratified)
    live = np.any(weights > 0, axis=-1)
    skipped = int(np.sum(~live))
    if not np.any(live):
        return [], skipped
    rays, weights, mu, t, targets = rays.subset(live), weights[live], mu[live], t[live], targets[live]
    idx, w, inside = field.grid.stencil(rays.at(t).reshape(-1, 3))
    R = len(targets)
    idx = idx.reshape(R, n, 8)
    w = np.where(inside[:, None], w, 0.0).reshape(R, n, 8)
    opt = Adam({"variance": cfg.variance_lr}, cfg.adam_beta1, cfg.adam_beta2)
    V = field.grid.n_voxels
    curve = []
    for _ in range(iterations):
        sel = rng.integers(0, R, size=min(cfg.batch_rays, R))
        bi, bw = idx[sel].reshape(-1, 8), w[sel].reshape(-1, 8)
        raw_q = interpolate(field.raw_variance.astype(np.float64), bi, bw).reshape(len(sel), n, 3)
        loss, g, _ = nll_loss_and_grad(weights[sel], mu[sel], raw_q, targets[sel], field.variance_floor)
        opt.step({"variance": field.raw_variance}, {"variance": scatter(g.reshape(-1, 3), bi, bw, V)})
        curve.append(loss)
    return curve, skipped


def visibility_labels(field: VoxelField, points, poses, intr: CameraIntrinsics, n_samples: int) -> np.ndarray:
    """Camera visibility of points computed through the field's own density."""
    return render.visibility_from_cameras(field.density, points, poses, intr, n_samples)


def train_visibility_head(field: VoxelField, poses, intr: CameraIntrinsics, cfg: FieldConfig,
                          rng: np.random.Generator, iterations: Optional[int] = None,
                          labeler=None) -> list:
    """Fit the visibility grid by cross-entropy against soft visibility labels.

    Points are drawn uniformly in the box. ``labeler(points)`` overrides the
    default labels computed from ``poses`` through the frozen density.
    """
    if not poses:
        raise ConfigError("visibility training needs at least one camera pose")
    iterations = cfg.visibility_iterations if iterations is None else iterations
    if iterations == 0:
        return []
    lo, hi = field.bounds
    pool = rng.uniform(lo, hi, size=(cfg.visibility_pool, 3))
    if labeler is None:
        labels = visibility_labels(field, pool, poses, intr, cfg.visibility_samples)
    else:
        labels = np.asarray(labeler(pool), dtype=np.float64)
    idx_all, w_all, _ = field.grid.stencil(pool)
    opt = Adam({"visibility": cfg.visibility_lr}, cfg.adam_beta1, cfg.adam_beta2)
    V = field.grid.n_voxels
    curve = []
    for _ in range(iterations):
        sel = rng.integers(0, len(pool), size=min(cfg.visibility_batch, len(pool)))
        idx, w = idx_all[sel], w_all[sel]
        raw_v = interpolate(field.raw_visibility, idx, w)
        loss, g = bce_loss_and_grad(raw_v, labels[sel])
        opt.step({"visibility": field.raw_visibility}, {"visibility": scatter(g, idx, w, V)})
        curve.append(loss)
    return curve


# ---------------------------------------------------------------------------
# Field files: magic, version, resolution, origin, voxel size, background,
# variance floor, then the four grids as little-endian float32.

_HEADER = struct.Struct("<4sI3I3dd3dd")


def save_field(field: VoxelField, path) -> None:
    header = _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, *field.grid.resolution, *field.grid.origin,
                          field.grid.voxel_size, *field.background, field.variance_floor)
    with open(path, "wb") as fh:
        fh.write(header)
        for h in HEADS:
            fh.write(getattr(field, f"raw_{h}").astype("<f4").tobytes())


def load_field(path) -> VoxelField:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read field file {path}: {exc.strerror or exc}") from exc
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rx, ry, rz, ox, oy, oz, vs, br, bgc, bb, floor = _HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    res = (rx, ry, rz)
    n = rx * ry * rz
    if min(res) < 1 or len(data) != _HEADER.size + 4 * 8 * n:
        raise FormatError(f"{path}: size does not match header")
    field = VoxelField(GridSpec(res, vs, (ox, oy, oz)), background=(br, bgc, bb), variance_floor=floor)
    off = _HEADER.size
    for h, width in zip(HEADS, (1, 3, 3, 1)):
        arr = np.frombuffer(data, "<f4", n * width, off).astype(np.float32)
        off += 4 * n * width
        setattr(field, f"raw_{h}", arr.reshape(n, width) if width == 3 else arr)
    return field
