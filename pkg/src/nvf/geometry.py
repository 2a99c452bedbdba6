"""Poses, pinhole cameras, rays and pose sampling.

Conventions: world frame is z-up. The camera frame follows the OpenCV
convention (x right, y down, z forward). ``Pose.rotation`` maps camera
coordinates to world coordinates and ``Pose.translation`` is the camera
centre in world coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9
_SMALL_ANGLE = 1e-8


def _check_rotation(rot: np.ndarray) -> None:
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    if not np.allclose(rot.T @ rot, np.eye(3), atol=_ORTHO_TOL):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
        raise ValueError("rotation determinant is not +1")


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(rot)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_flat(cls, values) -> Pose:
        """Inverse of :meth:`flat`: 9 row-major rotation entries then 3 translation."""
        v = np.asarray(values, dtype=np.float64).reshape(12)
        return cls(v[:9].reshape(3, 3), v[9:])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.rotation.ravel(), self.translation])

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def compose(self, other: Pose) -> Pose:
        """``self * other`` (apply ``other`` first)."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash(self.flat().tobytes())

    def __repr__(self):
        return f"Pose(position={np.round(self.translation, 4).tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Ideal pinhole camera with square pixels."""

    width: int
    height: int
    fov: float  # vertical field of view, radians

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0.0 < self.fov < np.pi:
            raise ValueError("fov must lie in (0, pi)")

    @property
    def delta_phi(self) -> float:
        """Angular resolution in radians per pixel."""
        return self.fov / self.height

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(0.5 * self.fov)

    def pixel_directions(self, rows=None, cols=None) -> np.ndarray:
        """Unit camera-frame directions through pixel centres.

        With no arguments returns an (H, W, 3) array for the full grid.
        """
        if rows is None and cols is None:
            cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        f = self.focal
        d = np.stack(
            [
                (cols + 0.5 - 0.5 * self.width) / f,
                (rows + 0.5 - 0.5 * self.height) / f,
                np.ones(np.broadcast(rows, cols).shape),
            ],
            axis=-1,
        )
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, cam_points: np.ndarray):
        """Camera-frame points to (row, col) continuous pixel coordinates and depth z."""
        z = cam_points[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = cam_points[..., 0] / z * self.focal + 0.5 * self.width
            row = cam_points[..., 1] / z * self.focal + 0.5 * self.height
        return row, col, z


@dataclass(frozen=True, eq=False)
class Rays:
    """A batch of rays ``o + t d`` with per-ray near/far bounds.

    Arrays share a leading shape; a single ray has origins of shape (3,).
    """

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64)
        d = np.asarray(self.directions, dtype=np.float64)
        shape = np.broadcast_shapes(o.shape, d.shape)
        o = np.broadcast_to(o, shape)
        d = np.broadcast_to(d, shape)
        near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), shape[:-1])
        far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), shape[:-1])
        norms = np.linalg.norm(d, axis=-1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise ValueError("ray directions must be unit length")
        if np.any(near < 0) or np.any(far <= near):
            raise ValueError("ray bounds must satisfy 0 <= near < far")
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "near", near)
        object.__setattr__(self, "far", far)

    @property
    def shape(self):
        return self.near.shape

    def __len__(self):
        return int(np.prod(self.shape))

    def flatten(self) -> Rays:
        return Rays(
            self.origins.reshape(-1, 3),
            self.directions.reshape(-1, 3),
            self.near.reshape(-1),
            self.far.reshape(-1),
        )

    def subset(self, index) -> Rays:
        flat = self.flatten()
        return Rays(flat.origins[index], flat.directions[index], flat.near[index], flat.far[index])

    def at(self, t: np.ndarray) -> np.ndarray:
        """Points at depths ``t`` (shape (..., N)) along each ray -> (..., N, 3)."""
        return self.origins[..., None, :] + t[..., None] * self.directions[..., None, :]


def pixel_ray(pose: Pose, intr: CameraIntrinsics, m: int, n: int, near=0.0, far=1.0) -> Rays:
    """The world-frame ray through the centre of pixel (row m, column n)."""
    if not (0 <= m < intr.height and 0 <= n < intr.width):
        raise IndexError(f"pixel ({m}, {n}) outside {intr.height}x{intr.width} image")
    d = pose.rotation @ intr.pixel_directions(m, n)
    d = d / np.linalg.norm(d)
    return Rays(pose.translation, d, near, far)


def camera_rays(pose: Pose, intr: CameraIntrinsics, near=0.0, far=1.0) -> Rays:
    """All pixel rays of an image, shape (H, W)."""
    d = intr.pixel_directions() @ pose.rotation.T
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape)
    return Rays(o, d, near, far)


def clip_rays_to_box(rays: Rays, bounds: np.ndarray, min_near: float = 0.0) -> Rays:
    """Restrict each ray's [near, far] to its overlap with an axis-aligned box.

    Rays that miss the box keep a unit-length interval starting at
    ``min_near``; every sample on them lies outside the box.
    """
    lo, hi = bounds
    o, d = rays.origins, rays.directions
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # Parallel rays outside a slab never enter the box.
    outside = (d == 0) & ((o < lo) | (o > hi))
    t_enter = np.max(tmin, axis=-1)
    t_exit = np.min(tmax, axis=-1)
    t_enter = np.maximum(t_enter, min_near)
    hit = (t_exit > t_enter + 1e-9) & ~np.any(outside, axis=-1)
    near = np.where(hit, t_enter, min_near)
    far = np.where(hit, t_exit, min_near + 1.0)
    return Rays(o, d, near, far)


def frustum_mask(pose: Pose, intr: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Points in front of the camera that project inside the image.

    Points exactly on the image border count as inside.
    """
    row, col, z = intr.project(pose.world_to_camera(points))
    with np.errstate(invalid="ignore"):
        inside = (z > 0) & (row >= 0) & (row <= intr.height) & (col >= 0) & (col <= intr.width)
    return inside


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``position`` whose optical axis points at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("target coincides with position")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), position)


def hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * k @ k


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * k + c * k @ k


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def perturb_pose(p: Pose, delta) -> Pose:
    """Right-perturb ``p`` by the SE(3) exponential of (rotation, translation) increments."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(delta)):
        raise ValueError("perturbation must be finite")
    w, tau = delta[:3], delta[3:]
    if not np.any(w):
        return Pose(p.rotation, p.translation + p.rotation @ tau)
    rot = orthonormalize(p.rotation @ so3_exp(w))
    trans = p.translation + p.rotation @ (_so3_left_jacobian(w) @ tau)
    return Pose(rot, trans)


def shell_outer_box(bounds: np.ndarray, margin_ratio: float = 0.5) -> np.ndarray:
    lo, hi = np.asarray(bounds, dtype=np.float64)
    margin = margin_ratio * np.linalg.norm(hi - lo)
    return np.stack([lo - margin, hi + margin])


def sample_pose_shell(
    bounds, rng: np.random.Generator, look_at_jitter: float = 0.0, margin_ratio: float = 0.5
) -> Pose:
    """Camera uniformly placed between the box and an enlarged box, looking inward.

    The look-at target is the box centre displaced by up to ``look_at_jitter``
    half-extents along each axis.
    """
    lo, hi = np.asarray(bounds, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate bounds")
    olo, ohi = shell_outer_box(bounds, margin_ratio)
    while True:
        pos = rng.uniform(olo, ohi)
        if np.any(pos < lo) or np.any(pos > hi):
            break
    centre = 0.5 * (lo + hi)
    target = centre + look_at_jitter * rng.uniform(-0.5, 0.5, size=3) * (hi - lo)
    return look_at(pos, target)


def sample_pose_interior(region, rng: np.random.Generator, max_pitch: float = np.pi / 6) -> Pose:
    """Camera uniformly placed inside ``region`` with random yaw and bounded pitch."""
    lo, hi = np.asarray(region, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate region")
    pos = rng.uniform(lo, hi)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    pitch = rng.uniform(-max_pitch, max_pitch)
    direction = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    return look_at(pos, pos + direction)
