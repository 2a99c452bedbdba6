"""Procedural ground-truth scenes stored as dense voxel grids.

A scene holds per-voxel density and Lambertian colour. It renders itself
exactly (up to the sample count), answers visibility queries from a set of
cameras, and exposes the occupied/free voxel faces used for coverage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import render
from .errors import ConfigError, FormatError
from .geometry import CameraIntrinsics, Pose, Rays
from .grid import GridSpec, interpolate

GENERATORS = ("blocks", "hubble", "two-room")
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
SCENE_MAGIC = b"NVFS"


@dataclass(frozen=True, eq=False)
class GroundTruthScene:
    grid: GridSpec
    density_grid: np.ndarray  # (X, Y, Z)
    color_grid: np.ndarray  # (X, Y, Z, 3)
    background: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_BACKGROUND))
    interior: bool = False  # cameras live inside the box (rooms) rather than around it
    regions: dict = field(default_factory=dict)  # named sub-boxes, e.g. the two rooms

    def __post_init__(self):
        density = np.array(self.density_grid, dtype=np.float64)
        color = np.array(self.color_grid, dtype=np.float64)
        if density.shape != self.grid.resolution or color.shape != self.grid.resolution + (3,):
            raise ValueError("grid arrays do not match the resolution")
        if np.any(density < 0):
            raise ValueError("density must be non-negative")
        if np.any(color < 0) or np.any(color > 1):
            raise ValueError("colours must lie in [0, 1]")
        for arr in (density, color):
            arr.setflags(write=False)
        object.__setattr__(self, "density_grid", density)
        object.__setattr__(self, "color_grid", color)
        object.__setattr__(self, "background", np.array(self.background, dtype=np.float64))
        object.__setattr__(self, "_flat", np.concatenate([density.reshape(-1, 1), color.reshape(-1, 3)], axis=1))

    @property
    def bounds(self) -> np.ndarray:
        return self.grid.bounds

    @property
    def diameter(self) -> float:
        return self.grid.diameter

    def density(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx, w, inside = self.grid.stencil(pts)
        return np.where(inside, interpolate(self.density_grid.reshape(-1), idx, w), 0.0)

    def density_color(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx, w, inside = self.grid.stencil(pts)
        vals = interpolate(self._flat, idx, w)
        sigma = np.where(inside, vals[:, 0], 0.0)
        rgb = np.where(inside[:, None], vals[:, 1:], self.background)
        return sigma, rgb

    def __eq__(self, other):
        if not isinstance(other, GroundTruthScene):
            return NotImplemented
        return (
            self.grid.resolution == other.grid.resolution
            and self.grid.voxel_size == other.grid.voxel_size
            and np.array_equal(self.grid.origin, other.grid.origin)
            and np.array_equal(self.density_grid, other.density_grid)
            and np.array_equal(self.color_grid, other.color_grid)
        )


@dataclass(frozen=True)
class SurfaceElementSet:
    positions: np.ndarray  # (E, 3)
    normals: np.ndarray  # (E, 3)
    areas: np.ndarray  # (E,)

    def __len__(self):
        return len(self.areas)


# ---------------------------------------------------------------------------
# Generators


def _grid_for(extent, voxels_per_unit: int) -> GridSpec:
    res = tuple(int(round(e * voxels_per_unit)) for e in extent)
    return GridSpec(res, 1.0 / voxels_per_unit, np.zeros(3))


def _textured(rng, shape, base, amount=0.25):
    noise = rng.uniform(-amount, amount, size=shape + (3,))
    return np.clip(np.asarray(base) + noise, 0.0, 1.0)


def _blocks(resolution: int, seed: int, n_blocks: int, occupied_density: float) -> GroundTruthScene:
    grid = _grid_for((1.0, 1.0, 1.0), resolution)
    rng = np.random.default_rng(seed)
    density = np.zeros(grid.resolution)
    color = np.full(grid.resolution + (3,), 0.5)
    n = resolution
    for _ in range(n_blocks):
        size = rng.integers(max(2, n // 8), max(3, n // 3), size=3)
        lo = rng.integers(n // 6, np.maximum(n // 6 + 1, n - n // 6 - size))
        hi = np.minimum(lo + size, n - n // 6)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        density[sl] = occupied_density
        color[sl] = _textured(rng, density[sl].shape, rng.uniform(0.1, 0.9, size=3))
    return GroundTruthScene(grid, density, color)


def _hubble(resolution: int, seed: int, occupied_density: float) -> GroundTruthScene:
    """Hollow cylindrical body with one open end and two solar panels."""
    grid = _grid_for((1.0, 1.0, 1.0), resolution)
    rng = np.random.default_rng(seed)
    c = grid.centers()
    x, y, z = c[..., 0] - 0.5, c[..., 1] - 0.5, c[..., 2] - 0.5
    vs = grid.voxel_size
    r = np.sqrt(y**2 + z**2)
    radius = 0.16
    body_len = 0.32
    along = np.abs(x) <= body_len
    shell = along & (np.abs(r - radius) <= vs)
    cap = (np.abs(x + body_len) <= vs) & (r <= radius)
    panels = (np.abs(z) <= 0.6 * vs) & (np.abs(x) <= 0.12) & (np.abs(y) >= radius + 2 * vs) & (np.abs(y) <= 0.45)
    density = np.zeros(grid.resolution)
    color = np.full(grid.resolution + (3,), 0.5)
    body = shell | cap
    density[body | panels] = occupied_density
    color[body] = _textured(rng, color[body].shape[:1], (0.85, 0.75, 0.35))
    color[panels] = _textured(rng, color[panels].shape[:1], (0.15, 0.25, 0.7))
    # A darker band marks one side so views are distinguishable.
    band = body & (y > 0) & (np.abs(x) < 0.1)
    color[band] = _textured(rng, color[band].shape[:1], (0.3, 0.3, 0.35))
    return GroundTruthScene(grid, density, color)


def _two_room(resolution: int, seed: int, occupied_density: float, door_width: float, door_height: float):
    """Two box rooms side by side along x sharing a wall with one doorway.

    The box is [0, 2] x [0, 1] x [0, 1]; room A is x < 1 and room B is x > 1.
    """
    n = resolution
    grid = _grid_for((2.0, 1.0, 1.0), n)
    rng = np.random.default_rng(seed)
    X, Y, Z = grid.resolution
    occ = np.zeros(grid.resolution, dtype=bool)
    color = np.full(grid.resolution + (3,), 0.5)

    def paint(mask, base):
        color[mask] = _textured(rng, color[mask].shape[:1], base)

    i, j, k = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    outer = (i == 0) | (i == X - 1) | (j == 0) | (j == Y - 1) | (k == 0) | (k == Z - 1)
    mid = X // 2
    shared = (i == mid - 1) | (i == mid)
    door_half = max(1, int(round(door_width * n / 2)))
    # The doorway sits off the line joining the room centres.
    door = (np.abs(j + 0.5 - 0.3 * Y) <= door_half) & (k >= 1) & (k < max(2, int(round(door_height * n))))
    occ |= outer
    occ |= shared & ~door
    room_a = i < mid
    # Per-wall palettes: room A warm, room B cool; floor checkered.
    paint(outer & room_a & (i == 0), (0.8, 0.3, 0.25))
    paint(outer & room_a & ((j == 0) | (j == Y - 1)) & (k > 0) & (k < Z - 1), (0.85, 0.65, 0.3))
    paint(outer & ~room_a & (i == X - 1), (0.2, 0.4, 0.8))
    paint(outer & ~room_a & ((j == 0) | (j == Y - 1)) & (k > 0) & (k < Z - 1), (0.3, 0.75, 0.7))
    paint(shared & ~door & (i == mid - 1), (0.9, 0.85, 0.75))
    paint(shared & ~door & (i == mid), (0.45, 0.35, 0.7))
    checker = ((i // 2 + j // 2) % 2).astype(bool)
    paint((k == 0) & checker, (0.25, 0.25, 0.25))
    paint((k == 0) & ~checker, (0.7, 0.7, 0.7))
    paint(k == Z - 1, (0.95, 0.95, 0.9))
    # One piece of furniture per room, kept away from the doorway.
    for lo_x, hi_x, base in ((2, mid - 4, (0.6, 0.2, 0.5)), (mid + 4, X - 2, (0.2, 0.6, 0.25))):
        sx, sy, sz = rng.integers(2, max(3, n // 4), size=3)
        x0 = rng.integers(lo_x, max(lo_x + 1, hi_x - sx))
        y0 = rng.integers(2, max(3, Y - 2 - sy))
        box = (i >= x0) & (i < x0 + sx) & (j >= y0) & (j < y0 + sy) & (k >= 1) & (k < 1 + sz)
        occ |= box
        paint(box, base)
    density = np.where(occ, occupied_density, 0.0)
    vs = grid.voxel_size
    inset = 1.0 * vs
    regions = {
        "room_a": np.array([[inset + vs, inset + vs, inset + vs], [1.0 - inset - vs, 1.0 - inset - vs, 1.0 - inset - vs]]),
        "room_b": np.array([[1.0 + inset + vs, inset + vs, inset + vs], [2.0 - inset - vs, 1.0 - inset - vs, 1.0 - inset - vs]]),
    }
    return GroundTruthScene(grid, density, color, interior=True, regions=regions)


def build_scene(generator: str, resolution: int = 16, seed: int = 0, n_blocks: int = 3,
                occupied_density: float = 200.0, door_width: float = 0.3, door_height: float = 0.7,
                background=DEFAULT_BACKGROUND) -> GroundTruthScene:
    """Deterministic procedural scene. ``resolution`` is voxels per world unit."""
    if generator == "blocks":
        scene = _blocks(resolution, seed, n_blocks, occupied_density)
    elif generator == "hubble":
        scene = _hubble(resolution, seed, occupied_density)
    elif generator == "two-room":
        scene = _two_room(resolution, seed, occupied_density, door_width, door_height)
    else:
        raise ConfigError(f"unknown scene generator {generator!r}; expected one of {', '.join(GENERATORS)}")
    return GroundTruthScene(scene.grid, scene.density_grid, extend_colors(scene.density_grid, scene.color_grid),
                            np.asarray(background, dtype=np.float64), scene.interior, scene.regions)


def extend_colors(density: np.ndarray, color: np.ndarray) -> np.ndarray:
    """Give every free voxel the colour of its nearest occupied voxel.

    Interpolated colour at a surface then matches the surface itself instead
    of fading towards the unused free-space value.
    """
    occupied = density > 0
    if not occupied.any() or occupied.all():
        return color
    _, nearest = ndimage.distance_transform_edt(~occupied, return_indices=True)
    return color[tuple(nearest)]


# ---------------------------------------------------------------------------
# Queries


def gt_query(scene: GroundTruthScene, x) -> tuple[np.ndarray, np.ndarray]:
    """Trilinearly interpolated (sigma, rgb); (0, background) outside the box."""
    x = np.asarray(x, dtype=np.float64)
    sigma, rgb = scene.density_color(x.reshape(-1, 3))
    return sigma.reshape(x.shape[:-1]), rgb.reshape(x.shape)


def gt_render(scene: GroundTruthScene, pose: Pose, intr: CameraIntrinsics, samples_per_ray: int,
              rng=None, stratified: bool = False):
    """Reference colour and depth images; depth is 0 where the weight sum < 1e-6."""
    if samples_per_ray < 2:
        raise ValueError("samples_per_ray must be >= 2")
    rgb, depth, _ = render.render_image(scene, pose, intr, samples_per_ray, rng, stratified)
    return rgb, depth


def gt_render_rays(scene: GroundTruthScene, rays: Rays, samples_per_ray: int) -> np.ndarray:
    return render.render_color(scene, rays, samples_per_ray)


def gt_visibility(scene: GroundTruthScene, x, poses, intr: CameraIntrinsics, n_samples: int = 64) -> np.ndarray:
    """Probability that each point is seen unoccluded by at least one camera."""
    x = np.asarray(x, dtype=np.float64)
    v = render.visibility_from_cameras(scene.density, x.reshape(-1, 3), poses, intr, n_samples)
    return v.reshape(x.shape[:-1])


_FACE_DIRS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def extract_surface(scene: GroundTruthScene, density_threshold: float, outside_free=None) -> SurfaceElementSet:
    """Faces between voxels above the threshold and free voxels.

    Space beyond the grid counts as free for object scenes and as solid for
    interior scenes, whose outer shell is never seen from outside.
    """
    if not density_threshold > 0:
        raise ValueError("density threshold must be positive")
    if outside_free is None:
        outside_free = not scene.interior
    occ = scene.density_grid > density_threshold
    padded = np.pad(occ, 1, constant_values=not outside_free)
    centers = scene.grid.centers()
    vs = scene.grid.voxel_size
    positions, normals = [], []
    X, Y, Z = occ.shape
    for d in _FACE_DIRS:
        neighbour = padded[1 + d[0] : 1 + d[0] + X, 1 + d[1] : 1 + d[1] + Y, 1 + d[2] : 1 + d[2] + Z]
        face = occ & ~neighbour
        pts = centers[face] + 0.5 * vs * d
        positions.append(pts)
        normals.append(np.broadcast_to(d.astype(np.float64), pts.shape))
    pos = np.concatenate(positions) if positions else np.zeros((0, 3))
    nrm = np.concatenate(normals) if normals else np.zeros((0, 3))
    return SurfaceElementSet(pos, np.ascontiguousarray(nrm), np.full(len(pos), vs * vs))


# ---------------------------------------------------------------------------
# Binary grid files


def save_scene(scene: GroundTruthScene, path) -> None:
    res = scene.grid.resolution
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<3I", *res))
        fh.write(struct.pack("<f", scene.grid.voxel_size))
        fh.write(scene.density_grid.astype("<f4").tobytes(order="C"))
        fh.write(scene.color_grid.astype("<f4").tobytes(order="C"))


def load_scene(path) -> GroundTruthScene:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != SCENE_MAGIC:
        raise FormatError(f"{path}: not a scene grid file")
    res = struct.unpack_from("<3I", data, 4)
    (vs,) = struct.unpack_from("<f", data, 16)
    n = int(np.prod(res))
    if min(res) < 1 or len(data) != 20 + 16 * n:
        raise FormatError(f"{path}: size does not match header")
    density = np.frombuffer(data, "<f4", n, 20).reshape(res)
    color = np.frombuffer(data, "<f4", 3 * n, 20 + 4 * n).reshape(res + (3,))
    return GroundTruthScene(GridSpec(res, float(vs), np.zeros(3)), density.astype(np.float64),
                            np.clip(color.astype(np.float64), 0.0, 1.0))
