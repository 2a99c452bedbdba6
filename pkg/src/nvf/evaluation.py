"""Image, geometry and coverage metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from . import render
from .errors import EvaluationError
from .geometry import CameraIntrinsics, Pose, frustum_mask
from .scene import GroundTruthScene, SurfaceElementSet, extract_surface

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class MetricsRecord:
    step: int
    n_views: int
    psnr: float
    ssim: float
    mse: float
    accuracy: float
    completion: float
    completion_ratio: float
    cr_threshold: float
    coverage: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[str]:
        out = []
        for v in asdict(self).values():
            out.append(str(v) if isinstance(v, int) else f"{v:.6f}")
        return out


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio of images in [0, 1], capped at 99 dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b, sigma: float = 1.5, radius: int = 5) -> float:
    """Mean structural similarity with an 11x11 Gaussian window, per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have the same shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    truncate = radius / sigma
    out = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]

        def blur(img):
            return gaussian_filter(img, sigma, mode="reflect", truncate=truncate)

        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
        out.append(np.mean(num / den))
    return float(np.mean(out))


def geometry_metrics(recon_points, gt_points, threshold: float):
    """Accuracy, completion and completion ratio between two point sets."""
    recon = np.asarray(recon_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(recon) == 0 or len(gt) == 0:
        raise EvaluationError("geometry metrics need non-empty point sets")
    d_recon, _ = cKDTree(gt).query(recon)
    d_gt, _ = cKDTree(recon).query(gt)
    return float(d_recon.mean()), float(d_gt.mean()), float(np.mean(d_gt < threshold))


def reconstruct_points(field, poses, intr: CameraIntrinsics, n_samples: int, min_weight: float = 0.5) -> np.ndarray:
    """Back-projected expected depth of every observation pixel with enough weight."""
    pts = []
    for pose in poses:
        _, depth, acc = render.render_image(field, pose, intr, n_samples)
        rays = render.image_rays(field, pose, intr)
        keep = acc >= min_weight
        pts.append(rays.origins[keep] + depth[keep][:, None] * rays.directions[keep])
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def observed_elements(scene: GroundTruthScene, elements: SurfaceElementSet, pose: Pose, intr: CameraIntrinsics,
                      transmittance: float = 0.5, n_samples: int = 64) -> np.ndarray:
    """Mask of surface elements seen unoccluded from ``pose``.

    An element counts when its centre is in the frustum, it faces the camera
    and the transmittance to the free voxel in front of it exceeds the
    threshold.
    """
    if len(elements) == 0:
        return np.zeros(0, dtype=bool)
    cam = pose.translation
    facing = np.einsum("ec,ec->e", elements.normals, cam - elements.positions) > 0
    seen = facing & frustum_mask(pose, intr, elements.positions)
    which = np.flatnonzero(seen)
    if len(which):
        probe = elements.positions[which] + 0.5 * scene.grid.voxel_size * elements.normals[which]
        t = render.transmittance_to_points(scene.density, cam, probe, n_samples)
        seen[which] = t > transmittance
    return seen


def visual_coverage(scene: GroundTruthScene, poses, intr: CameraIntrinsics, elements: SurfaceElementSet = None,
                    surface_density: float = 1.0, transmittance: float = 0.5, n_samples: int = 64) -> float:
    """Fraction of surface elements seen by at least one pose."""
    if elements is None:
        elements = extract_surface(scene, surface_density)
    if len(elements) == 0:
        raise EvaluationError("scene has no surface elements")
    seen = np.zeros(len(elements), dtype=bool)
    for pose in poses:
        seen |= observed_elements(scene, elements, pose, intr, transmittance, n_samples)
    return float(seen.mean())


def image_metrics(field, scene: GroundTruthScene, poses, intr: CameraIntrinsics, n_samples: int, gt_samples: int):
    """Mean PSNR, SSIM and MSE of field renders against ground truth."""
    if not poses:
        raise EvaluationError("no test poses")
    p, s, m = [], [], []
    for pose in poses:
        pred, _, _ = render.render_image(field, pose, intr, n_samples)
        gt, _ = render.render_image(scene, pose, intr, gt_samples)[:2]
        p.append(psnr(pred, gt))
        s.append(ssim(pred, gt))
        m.append(float(np.mean((pred - gt) ** 2)))
    return float(np.mean(p)), float(np.mean(s)), float(np.mean(m))
