import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import empty_scene, facing_x, slab_scene
from nvf.errors import EvaluationError
from nvf.evaluation import (
    MetricsRecord,
    geometry_metrics,
    psnr,
    reconstruct_points,
    ssim,
    visual_coverage,
)
from nvf.field import VoxelField
from nvf.geometry import CameraIntrinsics, look_at, sample_pose_interior
from nvf.grid import GridSpec
from nvf.scene import GroundTruthScene, extract_surface

seeds = st.integers(0, 2**32 - 1)


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(0.2, 0.8, (8, 8, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.01) == pytest.approx(40.0, abs=1e-9)


@given(seeds)
def test_psnr_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_ssim_examples():
    a = np.random.default_rng(1).random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, 1 - a) < 1.0
    x = np.full((16, 16), 0.25)
    y = np.full((16, 16), 0.75)
    c1 = 0.01**2
    expected = (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)
    assert ssim(x, y) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        ssim(x, np.zeros((4, 4)))


def test_geometry_examples():
    rng = np.random.default_rng(0)
    gt = rng.uniform(0, 1, (500, 3))
    assert geometry_metrics(gt, gt, 0.01) == (0.0, 0.0, 1.0)
    # A lattice shifted by less than half its spacing keeps nearest neighbours paired.
    g = np.stack(np.meshgrid(*[np.arange(6) * 0.1] * 3, indexing="ij"), -1).reshape(-1, 3)
    acc, comp, cr = geometry_metrics(g + [0.02, 0, 0], g, 0.05)
    assert acc == pytest.approx(0.02) and comp == pytest.approx(0.02) and cr == 1.0
    half = g[g[:, 0] < 0.25]
    acc, comp, cr = geometry_metrics(half, g, 0.05)
    assert comp > acc and cr == pytest.approx(len(half) / len(g))
    with pytest.raises(EvaluationError):
        geometry_metrics(np.zeros((0, 3)), gt, 0.1)


@given(seeds)
def test_geometry_swap_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((40, 3)), rng.random((30, 3))
    acc, comp, _ = geometry_metrics(a, b, 0.1)
    acc2, comp2, _ = geometry_metrics(b, a, 0.1)
    assert acc == pytest.approx(comp2) and comp == pytest.approx(acc2)


def _field_from_scene(scene):
    f = VoxelField(scene.grid, background=scene.background)
    f.raw_density[:] = np.where(scene.density_grid.reshape(-1) > 0, 300.0, -300.0)
    return f


def test_reconstruct_empty_and_slab():
    intr = CameraIntrinsics(10, 10, np.deg2rad(40))
    empty = VoxelField(GridSpec((8, 8, 8), 0.25, np.zeros(3)))
    empty.raw_density[:] = -40
    assert len(reconstruct_points(empty, [facing_x([-0.5, 1.0, 1.0])], intr, 32)) == 0
    scene = slab_scene(x_lo=8, x_hi=10)
    f = _field_from_scene(scene)
    n = 64
    pose = facing_x([0.3, 1.0, 1.0])
    pts = reconstruct_points(f, [pose], intr, n)
    face_x = 8 * scene.grid.voxel_size
    spacing = 2.0 * np.sqrt(3) / n
    assert len(pts) == 100
    assert np.percentile(np.abs(pts[:, 0] - face_x), 95) <= spacing


def test_reconstruct_monotone_in_poses():
    scene = slab_scene(x_lo=8, x_hi=10)
    f = _field_from_scene(scene)
    intr = CameraIntrinsics(8, 8, np.deg2rad(40))
    poses = [facing_x([0.3, 1.0, 1.0]), facing_x([0.3, 0.6, 1.2]), facing_x([0.5, 1.5, 0.5])]
    counts = [len(reconstruct_points(f, poses[:k], intr, 32)) for k in range(1, 4)]
    assert counts == sorted(counts)


def test_coverage_examples():
    intr = CameraIntrinsics(16, 16, np.deg2rad(60))
    res = (8, 8, 8)
    d = np.zeros(res)
    d[3:5, 3:5, 3:5] = 100.0
    cube = GroundTruthScene(GridSpec(res, 0.25, np.zeros(3)), d, np.full(res + (3,), 0.5))
    c = np.full(3, 1.0)
    orbit = [look_at(c + 1.5 * e, c) for e in np.vstack([np.eye(3), -np.eye(3)])]
    assert visual_coverage(cube, [], intr) == 0.0
    assert visual_coverage(cube, orbit, intr) == 1.0
    with pytest.raises(EvaluationError):
        visual_coverage(empty_scene(), orbit, intr)


def test_coverage_room_b_pose_adds(two_room):
    intr = CameraIntrinsics(24, 24, np.deg2rad(70))
    rng = np.random.default_rng(0)
    poses = [sample_pose_interior(two_room.regions["room_a"], rng, 0.5) for _ in range(6)]
    centre_b = two_room.regions["room_b"].mean(axis=0)
    extra = look_at(centre_b, centre_b + [0.4, 0.1, 0.0])
    el = extract_surface(two_room, 1.0)
    assert visual_coverage(two_room, poses, intr, el) < visual_coverage(two_room, poses + [extra], intr, el)


@given(seeds)
def test_coverage_monotone(seed):
    from nvf.scene import build_scene

    scene = build_scene("blocks", 8, seed=seed % 50, n_blocks=2)
    rng = np.random.default_rng(seed)
    from nvf.geometry import sample_pose_shell

    intr = CameraIntrinsics(8, 8, np.deg2rad(60))
    el = extract_surface(scene, 1.0)
    if len(el) == 0:
        return
    poses = [sample_pose_shell(scene.bounds, rng, 0.3) for _ in range(3)]
    values = [visual_coverage(scene, poses[:k], intr, el) for k in range(4)]
    assert values == sorted(values)


def test_metrics_record_row():
    r = MetricsRecord(3, 12, 21.5, 0.8, 0.01, 0.02, 0.03, 0.9, 0.24, 0.5)
    assert MetricsRecord.header()[0] == "step" and len(r.row()) == len(MetricsRecord.header())
    assert r.row()[:3] == ["3", "12", "21.500000"]
