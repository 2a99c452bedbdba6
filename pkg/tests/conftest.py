import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nvf.geometry import CameraIntrinsics, look_at
from nvf.grid import GridSpec
from nvf.scene import GroundTruthScene, build_scene, extend_colors

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def empty_scene(res=(8, 8, 8), vs=0.125, background=(0.5, 0.5, 0.5)):
    grid = GridSpec(res, vs, np.zeros(3))
    return GroundTruthScene(grid, np.zeros(res), np.full(res + (3,), 0.5), np.array(background))


def slab_scene(x_lo=6, x_hi=8, density=500.0, color=(0.9, 0.2, 0.1), res=(16, 16, 16), vs=0.125):
    """Opaque slab occupying voxel columns x_lo..x_hi-1 across the whole y/z extent."""
    grid = GridSpec(res, vs, np.zeros(3))
    d = np.zeros(res)
    d[x_lo:x_hi] = density
    c = np.full(res + (3,), 0.5)
    c[x_lo:x_hi] = color
    return GroundTruthScene(grid, d, extend_colors(d, c))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_room():
    return build_scene("two-room", 16, seed=3)


@pytest.fixture
def small_intr():
    return CameraIntrinsics(16, 16, np.deg2rad(60.0))


def facing_x(position, distance=1.0):
    position = np.asarray(position, dtype=float)
    return look_at(position, position + np.array([distance, 0.0, 0.0]))


# Acceptance criteria report their outcome here; the summary prints them in order.
_CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
