import numpy as np
import pytest
from hypothesis import settings
from scipy.spatial.transform import Rotation

from spikekd import Camera, epipolar_line, make_synthetic_dataset
from spikekd.scene import default_rig

settings.register_profile("spikekd", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("spikekd")


def random_camera(rng, camera_id="cam", distance=2500.0):
    """Camera on a sphere around the origin looking at a jittered target."""
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    center = distance * d
    target = rng.normal(scale=50.0, size=3)
    return Camera.look_at(center, target, rng.uniform(800.0, 2500.0), 2000, 1500,
                          fy=rng.uniform(800.0, 2500.0), camera_id=camera_id)


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def epipolar_residual(F, p_i, p_j):
    """Distance of p_j to the epipolar line of p_i, in pixels."""
    line = epipolar_line(F, p_i).coefficients
    return abs(line @ np.r_[p_j, 1.0])


def raster_oracle(line, box, width, height, n=10000):
    """Sample the line inside the image and test box containment."""
    a, b, c = line.coefficients
    if abs(b) >= abs(a):
        x = np.linspace(0.0, width, n)
        y = -(a * x + c) / b
    else:
        y = np.linspace(0.0, height, n)
        x = -(b * y + c) / a
    return bool(np.any(box.contains(np.column_stack([x, y]))))


def safe_cloud(rng, n, k, w, margin=1e-6, scale=25.0):
    """Random cloud without pairwise distances within ``margin`` of a bin edge."""
    step = w / k
    pts = rng.normal(scale=scale, size=(n, 3))
    while True:
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        r = np.mod(d, step)
        near = (np.minimum(r, step - r) < margin) & (d < w + margin)
        np.fill_diagonal(near, False)
        bad = np.unique(np.nonzero(near)[0])
        if len(bad) == 0:
            return pts
        pts[bad] = rng.normal(scale=scale, size=(len(bad), 3))


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small dataset for fast learner tests; histograms are memoised on it."""
    return make_synthetic_dataset(40, views_per_spike=6, rng_seed=7, n_unlabeled=12,
                                  n_families=20, surface_points=4000, n_points=300)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one pass/fail line per acceptance criterion."""
    def log(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
