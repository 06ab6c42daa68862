import numpy as np
import pytest

from pointanom.geometry import PointCloud


def grid_plane(n=12, spacing=1.0, z=0.0):
    ax = np.arange(n) * spacing
    u, v = np.meshgrid(ax, ax, indexing="ij")
    return PointCloud(np.column_stack([u.ravel(), v.ravel(), np.full(n * n, z)]))


def fibonacci_sphere(n, radius=1.0):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    r = np.sqrt(1.0 - z * z)
    return PointCloud(radius * np.column_stack([r * np.cos(phi), r * np.sin(phi), z]))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def wavy_surface(n_points, rng):
    """Random smooth height field z = f(x, y) sampled at random (x, y)."""
    xy = rng.uniform(-1.0, 1.0, size=(n_points, 2))
    a = rng.normal(size=4)
    z = 0.3 * (a[0] * np.sin(2 * xy[:, 0]) + a[1] * np.cos(3 * xy[:, 1])
               + a[2] * xy[:, 0] * xy[:, 1] + a[3] * xy[:, 0] ** 2)
    return PointCloud(np.column_stack([xy, z]))


def interior_mask(n, margin):
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return ((i >= margin) & (i < n - margin) & (j >= margin) & (j < n - margin)).ravel()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
