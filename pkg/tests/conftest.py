"""Shared scenario builders for the test suite."""

import numpy as np
import pytest

from lidar_ar.gnss_model import GnssConfig, SatelliteGeometry


def random_geometry(rng, m, equal_weights=False, low=15.0):
    """``m`` satellites at random elevations above ``low`` degrees."""
    el = rng.uniform(low, 89.0, m)
    az = rng.uniform(0.0, 360.0, m)
    return SatelliteGeometry.from_angles(el, az, mask_deg=None, equal_weights=equal_weights)


def random_points(rng, n, radius=30.0, height=3.0):
    """Keypoints scattered in a slab around the sensor."""
    xy = rng.uniform(-radius, radius, (n, 2))
    z = rng.uniform(-height, height, (n, 1))
    return np.hstack([xy, z])


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_scenarios(count, seed=2024, m_range=(4, 10), f_values=(1, 2), n_values=(0, 4, 44)):
    """Yield ``(config, geometry, rover_points or None, sigma_L, rotation)`` tuples."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        f = int(f_values[i % len(f_values)])
        n = int(n_values[(i // len(f_values)) % len(n_values)])
        cfg = GnssConfig.gps(f, sigma_p=float(rng.uniform(0.1, 0.8)), sigma_phi=float(rng.uniform(0.001, 0.004)))
        geo = random_geometry(rng, m, equal_weights=bool(rng.integers(0, 2)))
        pts = random_points(rng, n) if n else None
        yield cfg, geo, pts, float(rng.uniform(0.05, 1.0)), random_rotation(rng)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
