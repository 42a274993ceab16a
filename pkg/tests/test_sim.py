import math

import numpy as np
import pytest

from lidar_ar import sim
from lidar_ar.errors import ConfigError, DegenerateGeometryError
from lidar_ar.lidar_model import RigidPose, estimate_rigid_transform, rotation_matrix


# -- coordinates ------------------------------------------------------------------------------


def test_ecef_equator_and_pole():
    np.testing.assert_allclose(sim.geodetic_to_ecef(0.0, 0.0), [sim.WGS84_A, 0, 0], atol=1e-6)
    b = sim.WGS84_A * (1 - sim.WGS84_F)
    np.testing.assert_allclose(sim.geodetic_to_ecef(math.pi / 2, 0.0), [0, 0, b], atol=1e-6)


def test_enu_rotation_orthonormal_and_up(rng):
    for _ in range(20):
        lat, lon = rng.uniform(-math.pi / 2, math.pi / 2), rng.uniform(-math.pi, math.pi)
        R = sim.enu_rotation(lat, lon)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
        assert np.linalg.det(R) == pytest.approx(1.0)
        # "up" is the ellipsoid normal: gradient direction of the ECEF position w.r.t. height
        p0, p1 = sim.geodetic_to_ecef(lat, lon, 0.0), sim.geodetic_to_ecef(lat, lon, 1.0)
        np.testing.assert_allclose(R[2], p1 - p0, atol=1e-9)


def test_enu_rotation_at_pole():
    R = sim.enu_rotation(math.pi / 2, 0.0)
    np.testing.assert_allclose(R[2], [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(R[0], [0, 1, 0], atol=1e-15)
    with pytest.raises(Exception):
        sim.enu_rotation(2.0, 0.0)


def test_enu_north_is_finite_difference(rng):
    lat, lon = math.radians(sim.DEFAULT_LATITUDE_DEG), math.radians(sim.DEFAULT_LONGITUDE_DEG)
    R = sim.enu_rotation(lat, lon)
    d = 1e-7
    north = sim.geodetic_to_ecef(lat + d, lon) - sim.geodetic_to_ecef(lat - d, lon)
    east = sim.geodetic_to_ecef(lat, lon + d) - sim.geodetic_to_ecef(lat, lon - d)
    np.testing.assert_allclose(R[1], north / np.linalg.norm(north), atol=1e-7)
    np.testing.assert_allclose(R[0], east / np.linalg.norm(east), atol=1e-7)


# -- constellations ---------------------------------------------------------------------------


def test_reference_sky_prefix_and_order():
    g = sim.reference_constellation(12)
    assert np.all(np.degrees(g.elevations) >= 40.0)
    assert np.all(np.diff(g.elevations) <= 0)
    g5 = sim.reference_constellation(5)
    np.testing.assert_array_equal(g5.elevations, g.elevations[:5])
    with pytest.raises(ConfigError):
        sim.reference_constellation(1)
    with pytest.raises(ConfigError):
        sim.reference_constellation(len(sim.HIGH_ELEVATION_SKY) + 1)


def test_generate_constellation_mask_and_separation():
    for seed in range(10):
        g = sim.generate_constellation(8, mask_deg=40.0, seed=seed)
        el = g.elevations
        assert g.m == 8 and np.all(np.degrees(el) >= 40.0)
        assert np.all(np.diff(el) <= 0)
        az = g.azimuths
        for i in range(8):
            for j in range(i):
                c = math.sin(el[i]) * math.sin(el[j]) + math.cos(el[i]) * math.cos(el[j]) * math.cos(az[i] - az[j])
                assert math.degrees(math.acos(min(1.0, c))) >= 15.0 - 1e-9


def test_generate_constellation_deterministic_and_minimal():
    a = sim.generate_constellation(6, seed=3)
    b = sim.generate_constellation(6, seed=3)
    np.testing.assert_array_equal(a.elevations, b.elevations)
    assert sim.generate_constellation(2, seed=1).m == 2


def test_generate_constellation_errors():
    with pytest.raises(ConfigError):
        sim.generate_constellation(1)
    with pytest.raises(ConfigError):
        sim.generate_constellation(4, mask_deg=90.0)
    with pytest.raises(ConfigError):
        sim.generate_constellation(40, mask_deg=80.0, max_attempts=500)


# -- keypoints --------------------------------------------------------------------------------


def test_keypoint_layout_in_annulus(rng):
    y = sim.sample_keypoint_layout(500, rng)
    r = np.hypot(y[:, 0], y[:, 1])
    assert r.min() >= 5.0 and r.max() <= 50.0
    assert np.all(np.abs(y[:, 2]) <= 2.0)


def test_keypoint_noise_rms_matches_sigma():
    pose = RigidPose([1.0, 2.0, 3.0], rotation_matrix([0, 0, 1], 0.4))
    kp, mask = sim.simulate_keypoints(4000, pose, 0.15, np.random.default_rng(3))
    assert not mask.any()
    d = np.linalg.norm(kp.reference_points - pose.apply(kp.rover_points), axis=1)
    assert np.sqrt(np.mean(d**2)) == pytest.approx(0.15, rel=0.1)


def test_keypoint_outliers_displaced():
    pose = RigidPose(np.zeros(3), np.eye(3))
    kp, mask = sim.simulate_keypoints(50, pose, 0.15, np.random.default_rng(4), outlier_fraction=0.3, noise=False)
    assert mask.sum() == 15
    d = np.linalg.norm(kp.reference_points - kp.rover_points, axis=1)
    assert np.all((d[mask] >= 2.0) & (d[mask] <= 10.0))
    np.testing.assert_array_equal(d[~mask], 0.0)


def test_zero_noise_registration_recovers_truth():
    pose = RigidPose([10.0, -4.0, 2.0], rotation_matrix([1, 2, 3], 1.1))
    kp, _ = sim.simulate_keypoints(20, pose, 0.15, np.random.default_rng(5), noise=False)
    est = estimate_rigid_transform(kp)
    np.testing.assert_allclose(est.rotation, pose.rotation, atol=1e-10)
    np.testing.assert_allclose(est.translation, pose.translation, atol=1e-9)


def test_keypoint_errors():
    pose = RigidPose(np.zeros(3), np.eye(3))
    with pytest.raises(ConfigError):
        sim.simulate_keypoints(3, pose, 0.1, 0)
    with pytest.raises(ConfigError):
        sim.simulate_keypoints(10, pose, 0.1, 0, outlier_fraction=1.0)


# -- sweeps --------------------------------------------------------------------------------------


def test_cell_rng_independent_of_order():
    a = sim.cell_rng(7, 3, 2).random(4)
    sim.cell_rng(7, 1, 1).random(100)
    np.testing.assert_array_equal(a, sim.cell_rng(7, 3, 2).random(4))
    assert not np.array_equal(a, sim.cell_rng(7, 2, 3).random(4))


def test_information_trials_are_scaled_identity():
    info = sim.lidar_information_trials(10, 5, np.random.default_rng(0))
    assert info.shape == (5, 3, 3)
    for N in info:
        np.testing.assert_allclose(N, N[0, 0] * np.eye(3))
        assert 0 < N[0, 0] <= 10


def test_degenerate_layout_raises():
    with pytest.raises(DegenerateGeometryError):
        sim.lidar_information_trials(4, 1, np.random.default_rng(0), annulus=(0.0, 1e-9), height=0.0)


def test_success_grid_deterministic_and_monotone():
    from lidar_ar.gnss_model import GnssConfig

    cfg = GnssConfig.normalized(1, 0.2)
    rows = sim.success_grid(cfg, 10, [5, 7], [0.1, 0.3, 0.6], trials=5, seed=1)
    again = sim.success_grid(cfg, 10, [5, 7], [0.1, 0.3, 0.6], trials=5, seed=1)
    assert [r.adop_gl for r in rows] == [r.adop_gl for r in again]
    for m in (5, 7):
        v = [r.adop_gl for r in rows if r.m == m]
        assert v == sorted(v)
        assert all(r.adop_gl <= r.adop_g for r in rows)
    with pytest.raises(ConfigError):
        sim.success_grid(cfg, 10, [5], [0.1], trials=0)


# -- experiments -------------------------------------------------------------------------------


def test_precision_gain():
    Q = np.diag([4.0, 9.0, 16.0])
    np.testing.assert_allclose(sim.precision_gain(Q, Q), 1.0)
    np.testing.assert_allclose(sim.precision_gain(Q, np.diag([1.0, 1.0, 4.0])), [2.0, 3.0, 2.0])
    R = rotation_matrix([0, 0, 1], math.pi / 2)
    np.testing.assert_allclose(sim.precision_gain(Q, np.diag([1.0, 1.0, 4.0]), R), [3.0, 2.0, 2.0])


def test_spec_validation():
    with pytest.raises(ConfigError):
        sim.ScenarioSpec(epochs=0)
    with pytest.raises(ConfigError):
        sim.ScenarioSpec(n_keypoints=3)
    with pytest.raises(ConfigError):
        sim.ScenarioSpec(wavelengths="galileo")
    with pytest.raises(ConfigError):
        sim.ScenarioSpec(elevations_deg=(50.0,))


def test_single_epoch_summary():
    res, summ = sim.run_experiment(sim.ScenarioSpec(epochs=1, seed=2))
    assert len(res) == 1 and summ.epochs == 1
    assert res[0].ok and res[0].accepted and res[0].correct
    d = summ.to_dict()
    assert d["fix_rate"] == 1.0 and len(d["cdf_3d"]) == 101


def test_noise_free_epoch_is_exact():
    res, _ = sim.run_experiment(sim.ScenarioSpec(epochs=2, noise=False))
    for r in res:
        assert r.correct and r.accepted
        assert np.max(np.abs(r.fixed_error)) < 1e-6


def test_experiment_deterministic():
    spec = sim.ScenarioSpec(epochs=5, seed=11, outlier_fraction=0.2)
    a, _ = sim.run_experiment(spec)
    b, _ = sim.run_experiment(spec)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.solution_error, y.solution_error)
        assert x.ps == y.ps


def test_fixed_more_precise_than_float():
    res, summ = sim.run_experiment(sim.ScenarioSpec(epochs=60, seed=4))
    assert summ.fixed_rmse["3d"] < summ.float_rmse["3d"]
    assert all(g > 1.0 for g in summ.precision_gain)


def test_success_rate_increases_with_keypoints():
    """Lidar-aided fix rates with a weak 5-satellite sky, with binomial margins."""
    rates = {}
    for n in (0, 10, 44):
        spec = sim.ScenarioSpec(m=5, n_keypoints=n, epochs=150, seed=9)
        rates[n] = sim.run_experiment(spec)[1].empirical_success_rate
    assert rates[0] < 0.5
    # 150 epochs: a true rate of 0.999 yields >= 147 successes with overwhelming probability
    assert rates[10] >= 147 / 150
    assert rates[44] >= rates[10] - 1 / 150


def test_all_epochs_failing_raises():
    bad = sim.EpochResult(0, 3, 0, np.full(3, np.nan), None, False, False, np.nan, np.nan, error="x")
    with pytest.raises(Exception):
        sim.summarize([bad])
