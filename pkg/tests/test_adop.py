import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_geometry, random_points, random_rotation, random_scenarios
from lidar_ar import adop as A
from lidar_ar import sim
from lidar_ar.ambiguity import bootstrapped_success_rate, decorrelate
from lidar_ar.errors import ArgumentError, DegenerateGeometryError
from lidar_ar.gnss_model import GnssConfig, differencing_matrix, elevation_weights


def code_only_information(cfg, geo):
    """Oracle: normal matrix of stacked DD code, built from first principles."""
    D = differencing_matrix(geo.m, geo.pivot_index)
    Wg_inv = np.diag(1 / elevation_weights(geo))
    C = D.T @ Wg_inv @ D
    G = D.T @ geo.unit_vectors
    return cfg.f * G.T @ np.linalg.inv(2 * cfg.sigma_p**2 * C) @ G


def lidar_only_information(points, sigma_L):
    """Oracle: Schur complement of the explicit 12x12 lidar normal matrix."""
    n = len(points)
    A_L = np.zeros((3 * n, 12))
    for j, y in enumerate(points):
        A_L[3 * j:3 * j + 3, :3] = np.eye(3)
        A_L[3 * j:3 * j + 3, 3:] = np.kron(y, np.eye(3))
    N = A_L.T @ A_L / sigma_L**2
    return N[:3, :3] - N[:3, 3:] @ np.linalg.solve(N[3:, 3:], N[3:, :3])


# -- position variances --------------------------------------------------------------------


def test_symmetric_keypoints_variance():
    pts = np.vstack([np.eye(3), -np.eye(3)])
    assert np.allclose(A.lidar_normal_matrix(pts)[:3, 3:], 0)
    Q = A.lidar_position_variance(pts, 0.2)
    np.testing.assert_allclose(Q, 0.2**2 / 6 * np.eye(3), atol=1e-15)


def test_lidar_variance_scaling(rng):
    pts = random_points(rng, 10)
    np.testing.assert_allclose(A.lidar_position_variance(pts, 0.3), 9 * A.lidar_position_variance(pts, 0.1), rtol=1e-12)


def test_lidar_variance_matches_oracle(rng):
    for _ in range(20):
        pts = random_points(rng, int(rng.integers(4, 50)))
        R = random_rotation(rng)
        np.testing.assert_allclose(
            A.lidar_position_information(pts, 0.15, R), lidar_only_information(pts, 0.15), rtol=1e-8, atol=1e-8
        )


def test_reduced_scale_matches_full(rng):
    for n in (4, 5, 12, 44):
        pts = random_points(rng, n)
        np.testing.assert_allclose(
            A.reduced_position_scale(pts) * np.eye(3), A.reduced_position_normal(pts), rtol=1e-8, atol=1e-10
        )


def test_lidar_variance_degenerate():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)  # coplanar
    with pytest.raises(DegenerateGeometryError):
        A.lidar_position_variance(pts, 0.1)
    with pytest.raises(DegenerateGeometryError):
        A.reduced_position_scale(pts)


def test_gnss_variance_matches_oracle_and_f(rng):
    for _ in range(20):
        geo = random_geometry(rng, int(rng.integers(4, 12)))
        cfg1, cfg2 = GnssConfig.gps(1, 0.3), GnssConfig.gps(2, 0.3)
        Q1 = A.gnss_position_variance(cfg1, geo)
        np.testing.assert_allclose(np.linalg.inv(Q1), code_only_information(cfg1, geo), rtol=1e-9)
        np.testing.assert_allclose(A.gnss_position_variance(cfg2, geo), Q1 / 2, rtol=1e-10)


def test_gnss_variance_pivot_invariant(rng):
    geo = random_geometry(rng, 7)
    cfg = GnssConfig.gps(1)
    ref = A.gnss_position_variance(cfg, geo)
    for p in range(7):
        np.testing.assert_allclose(A.gnss_position_variance(cfg, geo.with_pivot(p)), ref, rtol=1e-10)


def test_gnss_variance_too_few_satellites(rng):
    with pytest.raises(DegenerateGeometryError):
        A.gnss_position_variance(GnssConfig.gps(1), random_geometry(rng, 3))


def test_integrated_information_additivity(rng):
    for cfg, geo, pts, sL, R in random_scenarios(30, seed=5, n_values=(4, 44)):
        sc = A.AnalysisScenario(cfg, geo, pts, sL, R)
        Q_bb, _ = A.integrated_variances(sc)
        lhs = np.linalg.inv(Q_bb)
        rhs = np.linalg.inv(A.gnss_position_variance(cfg, geo)) + np.linalg.inv(A.lidar_position_variance(pts, sL))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-8)


def test_vanishing_lidar_limit(rng):
    geo = random_geometry(rng, 6)
    cfg = GnssConfig.gps(1)
    sc = A.AnalysisScenario(cfg, geo, random_points(rng, 44), 1e6)
    Q_bb, _ = A.integrated_variances(sc)
    np.testing.assert_allclose(Q_bb, A.gnss_position_variance(cfg, geo), rtol=1e-6)


def test_ambiguity_variance_structure(rng):
    """Oracle: propagate phase = G b + Lambda a with the float position from code."""
    geo = random_geometry(rng, 5)
    cfg = GnssConfig.gps(2)
    Q_bb = A.gnss_position_variance(cfg, geo)
    D = differencing_matrix(5, geo.pivot_index)
    C = D.T @ np.diag(1 / elevation_weights(geo)) @ D
    G = D.T @ geo.unit_vectors
    lam = np.repeat(cfg.wavelengths, 4)
    # a = Lambda^{-1}(phi - G b): covariance of phase noise plus propagated position noise
    Gs = np.vstack([G, G])
    Q_phi = np.kron(np.eye(2), 2 * cfg.sigma_phi**2 * C)
    oracle = np.diag(1 / lam) @ (Q_phi + Gs @ Q_bb @ Gs.T) @ np.diag(1 / lam)
    np.testing.assert_allclose(A.ambiguity_variance(cfg, geo, Q_bb), oracle, rtol=1e-12)


# -- ADOP ----------------------------------------------------------------------------------------


def test_adop_scaled_identity():
    assert A.adop(0.3**2 * np.eye(5)) == pytest.approx(0.3)


def test_adop_rejects_non_pd():
    with pytest.raises(ArgumentError):
        A.adop(-np.eye(2))
    with pytest.raises(ArgumentError):
        A.adop(np.eye(4), f=1, m=4)


def test_adop_invariant_under_decorrelation(rng):
    for cfg, geo, pts, sL, R in random_scenarios(10, seed=8, n_values=(0, 44)):
        _, Q_aa = A.integrated_variances(A.AnalysisScenario(cfg, geo, pts, sL, R))
        _, Qz = decorrelate(Q_aa)
        assert A.adop(Qz) == pytest.approx(A.adop(Q_aa), rel=1e-9)


def test_closed_form_equals_determinant(rng):
    for cfg, geo, _, _, _ in random_scenarios(30, seed=9, n_values=(0,)):
        _, Q_aa = A.integrated_variances(A.AnalysisScenario(cfg, geo))
        assert A.adop(Q_aa) == pytest.approx(A.adop_gnss_closed_form(cfg, geo), rel=1e-10)


@pytest.mark.parametrize(
    "f,sigma_p,expected,tol",
    [(2, 0.2, 0.097, 0.001), (1, 0.2, 0.547, 0.005), (1, 0.6, 1.247, 0.005)],
)
def test_closed_form_published_values(f, sigma_p, expected, tol):
    cfg = GnssConfig.normalized(f, sigma_p)
    assert A.adop_gnss_closed_form(cfg, A.equal_weight_geometry(5)) == pytest.approx(expected, abs=tol)


def test_threshold_crossings():
    assert A.smallest_m_below(GnssConfig.normalized(1, 0.2), 0.12) == 8
    assert A.smallest_m_below(GnssConfig.normalized(1, 0.6), 0.12) == 10


def test_success_rates_equal_weight_m5():
    for f, lo, hi in ((1, 0.092, 0.132), (2, 0.999, 1.0)):
        cfg = GnssConfig.normalized(f, 0.2)
        geo = sim.reference_constellation(5, equal_weights=True)
        ps = bootstrapped_success_rate(A.ambiguity_variance(cfg, geo, A.gnss_position_variance(cfg, geo)))
        assert lo <= ps <= hi


def test_success_rate_bound_values():
    from scipy.stats import norm

    for a, k in ((0.12, 1), (0.14, 4), (0.3, 6)):
        expected = (2 * norm.cdf(1 / (2 * a)) - 1) ** k
        assert A.success_rate_upper_bound(a, k) == pytest.approx(expected, rel=1e-12)


# -- eigenvalues and ratio ------------------------------------------------------------------------


def test_generalized_eigen_trivial(rng):
    Q = np.cov(rng.normal(size=(3, 10)))
    np.testing.assert_allclose(A.generalized_eigenvalues(Q, Q), [1, 1, 1], rtol=1e-12)
    np.testing.assert_allclose(A.generalized_eigenvalues(2 * Q, Q), [2, 2, 2], rtol=1e-12)
    with pytest.raises(ArgumentError):
        A.generalized_eigenvalues(-Q, Q)


def test_generalized_eigen_polynomial_oracle(rng):
    for _ in range(20):
        Q = np.cov(rng.normal(size=(3, 10)))
        QL = np.cov(rng.normal(size=(3, 10)))
        xs = np.array([-1.0, 0.0, 1.0, 2.0])
        ys = [np.linalg.det(QL - x * Q) for x in xs]
        roots = np.sort(np.roots(np.polyfit(xs, ys, 3)).real)
        np.testing.assert_allclose(A.generalized_eigenvalues(QL, Q), roots, rtol=1e-9)


def test_ratio_forms_and_bounds():
    for cfg, geo, pts, sL, R in random_scenarios(40, seed=10, n_values=(4, 44)):
        sc = A.AnalysisScenario(cfg, geo, pts, sL, R)
        rr = A.adop_ratio(sc)
        assert 0 < rr.exact <= 1
        assert rr.determinant_form == pytest.approx(rr.exact, rel=1e-9)
        g = rr.eigenvalues
        assert 1 - 1e-9 <= g[0] <= g[1] <= g[2]
        # eigenvalues agree with the generalized problem on the covariances
        Q_bb, _ = A.integrated_variances(sc)
        QL = A.lidar_position_variance(pts, sL, R)
        np.testing.assert_allclose(A.generalized_eigenvalues(QL, Q_bb), g, rtol=1e-7)
        a1, a2, a3 = rr.approximations
        assert a1 <= a2 + 1e-15 and a2 <= a3 + 1e-15
        assert a1 - 1e-12 <= rr.exact <= a3 + 1e-12


def test_adop_gl_equals_adop_g_times_ratio():
    for cfg, geo, pts, sL, R in random_scenarios(20, seed=11, n_values=(4, 44)):
        sc = A.AnalysisScenario(cfg, geo, pts, sL, R)
        rep = A.analyze(sc)
        assert rep.adop_gl == pytest.approx(rep.adop_g * rep.ratio, rel=1e-10)


def test_ratio_vanishing_lidar(rng):
    sc = A.AnalysisScenario(GnssConfig.normalized(1), random_geometry(rng, 6), random_points(rng, 44), 1e6)
    assert A.adop_ratio(sc).exact >= 0.9999


def test_ratio_small_for_few_satellites(rng):
    pts = sim.sample_keypoint_layout(44, rng)
    geo = sim.reference_constellation(3, equal_weights=True)
    assert A.adop_ratio(A.AnalysisScenario(GnssConfig.normalized(1, 0.2), geo, pts, 0.15)).exact < 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 2.0), st.floats(1.01, 5.0))
def test_ratio_monotone_in_sigma_L(seed, s, factor):
    rng = np.random.default_rng(seed)
    geo = random_geometry(rng, int(rng.integers(4, 10)))
    pts = random_points(rng, 10)
    cfg = GnssConfig.gps(1)
    r1 = A.adop_ratio(A.AnalysisScenario(cfg, geo, pts, s)).exact
    r2 = A.adop_ratio(A.AnalysisScenario(cfg, geo, pts, s * factor)).exact
    assert r2 >= r1 - 1e-12


def test_ratio_grows_with_m(rng):
    pts = sim.sample_keypoint_layout(44, rng)
    cfg = GnssConfig.normalized(1)
    r = [A.adop_ratio(A.AnalysisScenario(cfg, sim.reference_constellation(m, True), pts, 0.15)).exact for m in range(4, 13)]
    assert all(b >= a - 1e-12 for a, b in zip(r, r[1:]))


def test_lidar_only_low_m_still_defined(rng):
    pts = sim.sample_keypoint_layout(44, rng)
    sc = A.AnalysisScenario(GnssConfig.normalized(1), sim.reference_constellation(2, True), pts, 0.15)
    rep = A.analyze(sc)
    assert rep.adop_gl > 0 and rep.adop_g > 0


# -- appendix identities ---------------------------------------------------------------------------


def test_appendix_gnss_only_mix_term():
    cfg = GnssConfig.gps(1)
    geo = random_geometry(np.random.default_rng(3), 6)
    Q = A.gnss_position_variance(cfg, geo)
    N_G = A.gnss_position_information(cfg, geo)
    assert np.linalg.det(np.eye(3) + N_G @ Q / cfg.epsilon) == pytest.approx((1 + 1 / cfg.epsilon) ** 3, rel=1e-10)


def test_appendix_identity_random():
    for cfg, geo, pts, sL, R in random_scenarios(40, seed=12):
        sc = A.AnalysisScenario(cfg, geo, pts, sL, R)
        assert A.appendix_identity_check(sc) < 1e-10


def test_product_form_equals_determinant(rng):
    for _ in range(20):
        Q = np.cov(rng.normal(size=(3, 10)))
        QL = Q + np.cov(rng.normal(size=(3, 10)))
        eps = 1e-4
        g = np.array(A.generalized_eigenvalues(QL, Q))
        prod = np.prod(1 - 1 / ((1 + eps) * g))
        det = np.linalg.det(np.eye(3) - np.linalg.solve(QL, Q) / (1 + eps))
        assert prod == pytest.approx(det, rel=1e-9)


def test_batch_matches_single(rng):
    cfg = GnssConfig.normalized(2)
    geo = sim.reference_constellation(5)
    layouts = [sim.sample_keypoint_layout(8, rng) for _ in range(5)]
    info = np.stack([A.reduced_position_normal(p) for p in layouts])
    out = A.lidar_aided_batch(cfg, geo, info / 0.3**2)
    for i, p in enumerate(layouts):
        rep = A.analyze(A.AnalysisScenario(cfg, geo, p, 0.3))
        assert out["adop_gl"][i] == pytest.approx(rep.adop_gl, rel=1e-9)
        np.testing.assert_allclose(out["gammas"][i], rep.eigenvalues, rtol=1e-7)
