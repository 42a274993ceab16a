"""Closed-form precision analysis of the single-epoch GNSS-lidar model.

Position information from the two sensors adds:

    Q_bb^{-1} = f/(2 sigma_p^2) Gbar^T W_G P Gbar + Nbar_bb / sigma_L^2

where ``P = W_G^{-1} D (D^T W_G^{-1} D)^{-1} D^T`` and ``Nbar_bb`` is the
position block of the lidar normal matrix after eliminating the nine
rotation unknowns.  Phase only determines the float ambiguities, so

    Q_aa = 2 sigma_phi^2 Lambda^{-2} (x) C + Lambda^{-1} 1 Lambda^{-1} (x) G Q_bb G^T

with ``C = D^T W_G^{-1} D`` and ``G = D^T Gbar``.  Working with information
matrices rather than covariances keeps every quantity defined when either
sensor alone cannot fix the position (fewer than four satellites, or no
lidar).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from lidar_ar.errors import ArgumentError, DegenerateGeometryError, RankDeficiencyError
from lidar_ar.gnss_model import (
    GnssConfig,
    SatelliteGeometry,
    dd_cofactor,
    dd_geometry_matrix,
    elevation_weights,
    weight_factor,
)

ADOP_THRESHOLD_999 = 0.12
ADOP_THRESHOLD_99 = 0.14


@dataclass(frozen=True)
class AnalysisScenario:
    """Inputs of the a-priori analysis.

    ``rover_points`` are keypoint coordinates in the sensor frame (``n x 3``)
    or ``None`` for GNSS-only; ``rotation`` is the sensor-to-earth rotation
    the lidar Jacobian is evaluated at.
    """

    config: GnssConfig
    geometry: SatelliteGeometry
    rover_points: np.ndarray | None = None
    sigma_L: float = 0.15
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def has_lidar(self) -> bool:
        return self.rover_points is not None and len(self.rover_points) > 0

    @property
    def k(self) -> int:
        """Number of DD ambiguities, ``f(m-1)``."""
        return self.config.f * (self.geometry.m - 1)


@dataclass(frozen=True)
class RatioResult:
    exact: float
    determinant_form: float
    approximations: tuple[float, float, float]
    eigenvalues: tuple[float, float, float]


@dataclass(frozen=True)
class AdopReport:
    adop_g: float
    adop_gl: float | None
    ratio: float
    eigenvalues: tuple[float, float, float]
    approx_ratios: tuple[float, float, float]
    success_rate: float | None = None


# -- lidar ------------------------------------------------------------------


def lidar_normal_matrix(rover_points, rotation=None) -> np.ndarray:
    """Unit-weight normal matrix ``A_L^T M_L A_L`` over ``[b; vec(R)]``."""
    y = np.asarray(rover_points, dtype=float).reshape(-1, 3)
    n = y.shape[0]
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    # M_L = (I_n (x) R R^T)^{-1}; kept general for non-orthonormal iterates
    Minv = np.linalg.inv(R @ R.T)
    A = np.zeros((3 * n, 12))
    A[:, :3] = np.tile(np.eye(3), (n, 1))
    A[:, 3:] = np.einsum("jc,ik->jick", y, np.eye(3)).reshape(3 * n, 9)
    MA = np.einsum("ab,nbc->nac", Minv, A.reshape(n, 3, 12)).reshape(3 * n, 12)
    return A.T @ MA


def reduced_position_normal(rover_points, rotation=None) -> np.ndarray:
    """``N_bb - N_br N_rr^{-1} N_br^T`` (unit weight)."""
    N = lidar_normal_matrix(rover_points, rotation)
    N_bb, N_br, N_rr = N[:3, :3], N[:3, 3:], N[3:, 3:]
    try:
        c = scipy.linalg.cho_factor(N_rr)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("keypoints are coplanar or too few to fix the rotation") from exc
    Nbar = N_bb - N_br @ scipy.linalg.cho_solve(c, N_br.T)
    Nbar = 0.5 * (Nbar + Nbar.T)
    if np.min(np.linalg.eigvalsh(Nbar)) <= 1e-12 * np.trace(N_bb):
        raise DegenerateGeometryError("reduced lidar normal matrix is not positive definite")
    return Nbar


def reduced_position_scale(rover_points) -> float:
    """Scalar ``c`` with ``Nbar_bb = c I`` for an orthonormal rotation.

    Because the rotation block of the lidar Jacobian is ``y_j^T (x) I``, the
    reduced normal matrix collapses to ``(n - s^T (Y^T Y)^{-1} s) I`` with
    ``s`` the sum of the rover points: a cheap equivalent of
    :func:`reduced_position_normal` used by the large sweeps.
    """
    y = np.asarray(rover_points, dtype=float).reshape(-1, 3)
    n = y.shape[0]
    s = y.sum(axis=0)
    try:
        c = scipy.linalg.cho_factor(y.T @ y)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("keypoints are coplanar or too few to fix the rotation") from exc
    value = float(n - s @ scipy.linalg.cho_solve(c, s))
    if value <= 1e-12 * 3 * n:
        raise DegenerateGeometryError("reduced lidar normal matrix is not positive definite")
    return value


def lidar_position_information(rover_points, sigma_L: float, rotation=None) -> np.ndarray:
    return reduced_position_normal(rover_points, rotation) / sigma_L**2


def lidar_position_variance(rover_points, sigma_L: float, rotation=None) -> np.ndarray:
    """Lidar-only position covariance ``sigma_L^2 Nbar_bb^{-1}``."""
    Nbar = reduced_position_normal(rover_points, rotation)
    return sigma_L**2 * np.linalg.inv(Nbar)


# -- GNSS -------------------------------------------------------------------


def _projected_normal(geometry: SatelliteGeometry) -> np.ndarray:
    """``Gbar^T W_G P Gbar`` = ``G^T (D^T W_G^{-1} D)^{-1} G``."""
    G = dd_geometry_matrix(geometry)
    C = dd_cofactor(geometry)
    out = G.T @ np.linalg.solve(C, G)
    return 0.5 * (out + out.T)


def gnss_position_information(config: GnssConfig, geometry: SatelliteGeometry) -> np.ndarray:
    """Code-only position information; singular when ``m < 4``."""
    return config.f / (2.0 * config.sigma_p**2) * _projected_normal(geometry)


def gnss_position_variance(config: GnssConfig, geometry: SatelliteGeometry) -> np.ndarray:
    """GNSS code-only position covariance."""
    if geometry.m < 4:
        raise DegenerateGeometryError(f"GNSS-only position needs m >= 4, got {geometry.m}")
    N = _projected_normal(geometry)
    if np.linalg.matrix_rank(dd_geometry_matrix(geometry), tol=1e-10) < 3:
        raise DegenerateGeometryError("satellite geometry has rank < 3")
    return 2.0 * config.sigma_p**2 / config.f * np.linalg.inv(N)


# -- integrated -------------------------------------------------------------


def position_information(scenario: AnalysisScenario) -> np.ndarray:
    N = gnss_position_information(scenario.config, scenario.geometry)
    if scenario.has_lidar:
        N = N + lidar_position_information(scenario.rover_points, scenario.sigma_L, scenario.rotation)
    return N


def _inverse_pd(N: np.ndarray, what: str) -> np.ndarray:
    w = np.linalg.eigvalsh(N)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        raise RankDeficiencyError(f"{what} is singular")
    Q = np.linalg.inv(N)
    return 0.5 * (Q + Q.T)


def ambiguity_variance(config: GnssConfig, geometry: SatelliteGeometry, Q_bb) -> np.ndarray:
    """Float ambiguity covariance given the float position covariance."""
    G = dd_geometry_matrix(geometry)
    C = dd_cofactor(geometry)
    lam_inv = 1.0 / np.asarray(config.wavelengths)
    phase = np.kron(np.diag(lam_inv**2), 2.0 * config.sigma_phi**2 * C)
    geom = np.kron(np.outer(lam_inv, lam_inv), G @ Q_bb @ G.T)
    Q = phase + geom
    return 0.5 * (Q + Q.T)


def integrated_variances(scenario: AnalysisScenario):
    """Float position and ambiguity covariances ``(Q_bb, Q_aa)``."""
    Q_bb = _inverse_pd(position_information(scenario), "position information matrix")
    return Q_bb, ambiguity_variance(scenario.config, scenario.geometry, Q_bb)


# -- ADOP -------------------------------------------------------------------


def log_det_pd(Q) -> float:
    Q = np.asarray(Q, dtype=float)
    try:
        c = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise ArgumentError("matrix is not positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def adop(Q_aa, f: int | None = None, m: int | None = None) -> float:
    """``|Q_aa|^(1/(2k))`` in cycles, via a Cholesky log-determinant."""
    Q = np.asarray(Q_aa, dtype=float)
    k = Q.shape[0]
    if f is not None and m is not None and f * (m - 1) != k:
        raise ArgumentError(f"Q_aa is {k}x{k} but f(m-1) = {f * (m - 1)}")
    return float(np.exp(log_det_pd(Q) / (2 * k)))


def adop_gnss_closed_form(config: GnssConfig, geometry: SatelliteGeometry) -> float:
    """GNSS-only single-epoch ADOP from weights, precisions and wavelengths."""
    m, f = geometry.m, config.f
    w_o = weight_factor(elevation_weights(geometry))
    expo = 3.0 / (2 * f * (m - 1))
    return float(
        np.sqrt(2.0) * w_o * config.sigma_phi / config.mean_wavelength
        * np.exp(expo * np.log1p(1.0 / config.epsilon))
    )


def generalized_eigenvalues(Q_L, Q) -> tuple[float, float, float]:
    """Roots of ``|Q_L - gamma Q| = 0`` in ascending order."""
    Q_L = np.asarray(Q_L, dtype=float)
    Q = np.asarray(Q, dtype=float)
    for M, name in ((Q_L, "Q_L"), (Q, "Q")):
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise ArgumentError(f"{name} is not positive definite") from exc
    g = scipy.linalg.eigh(0.5 * (Q_L + Q_L.T), 0.5 * (Q + Q.T), eigvals_only=True)
    return tuple(float(v) for v in np.sort(g))


def _ratio_from_information(N_G, Q_bb, N_L, eps: float, k: int):
    """Ratio pieces without needing an invertible ``N_L`` or ``N_G``.

    With ``Q = (N_G + N_L)^{-1}`` the eigenvalues ``mu`` of ``N_G Q`` lie in
    ``[0, 1]`` and ``1/gamma = 1 - mu``, so each factor
    ``1 - 1/((1+eps) gamma)`` equals ``(eps + mu)/(1 + eps)`` with no
    cancellation when lidar dominates.
    """
    c = np.linalg.cholesky(Q_bb)
    mu = np.clip(np.linalg.eigvalsh(c.T @ N_G @ c), 0.0, 1.0)
    factors = (eps + mu) / (1.0 + eps)
    exact = float(np.exp(np.sum(np.log(factors)) / (2 * k)))
    det_form = np.linalg.det(np.eye(3) - N_L @ Q_bb / (1.0 + eps))
    det_form = float(det_form ** (1.0 / (2 * k)))
    with np.errstate(divide="ignore"):
        gammas = tuple(float(v) for v in 1.0 / (1.0 - mu))
    approx = tuple(float(factors[i] ** (3.0 / (2 * k))) for i in range(3))
    return exact, det_form, approx, gammas


def adop_ratio(scenario: AnalysisScenario) -> RatioResult:
    """ADOP^GL / ADOP^G, exactly and with the three single-eigenvalue approximations."""
    cfg, geo = scenario.config, scenario.geometry
    k = scenario.k
    if not scenario.has_lidar:
        return RatioResult(1.0, 1.0, (1.0, 1.0, 1.0), (np.inf, np.inf, np.inf))
    N_G = gnss_position_information(cfg, geo)
    N_L = lidar_position_information(scenario.rover_points, scenario.sigma_L, scenario.rotation)
    Q_bb = _inverse_pd(N_G + N_L, "position information matrix")
    exact, det_form, approx, gammas = _ratio_from_information(N_G, Q_bb, N_L, cfg.epsilon, k)
    return RatioResult(exact, det_form, approx, gammas)


def analyze(scenario: AnalysisScenario, with_success_rate: bool = False) -> AdopReport:
    from lidar_ar.ambiguity import bootstrapped_success_rate

    adop_g = adop_gnss_closed_form(scenario.config, scenario.geometry)
    ratio = adop_ratio(scenario)
    adop_gl = None
    ps = None
    if scenario.has_lidar or scenario.geometry.m >= 4:
        _, Q_aa = integrated_variances(scenario)
        if scenario.has_lidar:
            adop_gl = adop(Q_aa)
        if with_success_rate:
            ps = bootstrapped_success_rate(Q_aa)
    return AdopReport(adop_g, adop_gl, ratio.exact, ratio.eigenvalues, ratio.approximations, ps)


# -- determinant identities ---------------------------------------------------


def qaa_determinant_forms(scenario: AnalysisScenario) -> dict[str, float]:
    """``log|Q_aa|`` evaluated three independent ways.

    * ``direct``: Cholesky of the assembled ambiguity covariance;
    * ``factorized``: phase term times ``|I + (1/eps) Q_G^{-1} Q_bb|``;
    * ``adop``: ``2k log(ADOP^G * ratio)`` using the generalized eigenvalues.
    """
    cfg, geo = scenario.config, scenario.geometry
    k = scenario.k
    Q_bb, Q_aa = integrated_variances(scenario)
    direct = log_det_pd(Q_aa)

    N_G = gnss_position_information(cfg, geo)
    lam_logdet = float(np.sum(np.log(cfg.wavelengths)))
    C_logdet = np.linalg.slogdet(dd_cofactor(geo))[1]
    sign, mix_logdet = np.linalg.slogdet(np.eye(3) + N_G @ Q_bb / cfg.epsilon)
    if sign <= 0:  # pragma: no cover - I + PSD*PD always has positive determinant
        raise ArgumentError("non-positive determinant in factorized form")
    factorized = (
        2 * k * np.log(np.sqrt(2.0) * cfg.sigma_phi)
        - 2 * (geo.m - 1) * lam_logdet
        + cfg.f * C_logdet
        + mix_logdet
    )

    ratio = adop_ratio(scenario).exact
    via_adop = 2 * k * np.log(adop_gnss_closed_form(cfg, geo) * ratio)
    return {"direct": float(direct), "factorized": float(factorized), "adop": float(via_adop)}


def appendix_identity_check(scenario: AnalysisScenario) -> float:
    """Largest pairwise relative discrepancy between the ``|Q_aa|`` evaluations."""
    forms = qaa_determinant_forms(scenario)
    vals = list(forms.values())
    worst = 0.0
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            # relative discrepancy of the determinants themselves
            worst = max(worst, abs(np.expm1(vals[i] - vals[j])))
    return float(worst)


def smallest_m_below(config: GnssConfig, threshold: float = ADOP_THRESHOLD_999, m_max: int = 40) -> int | None:
    """Smallest satellite count whose equal-weight ADOP^G is at most ``threshold``."""
    for m in range(2, m_max + 1):
        geo = equal_weight_geometry(m)
        if adop_gnss_closed_form(config, geo) <= threshold:
            return m
    return None


def equal_weight_geometry(m: int, seed: int = 0) -> SatelliteGeometry:
    """A spread constellation flagged for equal weights.

    The closed-form ADOP does not depend on the directions; they matter for
    success rates and position covariances.
    """
    from lidar_ar.sim import generic_constellation

    return generic_constellation(m).with_equal_weights(True)


def success_rate_upper_bound(adop_value, k: int):
    """ADOP-based success-rate approximation ``(2 Phi(1/(2 ADOP)) - 1)^k``.

    It is an upper bound of the integer bootstrapped success rate and is the
    quantity the ADOP thresholds (0.12 and 0.14 cycles) are tied to.
    """
    from scipy.special import erf

    a = np.asarray(adop_value, dtype=float)
    return erf(1.0 / (2.0 * np.sqrt(2.0) * a)) ** k


def lidar_aided_batch(config: GnssConfig, geometry: SatelliteGeometry, lidar_information) -> dict[str, np.ndarray]:
    """ADOP^GL, ratio and eigenvalues for a stack of lidar information matrices.

    ``lidar_information`` is ``(t, 3, 3)``; returns arrays of length ``t``
    (``gammas`` is ``(t, 3)``).  Same algebra as :func:`adop_ratio`, batched.
    """
    N_L = np.asarray(lidar_information, dtype=float).reshape(-1, 3, 3)
    k = config.f * (geometry.m - 1)
    eps = config.epsilon
    N_G = gnss_position_information(config, geometry)
    N = N_G[None] + N_L
    Q = np.linalg.inv(N)
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
    c = np.linalg.cholesky(Q)
    mu = np.clip(np.linalg.eigvalsh(np.swapaxes(c, 1, 2) @ N_G[None] @ c), 0.0, 1.0)
    ratio = np.exp(np.sum(np.log((eps + mu) / (1.0 + eps)), axis=1) / (2 * k))
    with np.errstate(divide="ignore"):
        gammas = 1.0 / (1.0 - mu)
    adop_g = adop_gnss_closed_form(config, geometry)
    return {"adop_g": np.full(N_L.shape[0], adop_g), "adop_gl": adop_g * ratio, "ratio": ratio, "gammas": gammas}
