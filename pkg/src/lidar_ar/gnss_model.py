"""Double-differenced (DD) GNSS observation model for short baselines.

Observations are stacked frequency-major: for ``f`` frequencies and ``m``
satellites the code vector is ``[p_1(s_1..s_{m-1}), ..., p_f(...)]`` and the
phase vector follows the same order, so the wavelength block is
``kron(diag(lambdas), I_{m-1})``.

All lengths are meters, ambiguities are cycles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lidar_ar.errors import ArgumentError, ConfigError, DegenerateWeightError

GPS_L1_WAVELENGTH = 0.190293672798
GPS_L2_WAVELENGTH = 0.244210213425
GPS_L5_WAVELENGTH = 0.254828048791
_GPS_WAVELENGTHS = (GPS_L1_WAVELENGTH, GPS_L2_WAVELENGTH, GPS_L5_WAVELENGTH)

DEFAULT_MASK_DEG = 10.0


@dataclass(frozen=True)
class GnssConfig:
    """Receiver precision and frequency plan.

    ``sigma_p`` and ``sigma_phi`` are zenith-referenced standard deviations of
    undifferenced code and phase, in meters.
    """

    wavelengths: tuple[float, ...]
    sigma_p: float = 0.2
    sigma_phi: float = 0.002

    def __post_init__(self):
        object.__setattr__(self, "wavelengths", tuple(float(w) for w in self.wavelengths))
        if len(self.wavelengths) < 1:
            raise ArgumentError("at least one frequency is required")
        if any(not w > 0 for w in self.wavelengths):
            raise ArgumentError(f"wavelengths must be positive, got {self.wavelengths}")
        if not self.sigma_p > 0 or not self.sigma_phi > 0:
            raise DegenerateWeightError("sigma_p and sigma_phi must be positive")
        if not self.epsilon < 1:
            raise ArgumentError(
                f"phase must be more precise than code (epsilon={self.epsilon:.3g})"
            )

    @property
    def f(self) -> int:
        return len(self.wavelengths)

    @property
    def epsilon(self) -> float:
        """Phase-to-code variance ratio."""
        return self.sigma_phi**2 / self.sigma_p**2

    @property
    def wavelength_matrix(self) -> np.ndarray:
        return np.diag(self.wavelengths)

    @property
    def mean_wavelength(self) -> float:
        """Geometric mean of the wavelengths."""
        return float(np.exp(np.mean(np.log(self.wavelengths))))

    @classmethod
    def gps(cls, f: int = 1, sigma_p: float = 0.2, sigma_phi: float = 0.002) -> "GnssConfig":
        """GPS L1 (f=1) or L1/L2 (f=2)."""
        if f not in (1, 2):
            raise ArgumentError("GPS presets exist for f=1 (L1) and f=2 (L1/L2)")
        lams = (GPS_L1_WAVELENGTH, GPS_L2_WAVELENGTH)[:f]
        return cls(lams, sigma_p, sigma_phi)

    @classmethod
    def normalized(
        cls, f: int, sigma_p: float = 0.2, sigma_phi: float = 0.002, phase_ratio: float = 0.01
    ) -> "GnssConfig":
        """Config with mean wavelength ``sigma_phi / phase_ratio``.

        With ``phase_ratio=0.01`` the phase precision is 1% of a cycle, a
        common normalization for wavelength-independent ADOP studies.  For
        ``f > 1`` the GPS L1/L2(/L5) wavelength ratios are kept and the set is
        rescaled so that its geometric mean hits the target; identical
        wavelengths would make the extra frequencies nearly useless for
        ambiguity resolution.
        """
        if f < 1:
            raise ArgumentError("f must be >= 1")
        if f > len(_GPS_WAVELENGTHS):
            raise ArgumentError(f"at most {len(_GPS_WAVELENGTHS)} frequencies supported")
        if not phase_ratio > 0:
            raise ArgumentError("phase_ratio must be positive")
        base = np.array(_GPS_WAVELENGTHS[:f])
        scale = (sigma_phi / phase_ratio) / np.exp(np.mean(np.log(base)))
        return cls(tuple(float(v) for v in base * scale), sigma_p, sigma_phi)


@dataclass(frozen=True)
class SatelliteGeometry:
    """Visible satellites as seen from the receiver.

    ``unit_vectors`` are satellite-to-receiver directions (the partial
    derivative of range with respect to receiver position), one row per
    satellite, expressed in whichever frame the position is estimated in.
    Set ``equal_weights`` to replace the elevation weights by the identity.
    """

    unit_vectors: np.ndarray
    elevations: np.ndarray
    azimuths: np.ndarray
    pivot_index: int = 0
    equal_weights: bool = False
    sat_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        u = np.array(self.unit_vectors, dtype=float).reshape(-1, 3)
        el = np.array(self.elevations, dtype=float).ravel()
        az = np.array(self.azimuths, dtype=float).ravel()
        if u.shape[0] < 2:
            raise ArgumentError(f"need at least 2 satellites, got {u.shape[0]}")
        if el.shape[0] != u.shape[0] or az.shape[0] != u.shape[0]:
            raise ArgumentError("unit_vectors, elevations and azimuths differ in length")
        if np.any(np.abs(np.linalg.norm(u, axis=1) - 1.0) > 1e-12):
            raise ArgumentError("unit vectors must have unit norm")
        if np.any(el < 0) or np.any(el > np.pi / 2 + 1e-12):
            raise ArgumentError("elevations must lie in [0, pi/2]")
        if not 0 <= self.pivot_index < u.shape[0]:
            raise ArgumentError(f"pivot_index {self.pivot_index} out of range for m={u.shape[0]}")
        ids = tuple(self.sat_ids) or tuple(f"S{i + 1:02d}" for i in range(u.shape[0]))
        if len(ids) != u.shape[0]:
            raise ArgumentError("sat_ids length differs from satellite count")
        u.setflags(write=False)
        el.setflags(write=False)
        az.setflags(write=False)
        object.__setattr__(self, "unit_vectors", u)
        object.__setattr__(self, "elevations", el)
        object.__setattr__(self, "azimuths", az)
        object.__setattr__(self, "sat_ids", ids)

    @property
    def m(self) -> int:
        return self.unit_vectors.shape[0]

    @classmethod
    def from_angles(
        cls,
        elevations_deg,
        azimuths_deg,
        pivot_index: int | None = None,
        mask_deg: float | None = DEFAULT_MASK_DEG,
        enu_to_frame: np.ndarray | None = None,
        equal_weights: bool = False,
        sat_ids=(),
    ) -> "SatelliteGeometry":
        """Build geometry from elevation/azimuth in degrees.

        Satellites below ``mask_deg`` are dropped.  The pivot defaults to the
        highest satellite.  ``enu_to_frame`` rotates local East-North-Up unit
        vectors into the estimation frame (e.g. ECEF); identity if omitted.
        """
        el = np.radians(np.asarray(elevations_deg, dtype=float).ravel())
        az = np.radians(np.asarray(azimuths_deg, dtype=float).ravel())
        if el.shape != az.shape:
            raise ArgumentError("elevation and azimuth lists differ in length")
        ids = tuple(sat_ids) or tuple(f"S{i + 1:02d}" for i in range(el.size))
        if mask_deg is not None:
            keep = el >= np.radians(mask_deg)
            el, az = el[keep], az[keep]
            ids = tuple(i for i, k in zip(ids, keep) if k)
        los = np.column_stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
        u = -los
        if enu_to_frame is not None:
            u = u @ np.asarray(enu_to_frame, dtype=float).T
            u /= np.linalg.norm(u, axis=1, keepdims=True)
        if pivot_index is None:
            pivot_index = int(np.argmax(el)) if el.size else 0
        return cls(u, el, az, pivot_index, equal_weights, ids)

    def subset(self, indices) -> "SatelliteGeometry":
        """Geometry restricted to ``indices``; pivot re-chosen as highest."""
        idx = list(indices)
        el = self.elevations[idx]
        return SatelliteGeometry(
            self.unit_vectors[idx],
            el,
            self.azimuths[idx],
            int(np.argmax(el)),
            self.equal_weights,
            tuple(self.sat_ids[i] for i in idx),
        )

    def with_pivot(self, pivot_index: int) -> "SatelliteGeometry":
        return SatelliteGeometry(
            self.unit_vectors, self.elevations, self.azimuths, pivot_index,
            self.equal_weights, self.sat_ids,
        )

    def with_equal_weights(self, flag: bool = True) -> "SatelliteGeometry":
        return SatelliteGeometry(
            self.unit_vectors, self.elevations, self.azimuths, self.pivot_index,
            flag, self.sat_ids,
        )


@dataclass(frozen=True)
class DdObservations:
    """Observed-minus-computed DD code and phase, in meters.

    ``approx_position`` is the receiver position the computed ranges were
    linearized about; the code rows read ``G (b - approx_position)``.
    """

    dd_code: np.ndarray
    dd_phase: np.ndarray
    approx_position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        p = np.array(self.dd_code, dtype=float).ravel()
        phi = np.array(self.dd_phase, dtype=float).ravel()
        b0 = np.array(self.approx_position, dtype=float).ravel()
        if p.shape != phi.shape:
            raise ArgumentError("dd_code and dd_phase differ in length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(phi))):
            raise ArgumentError("DD observations must be finite")
        if b0.shape != (3,):
            raise ArgumentError("approx_position must be a 3-vector")
        object.__setattr__(self, "dd_code", p)
        object.__setattr__(self, "dd_phase", phi)
        object.__setattr__(self, "approx_position", b0)

    @property
    def y(self) -> np.ndarray:
        """Stacked ``[code; phase]`` vector."""
        return np.concatenate([self.dd_code, self.dd_phase])


def differencing_matrix(m: int, pivot_index: int = 0) -> np.ndarray:
    """``m x (m-1)`` matrix D with ``D.T @ x = x_s - x_pivot`` for s != pivot."""
    if m < 2:
        raise ArgumentError(f"need m >= 2, got {m}")
    if not 0 <= pivot_index < m:
        raise ArgumentError(f"pivot_index {pivot_index} out of range for m={m}")
    others = [s for s in range(m) if s != pivot_index]
    D = np.zeros((m, m - 1))
    D[others, np.arange(m - 1)] = 1.0
    D[pivot_index, :] = -1.0
    return D


def elevation_weights(geometry: SatelliteGeometry) -> np.ndarray:
    """Diagonal of the undifferenced weight matrix, ``sin^2(elevation)``."""
    if geometry.equal_weights:
        return np.ones(geometry.m)
    w = np.sin(geometry.elevations) ** 2
    if np.any(w <= 0):
        raise DegenerateWeightError("a satellite at zero elevation has zero weight")
    return w


def elevation_weight_matrix(geometry: SatelliteGeometry) -> np.ndarray:
    return np.diag(elevation_weights(geometry))


def weight_factor(weights) -> float:
    """``w_o = [sum(w) / prod(w)]^(1/(2(m-1)))``; equals ``m^(1/(2(m-1)))`` for unit weights."""
    w = np.asarray(weights, dtype=float)
    m = w.size
    log_ratio = np.log(np.sum(w)) - np.sum(np.log(w))
    return float(np.exp(log_ratio / (2 * (m - 1))))


def dd_cofactor(geometry: SatelliteGeometry) -> np.ndarray:
    """``D^T W_G^{-1} D`` for the geometry's pivot."""
    D = differencing_matrix(geometry.m, geometry.pivot_index)
    return D.T @ (D / elevation_weights(geometry)[:, None])


def dd_weight_matrices(config: GnssConfig, geometry: SatelliteGeometry):
    """Weights of the stacked DD code and phase vectors.

    Returns ``(W_p, W_phi)``, each ``f(m-1)`` square and block diagonal over
    frequencies.  ``W_phi = W_p / epsilon`` exactly.
    """
    C = dd_cofactor(geometry)
    try:
        Cinv = np.linalg.inv(C)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for positive weights
        raise DegenerateWeightError("DD cofactor matrix is singular") from exc
    Cinv = 0.5 * (Cinv + Cinv.T)
    eye_f = np.eye(config.f)
    W_p = np.kron(eye_f, Cinv / (2.0 * config.sigma_p**2))
    W_phi = np.kron(eye_f, Cinv / (2.0 * config.sigma_phi**2))
    return W_p, W_phi


def dd_covariances(config: GnssConfig, geometry: SatelliteGeometry):
    """Inverses of :func:`dd_weight_matrices`, formed without inversion."""
    C = dd_cofactor(geometry)
    eye_f = np.eye(config.f)
    return (
        np.kron(eye_f, 2.0 * config.sigma_p**2 * C),
        np.kron(eye_f, 2.0 * config.sigma_phi**2 * C),
    )


def dd_geometry_matrix(geometry: SatelliteGeometry) -> np.ndarray:
    """``G = D^T Gbar``, shape ``(m-1, 3)``."""
    D = differencing_matrix(geometry.m, geometry.pivot_index)
    return D.T @ geometry.unit_vectors


def gnss_design_matrices(config: GnssConfig, geometry: SatelliteGeometry):
    """Design blocks of the DD model.

    Returns ``(Lambda_bar, A_G, G)`` where ``Lambda_bar`` is
    ``2f(m-1) x f(m-1)`` with zeros on the code rows, ``A_G`` is
    ``2f(m-1) x 12`` (3 position columns, 9 zero rotation columns) and ``G`` is
    the ``(m-1) x 3`` DD geometry matrix.
    """
    k = config.f * (geometry.m - 1)
    G = dd_geometry_matrix(geometry)
    lam_block = np.kron(config.wavelength_matrix, np.eye(geometry.m - 1))
    Lambda_bar = np.vstack([np.zeros((k, k)), lam_block])
    A_G = np.zeros((2 * k, 12))
    A_G[:, :3] = np.kron(np.ones((2 * config.f, 1)), G)
    return Lambda_bar, A_G, G


def simulate_dd_observations(
    config: GnssConfig,
    geometry: SatelliteGeometry,
    true_position_offset,
    true_ambiguities,
    noise_seed=None,
    noise: bool = True,
    approx_position=None,
) -> DdObservations:
    """Synthesize DD observations that obey the linearized model.

    Noise is drawn per receiver and per satellite with variance
    ``sigma^2 / w_s``, differenced between a rover and a base receiver, then
    between satellites.  ``noise_seed`` may be an int, a ``SeedSequence`` or a
    ``Generator``.
    """
    m, f = geometry.m, config.f
    k = f * (m - 1)
    a = np.asarray(true_ambiguities, dtype=float).ravel()
    if a.size != k:
        raise ArgumentError(f"expected {k} ambiguities, got {a.size}")
    db = np.asarray(true_position_offset, dtype=float).ravel()
    if db.shape != (3,):
        raise ArgumentError("true_position_offset must be a 3-vector")

    G = dd_geometry_matrix(geometry)
    rho = np.tile(G @ db, f)
    lam = np.repeat(np.asarray(config.wavelengths), m - 1)
    code = rho.copy()
    phase = rho + lam * a

    if noise:
        rng = np.random.default_rng(noise_seed)
        D = differencing_matrix(m, geometry.pivot_index)
        sd = 1.0 / np.sqrt(elevation_weights(geometry))
        for sigma, target in ((config.sigma_p, code), (config.sigma_phi, phase)):
            # (frequency, receiver, satellite) undifferenced errors
            e = rng.standard_normal((f, 2, m)) * (sigma * sd)
            single = e[:, 0, :] - e[:, 1, :]
            target += (single @ D).ravel()

    b0 = np.zeros(3) if approx_position is None else approx_position
    return DdObservations(code, phase, b0)


def load_geometry_csv(path, mask_deg: float | None = DEFAULT_MASK_DEG, **kwargs) -> SatelliteGeometry:
    """Read ``sat_id,elevation_deg,azimuth_deg`` rows (exact header required)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["sat_id", "elevation_deg", "azimuth_deg"]
        if reader.fieldnames != expected:
            raise ConfigError(f"{path}: header must be {','.join(expected)}, got {reader.fieldnames}")
        ids, el, az = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                el.append(float(row["elevation_deg"]))
                az.append(float(row["azimuth_deg"]))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad numeric value") from exc
            ids.append(row["sat_id"])
    return SatelliteGeometry.from_angles(el, az, mask_deg=mask_deg, sat_ids=ids, **kwargs)
