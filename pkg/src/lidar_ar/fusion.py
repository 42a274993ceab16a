"""Mixed-model (Gauss-Helmert) fusion of DD GNSS and lidar keypoints.

The condition equations are

    lidar:  b + R y_j - c_j = 0                       (3 per keypoint)
    GNSS:   Lambda_bar a + (1 (x) G)(b - b_0) - y_G = 0   (2f(m-1) rows)

with unknowns ``x = [a; b; vec(R)]``.  Linearizing at ``x_0`` gives
``A dx + B^T e + w = 0`` and the weighted least-squares increment
``dx = -(A^T M A)^{-1} A^T M w`` with ``M = (B^T W^{-1} B)^{-1}``.

Blocks that have no observations are dropped from the unknown vector: the
ambiguities when there is no phase (no GNSS, or code-only mode) and the
rotation when there is no lidar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from lidar_ar.ambiguity import AmbiguityProblem
from lidar_ar.errors import ArgumentError, ConfigError, DegenerateGeometryError, RankDeficiencyError
from lidar_ar.gnss_model import (
    DdObservations,
    GnssConfig,
    SatelliteGeometry,
    dd_covariances,
    dd_geometry_matrix,
)
from lidar_ar.lidar_model import KeypointSet, RigidPose, estimate_rigid_transform, lidar_jacobians, nearest_rotation

POSITION_TOL = 1e-8
AMBIGUITY_TOL = 1e-6
MAX_ITERATIONS = 20
RCOND_MIN = 1e-14


@dataclass(frozen=True)
class GnssEpoch:
    """One epoch of DD GNSS data with the model it was observed under."""

    config: GnssConfig
    geometry: SatelliteGeometry
    observations: DdObservations

    def __post_init__(self):
        k = self.config.f * (self.geometry.m - 1)
        if self.observations.dd_code.size != k:
            raise ArgumentError(
                f"expected {k} DD values per observable for f={self.config.f}, m={self.geometry.m}, "
                f"got {self.observations.dd_code.size}"
            )

    @property
    def k(self) -> int:
        return self.config.f * (self.geometry.m - 1)


@dataclass(frozen=True)
class Layout:
    """Where each unknown block lives inside ``x``."""

    n_amb: int
    has_rotation: bool

    @property
    def amb(self) -> slice:
        return slice(0, self.n_amb)

    @property
    def pos(self) -> slice:
        return slice(self.n_amb, self.n_amb + 3)

    @property
    def rot(self) -> slice:
        return slice(self.n_amb + 3, self.n_amb + 12) if self.has_rotation else slice(0, 0)

    @property
    def rest(self) -> slice:
        return slice(self.n_amb, self.size)

    @property
    def size(self) -> int:
        return self.n_amb + 3 + (9 if self.has_rotation else 0)


@dataclass(frozen=True)
class MixedModel:
    """Linearized mixed model at one iterate.

    ``A`` is the Jacobian with respect to the unknowns, ``B_T`` with respect to
    the observations, ``Qy = W^{-1}`` the observation covariance and ``w`` the
    misclosure.
    Lidar rows come first, then GNSS code, then GNSS phase.
    """

    A: np.ndarray
    B_T: np.ndarray
    Qy: np.ndarray
    w: np.ndarray
    layout: Layout

    @property
    def W(self) -> np.ndarray:
        return np.linalg.inv(self.Qy)

    @property
    def M(self) -> np.ndarray:
        M = np.linalg.inv(self.B_T @ self.Qy @ self.B_T.T)
        return 0.5 * (M + M.T)

    def whitened(self) -> tuple[np.ndarray, np.ndarray]:
        """``(L^{-1} A, L^{-1} w)`` with ``L L^T = B Qy B^T``.

        ``A^T M A`` is the Gram matrix of the whitened Jacobian, so the normal
        equations never need to be formed explicitly.
        """
        P = self.B_T @ self.Qy @ self.B_T.T
        try:
            L = np.linalg.cholesky(0.5 * (P + P.T))
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError("condition covariance B Qy B^T is not positive definite") from exc
        return (
            scipy.linalg.solve_triangular(L, self.A, lower=True),
            scipy.linalg.solve_triangular(L, self.w, lower=True),
        )


@dataclass(frozen=True)
class FloatSolution:
    x: np.ndarray
    Q: np.ndarray
    layout: Layout
    iterations: int
    converged: bool
    objective_history: tuple[float, ...] = field(default=())

    @property
    def ambiguities(self) -> np.ndarray:
        return self.x[self.layout.amb]

    @property
    def position(self) -> np.ndarray:
        return self.x[self.layout.pos]

    @property
    def rotation_params(self) -> np.ndarray | None:
        return self.x[self.layout.rot] if self.layout.has_rotation else None

    @property
    def rest(self) -> np.ndarray:
        """Non-ambiguity unknowns ``g = [b; vec(R)]``."""
        return self.x[self.layout.rest]

    @property
    def Q_aa(self) -> np.ndarray:
        return self.Q[self.layout.amb, self.layout.amb]

    @property
    def Q_ga(self) -> np.ndarray:
        return self.Q[self.layout.rest, self.layout.amb]

    @property
    def Q_gg(self) -> np.ndarray:
        return self.Q[self.layout.rest, self.layout.rest]

    @property
    def Q_bb(self) -> np.ndarray:
        return self.Q[self.layout.pos, self.layout.pos]

    def pose(self) -> RigidPose | None:
        """Pose with the unconstrained 3x3 estimate (the linearization point)."""
        if not self.layout.has_rotation:
            return None
        return RigidPose.from_params(np.concatenate([self.position, self.rotation_params]))

    @property
    def rotation(self) -> np.ndarray | None:
        """Estimated rotation projected onto the nearest proper rotation."""
        if not self.layout.has_rotation:
            return None
        return nearest_rotation(self.pose().rotation)

    def ambiguity_problem(self) -> AmbiguityProblem:
        if self.layout.n_amb == 0:
            raise ArgumentError("solution carries no ambiguities")
        return AmbiguityProblem(self.ambiguities, self.Q_aa, self.Q_ga, self.rest, self.Q_gg)

    def to_dict(self) -> dict:
        n = self.x.size
        rows, cols = np.tril_indices(n)
        return {
            "ambiguities": self.ambiguities.tolist(),
            "position": self.position.tolist(),
            "rotation_params": None if self.rotation_params is None else self.rotation_params.tolist(),
            "rotation": None if self.rotation is None else self.rotation.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "covariance_dim": n,
            "covariance_lower": self.Q[rows, cols].tolist(),
        }


def _layout(gnss: GnssEpoch | None, lidar: KeypointSet | None, code_only: bool) -> Layout:
    if gnss is None and lidar is None:
        raise ArgumentError("need GNSS and/or lidar observations")
    n_amb = 0 if gnss is None or code_only else gnss.k
    return Layout(n_amb, lidar is not None)


def assemble_mixed_model(
    gnss: GnssEpoch | None,
    lidar: KeypointSet | None,
    x0,
    code_only: bool = False,
) -> MixedModel:
    """Jacobians, weights and misclosure at the linearization point ``x0``."""
    layout = _layout(gnss, lidar, code_only)
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != layout.size:
        raise ArgumentError(f"x0 has {x0.size} entries, model needs {layout.size}")
    b = x0[layout.pos]

    A_blocks, Bt_blocks, Qy_blocks, w_blocks = [], [], [], []
    if lidar is not None:
        pose = RigidPose.from_params(np.concatenate([b, x0[layout.rot]]))
        A_L, Bt_L, w_L = lidar_jacobians(lidar, pose)
        A = np.zeros((A_L.shape[0], layout.size))
        A[:, layout.pos] = A_L[:, :3]
        A[:, layout.rot] = A_L[:, 3:]
        A_blocks.append(A)
        Bt_blocks.append(Bt_L)
        Qy_blocks.append(np.eye(A_L.shape[0]) * lidar.sigma_L**2)
        w_blocks.append(w_L)

    if gnss is not None:
        cfg, geo, obs = gnss.config, gnss.geometry, gnss.observations
        k = gnss.k
        G = dd_geometry_matrix(geo)
        rho = np.tile(G @ (b - obs.approx_position), cfg.f)
        Q_p, Q_phi = dd_covariances(cfg, geo)
        G_stack = np.kron(np.ones((cfg.f, 1)), G)

        A = np.zeros((k, layout.size))
        A[:, layout.pos] = G_stack
        A_blocks.append(A)
        Qy_blocks.append(Q_p)
        w_blocks.append(rho - obs.dd_code)
        n_rows = k
        if not code_only:
            lam = np.repeat(np.asarray(cfg.wavelengths), geo.m - 1)
            A = np.zeros((k, layout.size))
            A[:, layout.pos] = G_stack
            A[:, layout.amb] = np.diag(lam)
            A_blocks.append(A)
            Qy_blocks.append(Q_phi)
            w_blocks.append(rho + lam * x0[layout.amb] - obs.dd_phase)
            n_rows += k
        Bt_blocks.append(-np.eye(n_rows))

    return MixedModel(
        A=np.vstack(A_blocks),
        B_T=scipy.linalg.block_diag(*Bt_blocks),
        Qy=scipy.linalg.block_diag(*Qy_blocks),
        w=np.concatenate(w_blocks),
        layout=layout,
    )


def _solve_normal(N: np.ndarray, rhs: np.ndarray):
    """Cholesky solve with Jacobi scaling and a conditioning guard.

    Returns ``(solution, inverse)``.
    """
    d = np.diag(N)
    if np.any(~(d > 0)):
        raise RankDeficiencyError("normal matrix has a non-positive diagonal entry")
    s = 1.0 / np.sqrt(d)
    Ns = N * s[:, None] * s[None, :]
    ev = np.linalg.eigvalsh(0.5 * (Ns + Ns.T))
    if ev[0] <= RCOND_MIN * ev[-1]:
        raise RankDeficiencyError(f"normal matrix is rank deficient (rcond={ev[0] / ev[-1]:.3g})")
    try:
        cf = scipy.linalg.cho_factor(Ns, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
        raise RankDeficiencyError("normal matrix is not positive definite") from exc
    sol = s * scipy.linalg.cho_solve(cf, s * rhs)
    inv = scipy.linalg.cho_solve(cf, np.eye(N.shape[0])) * s[:, None] * s[None, :]
    return sol, 0.5 * (inv + inv.T)


def _solve_whitened(Aw: np.ndarray, ww: np.ndarray):
    """Least-squares increment ``argmin |Aw dx + ww|`` and ``(Aw^T Aw)^{-1}``.

    Uses a QR factorization of the column-scaled whitened Jacobian.  Phase
    rows weigh ~1e4 times more than code rows and the ambiguities absorb
    them, so the explicit normal matrix would lose about twice as many
    digits as the orthogonal factorization does.
    """
    norms = np.linalg.norm(Aw, axis=0)
    if np.any(~(norms > 0)):
        raise RankDeficiencyError("normal matrix has a non-positive diagonal entry")
    s = 1.0 / norms
    Qf, R = np.linalg.qr(Aw * s[None, :])
    sv = np.linalg.svd(R, compute_uv=False)
    rcond = (sv[-1] / sv[0]) ** 2
    if not rcond > RCOND_MIN:
        raise RankDeficiencyError(f"normal matrix is rank deficient (rcond={rcond:.3g})")
    dx = -s * scipy.linalg.solve_triangular(R, Qf.T @ ww)
    Rinv = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]))
    cov = (Rinv @ Rinv.T) * s[:, None] * s[None, :]
    return dx, 0.5 * (cov + cov.T)


def wls_iterate(
    model_builder,
    x0,
    tol: float = POSITION_TOL,
    amb_tol: float = AMBIGUITY_TOL,
    max_iter: int = MAX_ITERATIONS,
) -> FloatSolution:
    """Iterate the mixed-model WLS increment until it is negligible.

    ``model_builder(x)`` must return the :class:`MixedModel` linearized at
    ``x``.  Convergence is declared when the infinity norm of the increment
    falls below ``tol`` on position/rotation entries and below ``amb_tol``
    cycles on ambiguities.  Running out of iterations is reported through
    ``converged=False``, not an exception.
    """
    x = np.asarray(x0, dtype=float).ravel().copy()
    history = []
    converged = False
    it = 0
    Q = None
    for it in range(1, max_iter + 1):
        model = model_builder(x)
        Aw, ww = model.whitened()
        dx, Q = _solve_whitened(Aw, ww)
        history.append(float(ww @ ww))
        x = x + dx
        lay = model.layout
        amb_step = np.max(np.abs(dx[lay.amb]), initial=0.0)
        rest_step = np.max(np.abs(dx[lay.rest]), initial=0.0)
        if amb_step < amb_tol and rest_step < tol:
            converged = True
            break
    # covariance and objective at the final iterate
    model = model_builder(x)
    Aw, ww = model.whitened()
    _, Q = _solve_whitened(Aw, ww)
    history.append(float(ww @ ww))
    return FloatSolution(x, Q, model.layout, it, converged, tuple(history))


def code_only_position(gnss: GnssEpoch) -> np.ndarray:
    """Least-squares position from DD code alone (needs ``m >= 4``)."""
    cfg, geo, obs = gnss.config, gnss.geometry, gnss.observations
    G_stack = np.kron(np.ones((cfg.f, 1)), dd_geometry_matrix(geo))
    W_p = np.linalg.inv(dd_covariances(cfg, geo)[0])
    N = G_stack.T @ W_p @ G_stack
    db, _ = _solve_normal(N, G_stack.T @ W_p @ obs.dd_code)
    return obs.approx_position + db


def initial_estimate(gnss: GnssEpoch | None, lidar: KeypointSet | None, code_only: bool = False) -> np.ndarray:
    """Starting point: rigid registration, else code-only LS; float ambiguities from phase."""
    layout = _layout(gnss, lidar, code_only)
    x0 = np.zeros(layout.size)
    if lidar is not None:
        try:
            pose = estimate_rigid_transform(lidar)
        except DegenerateGeometryError as exc:
            raise RankDeficiencyError(f"lidar geometry cannot initialize the pose: {exc}") from exc
        x0[layout.pos] = pose.translation
        x0[layout.rot] = pose.rotation_params
    else:
        x0[layout.pos] = code_only_position(gnss)
    if layout.n_amb:
        cfg, geo, obs = gnss.config, gnss.geometry, gnss.observations
        rho = np.tile(dd_geometry_matrix(geo) @ (x0[layout.pos] - obs.approx_position), cfg.f)
        lam = np.repeat(np.asarray(cfg.wavelengths), geo.m - 1)
        x0[layout.amb] = (obs.dd_phase - rho) / lam
    return x0


def solve_float(
    gnss: GnssEpoch | None,
    lidar: KeypointSet | None,
    code_only: bool = False,
    x0=None,
    **kwargs,
) -> FloatSolution:
    """Float solution of one epoch (GNSS, lidar, or both)."""
    if x0 is None:
        x0 = initial_estimate(gnss, lidar, code_only)
    return wls_iterate(lambda x: assemble_mixed_model(gnss, lidar, x, code_only), x0, **kwargs)


def float_position_only(gnss: GnssEpoch | None, lidar: KeypointSet | None, code_only: bool = False):
    """``(b_hat, Q_bb)`` of the float solution."""
    sol = solve_float(gnss, lidar, code_only)
    return sol.position, sol.Q_bb


# --- epoch bundle JSON ---------------------------------------------------------


def _require(doc: dict, key: str, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ConfigError(f"bundle: missing field '{where}{key}'")
    return doc[key]


def _array(value, where: str, shape=None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bundle: field '{where}' must be numeric") from exc
    if shape is not None and arr.shape != shape:
        raise ConfigError(f"bundle: field '{where}' must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"bundle: field '{where}' contains non-finite values")
    return arr


def epoch_to_bundle(gnss: GnssEpoch | None, lidar: KeypointSet | None, enu_to_frame=None, extra: dict | None = None) -> dict:
    """Serializable epoch bundle (see README for the schema)."""
    doc: dict = {"version": 1}
    if gnss is not None:
        geo = gnss.geometry
        doc["gnss"] = {
            "wavelengths": list(gnss.config.wavelengths),
            "sigma_p": gnss.config.sigma_p,
            "sigma_phi": gnss.config.sigma_phi,
            "equal_weights": bool(geo.equal_weights),
            "pivot": geo.sat_ids[geo.pivot_index],
            "satellites": [
                {"sat_id": sid, "elevation_deg": float(np.degrees(e)), "azimuth_deg": float(np.degrees(a))}
                for sid, e, a in zip(geo.sat_ids, geo.elevations, geo.azimuths)
            ],
            "enu_to_frame": None if enu_to_frame is None else np.asarray(enu_to_frame).tolist(),
            "approx_position": gnss.observations.approx_position.tolist(),
            "dd_code": gnss.observations.dd_code.tolist(),
            "dd_phase": gnss.observations.dd_phase.tolist(),
        }
    if lidar is not None:
        doc["lidar"] = {
            "sigma_L": lidar.sigma_L,
            "rover_points": lidar.rover_points.tolist(),
            "reference_points": lidar.reference_points.tolist(),
        }
    if extra:
        doc.update(extra)
    return doc


def epoch_from_bundle(doc: dict):
    """Parse a bundle into ``(GnssEpoch | None, KeypointSet | None)``.

    Unit vectors are rebuilt from the angles, so the satellite ``enu_to_frame``
    rotation has to match the frame of ``approx_position`` and the lidar
    reference points.
    """
    if not isinstance(doc, dict):
        raise ConfigError("bundle: top level must be a JSON object")
    gnss = lidar = None
    if doc.get("gnss") is not None:
        g = doc["gnss"]
        wl = _array(_require(g, "wavelengths", "gnss."), "gnss.wavelengths")
        sats = _require(g, "satellites", "gnss.")
        if not isinstance(sats, list) or len(sats) < 2:
            raise ConfigError("bundle: field 'gnss.satellites' must list at least 2 satellites")
        ids, el, az = [], [], []
        for i, s in enumerate(sats):
            ids.append(str(_require(s, "sat_id", f"gnss.satellites[{i}].")))
            el.append(float(_array(_require(s, "elevation_deg", f"gnss.satellites[{i}]."), f"gnss.satellites[{i}].elevation_deg")))
            az.append(float(_array(_require(s, "azimuth_deg", f"gnss.satellites[{i}]."), f"gnss.satellites[{i}].azimuth_deg")))
        rot = g.get("enu_to_frame")
        rot = None if rot is None else _array(rot, "gnss.enu_to_frame", (3, 3))
        pivot = g.get("pivot")
        pivot_index = None
        if pivot is not None:
            if str(pivot) not in ids:
                raise ConfigError(f"bundle: field 'gnss.pivot' names unknown satellite {pivot!r}")
            pivot_index = ids.index(str(pivot))
        try:
            cfg = GnssConfig(tuple(wl.ravel()), float(_require(g, "sigma_p", "gnss.")), float(_require(g, "sigma_phi", "gnss.")))
            geo = SatelliteGeometry.from_angles(
                el, az, pivot_index=pivot_index, mask_deg=None, enu_to_frame=rot,
                equal_weights=bool(g.get("equal_weights", False)), sat_ids=ids,
            )
        except ArgumentError as exc:
            raise ConfigError(f"bundle: gnss section invalid: {exc}") from exc
        k = cfg.f * (geo.m - 1)
        obs = DdObservations(
            _array(_require(g, "dd_code", "gnss."), "gnss.dd_code", (k,)),
            _array(_require(g, "dd_phase", "gnss."), "gnss.dd_phase", (k,)),
            _array(g.get("approx_position", [0.0, 0.0, 0.0]), "gnss.approx_position", (3,)),
        )
        gnss = GnssEpoch(cfg, geo, obs)
    if doc.get("lidar") is not None:
        lsec = doc["lidar"]
        y = _array(_require(lsec, "rover_points", "lidar."), "lidar.rover_points")
        c = _array(_require(lsec, "reference_points", "lidar."), "lidar.reference_points")
        if y.ndim != 2 or y.shape[1] != 3 or y.shape != c.shape:
            raise ConfigError("bundle: lidar point lists must be equally long n x 3 arrays")
        try:
            lidar = KeypointSet(y, c, float(_require(lsec, "sigma_L", "lidar.")))
        except (ArgumentError, ValueError) as exc:
            raise ConfigError(f"bundle: lidar section invalid: {exc}") from exc
    if gnss is None and lidar is None:
        raise ConfigError("bundle: needs a 'gnss' and/or 'lidar' section")
    return gnss, lidar


def load_bundle(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return doc
