"""Lidar keypoint observations, rigid registration and registration metrics.

A keypoint pair relates a measured rover point ``y_j`` (sensor frame) to a
known map point ``c_j`` (earth frame) through ``b + R y_j - c_j = 0``.  The
rotation enters the estimator as the nine entries of ``vec(R)`` (column
stacked), so the observation equations are linear in the unknowns.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lidar_ar.errors import (
    ArgumentError,
    ConfigError,
    DegenerateGeometryError,
    DegenerateWeightError,
    RegistrationError,
)

KEYPOINTS_THEORETICAL_MIN = 4
KEYPOINTS_EMPIRICAL_MIN = 44

RANSAC_THRESHOLD = 0.5
RANSAC_MAX_ITERATIONS = 1000
RANSAC_SAMPLE_SIZE = 4


@dataclass(frozen=True)
class KeypointSet:
    """Matched keypoint pairs with a uniform per-coordinate std. dev."""

    rover_points: np.ndarray
    reference_points: np.ndarray
    sigma_L: float = 0.15

    def __post_init__(self):
        y = np.array(self.rover_points, dtype=float).reshape(-1, 3)
        c = np.array(self.reference_points, dtype=float).reshape(-1, 3)
        if y.shape != c.shape:
            raise ArgumentError("rover and reference point lists differ in length")
        if not self.sigma_L > 0:
            raise DegenerateWeightError(f"sigma_L must be positive, got {self.sigma_L}")
        object.__setattr__(self, "rover_points", y)
        object.__setattr__(self, "reference_points", c)
        object.__setattr__(self, "sigma_L", float(self.sigma_L))

    @property
    def n(self) -> int:
        return self.rover_points.shape[0]

    def subset(self, indices, sigma_L: float | None = None) -> "KeypointSet":
        idx = np.asarray(indices, dtype=int)
        return KeypointSet(
            self.rover_points[idx],
            self.reference_points[idx],
            self.sigma_L if sigma_L is None else sigma_L,
        )


@dataclass(frozen=True)
class RigidPose:
    """Translation ``b`` and rotation ``R`` mapping sensor to earth frame.

    ``R`` is not forced to be orthonormal here because estimator iterates
    carry an unconstrained ``vec(R)``; call :meth:`orthonormalized` to project.
    """

    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        b = np.array(self.translation, dtype=float).ravel()
        R = np.array(self.rotation, dtype=float)
        if b.shape != (3,) or R.shape != (3, 3):
            raise ArgumentError("translation must be a 3-vector and rotation 3x3")
        object.__setattr__(self, "translation", b)
        object.__setattr__(self, "rotation", R)

    @property
    def rotation_params(self) -> np.ndarray:
        return self.rotation.flatten(order="F")

    @property
    def params(self) -> np.ndarray:
        """``[b; vec(R)]``, the 12 lidar unknowns."""
        return np.concatenate([self.translation, self.rotation_params])

    @classmethod
    def from_params(cls, params) -> "RigidPose":
        p = np.asarray(params, dtype=float).ravel()
        if p.size != 12:
            raise ArgumentError("expected 12 pose parameters")
        return cls(p[:3], p[3:].reshape(3, 3, order="F"))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.zeros(3), np.eye(3))

    def orthonormalized(self) -> "RigidPose":
        return RigidPose(self.translation, nearest_rotation(self.rotation))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        R = self.rotation
        return float(np.linalg.norm(R.T @ R - np.eye(3)))


@dataclass(frozen=True)
class RegistrationReport:
    pose: RigidPose
    inlier_indices: np.ndarray
    sigma_L: float
    sre: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "rotation": self.pose.rotation.ravel().tolist(),
            "translation": self.pose.translation.tolist(),
            "inlier_indices": [int(i) for i in self.inlier_indices],
            "sigma_L": self.sigma_L,
            "sre": self.sre,
        }


def nearest_rotation(M) -> np.ndarray:
    """Closest proper rotation to ``M`` in the Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def lidar_jacobians(keypoints: KeypointSet, pose: RigidPose):
    """Linearized lidar equations at ``pose``.

    Returns ``(A_L, B_L_T, w_L)``: the ``3n x 12`` design matrix with respect
    to ``[b; vec(R)]``, the ``3n x 3n`` measurement Jacobian ``I_n (x) R`` and
    the misclosure ``b + R y_j - c_j`` stacked per keypoint.
    """
    y = keypoints.rover_points
    n = y.shape[0]
    eye3 = np.eye(3)
    A_L = np.zeros((3 * n, 12))
    A_L[:, :3] = np.tile(eye3, (n, 1))
    # block j is kron(y_j^T, I_3): entry (i, 3c + k) = y_j[c] * delta_ik
    A_L[:, 3:] = np.einsum("jc,ik->jick", y, eye3).reshape(3 * n, 9)
    B_L_T = np.kron(np.eye(n), pose.rotation)
    w_L = (pose.apply(y) - keypoints.reference_points).ravel()
    return A_L, B_L_T, w_L


def lidar_weight_matrix(keypoints: KeypointSet) -> np.ndarray:
    if not keypoints.sigma_L > 0:  # pragma: no cover - guarded by KeypointSet
        raise DegenerateWeightError("sigma_L must be positive")
    return np.eye(3 * keypoints.n) / keypoints.sigma_L**2


def estimate_rigid_transform(correspondences: KeypointSet) -> RigidPose:
    """Least-squares rigid transform (SVD/Kabsch) with ``det(R) = +1``."""
    y = correspondences.rover_points
    c = correspondences.reference_points
    if y.shape[0] < 3:
        raise DegenerateGeometryError("need at least 3 correspondences")
    cy, cc = y.mean(axis=0), c.mean(axis=0)
    Y, C = y - cy, c - cc
    sv = np.linalg.svd(Y, compute_uv=False)
    scale = max(sv[0], 1e-300)
    if sv[1] <= 1e-9 * scale or sv[0] == 0:
        raise DegenerateGeometryError("rover points are collinear or coincident")
    H = Y.T @ C
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    b = cc - R @ cy
    return RigidPose(b, R)


def _residual_distances(correspondences: KeypointSet, pose: RigidPose) -> np.ndarray:
    return np.linalg.norm(pose.apply(correspondences.rover_points) - correspondences.reference_points, axis=1)


def ransac_register(
    correspondences: KeypointSet,
    inlier_threshold: float = RANSAC_THRESHOLD,
    max_iterations: int = RANSAC_MAX_ITERATIONS,
    seed=None,
    confidence: float = 0.9999,
) -> RegistrationReport:
    """Robust rigid registration with 4-point minimal samples.

    Iteration stops early once the usual ``log(1-p)/log(1-w^s)`` bound for
    the current best inlier ratio ``w`` is reached.  ``sigma_L`` in the
    report is the RMS inlier residual distance.
    """
    n = correspondences.n
    if n < RANSAC_SAMPLE_SIZE:
        raise RegistrationError(f"need at least {RANSAC_SAMPLE_SIZE} correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best: np.ndarray | None = None
    best_count = 0
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        sample = rng.choice(n, RANSAC_SAMPLE_SIZE, replace=False)
        try:
            pose = estimate_rigid_transform(correspondences.subset(sample))
        except DegenerateGeometryError:
            continue
        inliers = np.flatnonzero(_residual_distances(correspondences, pose) < inlier_threshold)
        if inliers.size > best_count:
            best, best_count = inliers, inliers.size
            ratio = best_count / n
            if ratio >= 1.0:
                break
            p_good = ratio**RANSAC_SAMPLE_SIZE
            if p_good > 0:
                needed = math.ceil(math.log(1 - confidence) / math.log(1 - p_good))

    if best is None or best_count < RANSAC_SAMPLE_SIZE:
        raise RegistrationError("no consensus set of at least 4 correspondences")

    inliers = best
    for _ in range(5):
        pose = estimate_rigid_transform(correspondences.subset(inliers))
        refreshed = np.flatnonzero(_residual_distances(correspondences, pose) < inlier_threshold)
        if refreshed.size < RANSAC_SAMPLE_SIZE or np.array_equal(refreshed, inliers):
            break
        inliers = refreshed
    pose = estimate_rigid_transform(correspondences.subset(inliers))

    inlier_set = correspondences.subset(inliers)
    v = _residual_distances(inlier_set, pose)
    sigma = float(np.sqrt(np.sum(v**2) / v.size))
    sre = scaled_registration_error(pose.apply(inlier_set.rover_points), inlier_set.reference_points)
    return RegistrationReport(pose, inliers, sigma, sre, it)


def scaled_registration_error(registered, ground_truth) -> float:
    """Mean of per-point error divided by distance to the registered centroid.

    Points sitting on the centroid are skipped with a warning.
    """
    P = np.asarray(registered, dtype=float).reshape(-1, 3)
    U = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    if P.shape != U.shape or P.shape[0] == 0:
        raise ArgumentError("point lists must be non-empty and equally long")
    radius = np.linalg.norm(P - P.mean(axis=0), axis=1)
    err = np.linalg.norm(P - U, axis=1)
    keep = radius > 1e-12 * max(1.0, float(radius.max(initial=0.0)))
    if not np.any(keep):
        raise DegenerateGeometryError("all points coincide with their centroid")
    if not np.all(keep):
        warnings.warn(f"skipping {int(np.sum(~keep))} point(s) at the centroid", RuntimeWarning, stacklevel=2)
    return float(np.mean(err[keep] / radius[keep]))


def load_keypoints_csv(path, sigma_L: float = 0.15) -> KeypointSet:
    """Read ``x_l,y_l,z_l,x_e,y_e,z_e`` rows."""
    path = Path(path)
    cols = ["x_l", "y_l", "z_l", "x_e", "y_e", "z_e"]
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != cols:
            raise ConfigError(f"{path}: header must be {','.join(cols)}, got {reader.fieldnames}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in cols])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad numeric value") from exc
    data = np.array(rows, dtype=float).reshape(-1, 6)
    return KeypointSet(data[:, :3], data[:, 3:], sigma_L)
