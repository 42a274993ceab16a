"""Integer least-squares ambiguity resolution (LAMBDA).

The float covariance is factored as ``Q = L^T diag(d) L`` with ``L`` unit
lower triangular, working from the last ambiguity towards the first.
Integer Gauss transformations and permutations then decorrelate it
(``z = Z^T a``, ``Q_z = Z^T Q Z``), and a depth-first search with a shrinking
ellipsoid enumerates the best candidates exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lidar_ar.errors import ArgumentError, SearchSpaceError

DEFAULT_THRESHOLD = 0.999
DEFAULT_CANDIDATES = 2
MAX_SEARCH_STEPS = 2_000_000


@dataclass(frozen=True)
class AmbiguityProblem:
    """Float ambiguities with the rest of the float solution.

    ``float_rest`` holds the non-ambiguity unknowns (position first).
    """

    float_ambiguities: np.ndarray
    Q_aa: np.ndarray
    Q_ga: np.ndarray
    float_rest: np.ndarray
    Q_gg: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.float_ambiguities, dtype=float).ravel()
        g = np.asarray(self.float_rest, dtype=float).ravel()
        Q_aa = np.asarray(self.Q_aa, dtype=float).reshape(a.size, a.size)
        Q_ga = np.asarray(self.Q_ga, dtype=float).reshape(g.size, a.size)
        Q_gg = np.asarray(self.Q_gg, dtype=float).reshape(g.size, g.size)
        for name, val in (("float_ambiguities", a), ("Q_aa", Q_aa), ("Q_ga", Q_ga), ("float_rest", g), ("Q_gg", Q_gg)):
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class AmbiguityOutcome:
    fixed_integers: np.ndarray
    formal_success_rate: float
    accepted: bool
    fixed_rest: np.ndarray | None
    Q_fixed: np.ndarray | None
    squared_norms: np.ndarray
    candidates: np.ndarray

    @property
    def fixed_position(self) -> np.ndarray | None:
        return None if self.fixed_rest is None else self.fixed_rest[:3]


def _check_pd(Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
        raise ArgumentError("covariance must be a non-empty square matrix")
    if not np.allclose(Q, Q.T, rtol=1e-9, atol=1e-12 * np.max(np.abs(Q))):
        raise ArgumentError("covariance must be symmetric")
    return 0.5 * (Q + Q.T)


def ltdl(Q) -> tuple[np.ndarray, np.ndarray]:
    """Factor ``Q = L^T diag(d) L`` (unit lower triangular ``L``)."""
    A = _check_pd(Q).copy()
    n = A.shape[0]
    L = np.zeros((n, n))
    d = np.zeros(n)
    for i in range(n - 1, -1, -1):
        d[i] = A[i, i]
        if not d[i] > 0:
            raise ArgumentError("covariance is not positive definite")
        L[i, : i + 1] = A[i, : i + 1] / math.sqrt(d[i])
        for j in range(i):
            A[j, : j + 1] -= L[i, : j + 1] * L[i, j]
        L[i, : i + 1] /= L[i, i]
    return L, d


def _round(x: float) -> float:
    return math.floor(x + 0.5)


def _gauss(L, Z, i, j):
    mu = _round(L[i, j])
    if mu != 0:
        L[i:, j] -= mu * L[i:, i]
        Z[:, j] -= mu * Z[:, i]


def _perm(L, d, j, delta, Z):
    eta = d[j] / delta
    lam = d[j + 1] * L[j + 1, j] / delta
    d[j] = eta * d[j + 1]
    d[j + 1] = delta
    if j > 0:
        block = L[j : j + 2, :j].copy()
        L[j, :j] = -L[j + 1, j] * block[0] + block[1]
        L[j + 1, :j] = eta * block[0] + lam * block[1]
    L[j + 1, j] = lam
    L[j + 2 :, [j, j + 1]] = L[j + 2 :, [j + 1, j]]
    Z[:, [j, j + 1]] = Z[:, [j + 1, j]]


def _reduce(Q):
    L, d = ltdl(Q)
    n = d.size
    Z = np.eye(n)
    j = k = n - 2
    while j >= 0:
        if j <= k:
            for i in range(j + 1, n):
                _gauss(L, Z, i, j)
        delta = d[j] + L[j + 1, j] ** 2 * d[j + 1]
        if delta + 1e-6 < d[j + 1]:
            _perm(L, d, j, delta, Z)
            k = j
            j = n - 2
        else:
            j -= 1
    return Z, L, d


def decorrelate(Q_aa):
    """Integer decorrelation.

    Returns ``(Z, Q_zz)`` with integer unimodular ``Z`` and
    ``Q_zz = Z^T Q_aa Z``.
    """
    Q = _check_pd(Q_aa)
    Z, _, _ = _reduce(Q)
    Z = np.rint(Z)
    Q_zz = Z.T @ Q @ Z
    return Z, 0.5 * (Q_zz + Q_zz.T)


def _sgn(x: float) -> float:
    return -1.0 if x <= 0 else 1.0


def _search(zs, L, d, ncands, max_steps):
    n = zs.size
    S = np.zeros((n, n))
    dist = np.zeros(n)
    zb = np.zeros(n)
    z = np.zeros(n)
    step = np.zeros(n)
    cands = np.zeros((ncands, n))
    norms = np.full(ncands, np.inf)
    found = 0
    imax = 0
    maxdist = np.inf

    k = n - 1
    zb[k] = zs[k]
    z[k] = _round(zb[k])
    y = zb[k] - z[k]
    step[k] = _sgn(y)
    for _ in range(max_steps):
        newdist = dist[k] + y * y / d[k]
        if newdist < maxdist:
            if k != 0:
                k -= 1
                dist[k] = newdist
                S[k, : k + 1] = S[k + 1, : k + 1] + (z[k + 1] - zb[k + 1]) * L[k + 1, : k + 1]
                zb[k] = zs[k] + S[k, k]
                z[k] = _round(zb[k])
                y = zb[k] - z[k]
                step[k] = _sgn(y)
            else:
                if found < ncands:
                    if found == 0 or newdist > norms[imax]:
                        imax = found
                    cands[found] = z
                    norms[found] = newdist
                    found += 1
                    if found == ncands:
                        maxdist = norms[imax]
                else:
                    if newdist < norms[imax]:
                        cands[imax] = z
                        norms[imax] = newdist
                        imax = int(np.argmax(norms))
                    maxdist = norms[imax]
                z[0] += step[0]
                y = zb[0] - z[0]
                step[0] = -step[0] - _sgn(step[0])
        else:
            if k == n - 1:
                break
            k += 1
            z[k] += step[k]
            y = zb[k] - z[k]
            step[k] = -step[k] - _sgn(step[k])
    else:
        raise SearchSpaceError(f"integer search exceeded {max_steps} steps")
    return cands[:found], norms[:found]


def ils_search(a_float, Q_aa, num_candidates: int = DEFAULT_CANDIDATES, max_steps: int = MAX_SEARCH_STEPS):
    """Exact integer least-squares candidates.

    Returns ``(candidates, squared_norms)``: the ``num_candidates`` integer
    vectors closest to ``a_float`` in the ``Q_aa^{-1}`` metric, ascending by
    norm, ties broken lexicographically.
    """
    a = np.asarray(a_float, dtype=float).ravel()
    Q = _check_pd(Q_aa)
    if Q.shape[0] != a.size:
        raise ArgumentError("a_float and Q_aa dimensions differ")
    if num_candidates < 1:
        raise ArgumentError("num_candidates must be >= 1")
    Z, L, d = _reduce(Q)
    Z = np.rint(Z)
    # shift by the rounded float vector to keep the search numerically centred
    shift = np.rint(a)
    zs = Z.T @ (a - shift)
    zc, norms = _search(zs, L, d, num_candidates, max_steps)
    Zinv_T = np.rint(np.linalg.inv(Z.T))
    cand = np.rint(zc @ Zinv_T.T) + shift
    # recompute norms in the original metric so ties compare exactly
    r = a - cand
    norms = np.einsum("ij,ij->i", r, np.linalg.solve(Q, r.T).T)
    order = np.lexsort(tuple(cand[:, ::-1].T) + (np.round(norms, 12),))
    return cand[order].astype(np.int64), norms[order]


def conditional_variances(Q_aa) -> np.ndarray:
    """Sequential conditional variances of the decorrelated ambiguities."""
    _, _, d = _reduce(Q_aa)
    return d


def bootstrapped_success_rate(Q_aa) -> float:
    """Bootstrapped success rate of the decorrelated ambiguities."""
    d = conditional_variances(Q_aa)
    ps = 1.0
    for di in d:
        ps *= math.erf(1.0 / (2.0 * math.sqrt(2.0 * di)))
    return float(min(max(ps, 0.0), 1.0))


def fix_and_backsubstitute(problem: AmbiguityProblem, a_fixed):
    """Condition the remaining unknowns on fixed integers.

    Returns ``(g_fixed, Q_fixed)``.
    """
    a_fixed = np.asarray(a_fixed, dtype=float).ravel()
    if a_fixed.shape != problem.float_ambiguities.shape:
        raise ArgumentError("fixed and float ambiguity vectors differ in length")
    try:
        c = np.linalg.cholesky(problem.Q_aa)
    except np.linalg.LinAlgError as exc:
        raise ArgumentError("Q_aa is singular or not positive definite") from exc
    # K = Q_ga Q_aa^{-1} via two triangular solves
    K = np.linalg.solve(c.T, np.linalg.solve(c, problem.Q_ga.T)).T
    g = problem.float_rest - K @ (problem.float_ambiguities - a_fixed)
    Q = problem.Q_gg - K @ problem.Q_ga.T
    return g, 0.5 * (Q + Q.T)


def acceptance_test(success_rate: float, threshold: float = DEFAULT_THRESHOLD, full_ar: bool = False) -> bool:
    """Accept the fix when the formal success rate reaches ``threshold``.

    ``full_ar`` bypasses the test and always accepts.
    """
    return True if full_ar else success_rate >= threshold


def resolve(
    problem: AmbiguityProblem,
    threshold: float = DEFAULT_THRESHOLD,
    full_ar: bool = False,
    num_candidates: int = DEFAULT_CANDIDATES,
) -> AmbiguityOutcome:
    """Search, evaluate the success rate, test and back-substitute."""
    cands, norms = ils_search(problem.float_ambiguities, problem.Q_aa, num_candidates)
    ps = bootstrapped_success_rate(problem.Q_aa)
    accepted = acceptance_test(ps, threshold, full_ar)
    a_fixed = cands[0]
    g = Qg = None
    if accepted:
        g, Qg = fix_and_backsubstitute(problem, a_fixed)
    return AmbiguityOutcome(a_fixed, ps, accepted, g, Qg, norms, cands)
