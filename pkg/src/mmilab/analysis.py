"""Geometry of the parameter cloud: mean scatter, ellipsoid volume and elongation,
eigen-projections and per-state variance volume change."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from mmilab.gauss_hmm import AcousticModel, ContractError


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns).  Sweeps stop once
    the off-diagonal Frobenius norm is below ``tol`` times the full norm.
    """
    A = np.array(a, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("matrix must be square")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ContractError("matrix must be symmetric")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.triu(A, 1) ** 2)) * 2.0)
        if off <= tol * scale or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                h = A[q, q] - A[p, p]
                if abs(h) + 100.0 * abs(apq) == abs(h):
                    t = apq / h  # tiny angle; avoids overflowing theta
                else:
                    theta = h / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p and q
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def unit_sphere_area(d: int) -> float:
    """(d-1)-measure of the unit sphere in R^d; reported alongside the ball constant."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def mahalanobis(x, y, sigma) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    S = np.asarray(sigma, dtype=float)
    if S.shape != (x.size, x.size) or y.shape != x.shape:
        raise ContractError("dimension mismatch")
    w, U = jacobi_eigh(S)
    if w[0] <= 1e-14 * max(1.0, abs(w[-1])):
        raise ContractError("covariance must be positive definite")
    z = U.T @ (x - y)
    return float(math.sqrt(max(0.0, float(np.sum(z * z / w)))))


@dataclass(frozen=True)
class ScatterReport:
    centroid: np.ndarray
    scatter: np.ndarray
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns
    elongation: float  # nan when the smallest eigenvalue is zero
    log_volume: float  # -inf when the scatter is singular

    @property
    def degenerate(self) -> bool:
        return not self.eigenvalues[0] > 0.0


def mean_scatter(model: AcousticModel) -> ScatterReport:
    mu = model.means
    if mu.shape[0] < 2:
        raise ContractError("need at least two states")
    c = mu.mean(axis=0)
    D = mu - c
    T = D.T @ D / mu.shape[0]
    w, U = jacobi_eigh(T)
    w = np.where(np.abs(w) < 1e-15 * max(1.0, abs(w[-1])), 0.0, w)
    d = T.shape[0]
    if w[0] > 0.0:
        c_ratio = math.sqrt(w[-1] / w[0])
        logv = math.log(unit_ball_volume(d)) + 0.5 * float(np.sum(np.log(w)))
    else:
        c_ratio = math.nan
        logv = -math.inf
    return ScatterReport(c, T, w, U, c_ratio, logv)


def elongation_ratio(report: ScatterReport) -> float:
    if report.degenerate:
        raise ContractError("degenerate scatter: smallest eigenvalue is zero")
    return report.elongation


def project_means(model: AcousticModel, basis, centroid) -> List[Tuple[float, float]]:
    lo, hi = (np.asarray(b, dtype=float) for b in basis)
    if abs(lo @ hi) > 1e-8 or abs(lo @ lo - 1) > 1e-8 or abs(hi @ hi - 1) > 1e-8:
        raise ContractError("basis must be orthonormal")
    D = model.means - np.asarray(centroid, dtype=float)
    return [(float(r @ lo), float(r @ hi)) for r in D]


@dataclass(frozen=True)
class VarianceVolumeReport:
    per_state: np.ndarray
    fraction_negative: float


def variance_volume_change(before: AcousticModel, after: AcousticModel) -> VarianceVolumeReport:
    if before.variances.shape != after.variances.shape:
        raise ContractError("models have different architectures")
    v = 0.5 * np.sum(np.log(after.variances) - np.log(before.variances), axis=1)
    return VarianceVolumeReport(v, float(np.mean(v < 0)))


def count_floored(model: AcousticModel) -> int:
    return int(np.sum(model.variances <= model.floor[None, :]))


@dataclass(frozen=True)
class Comparison:
    before: ScatterReport
    after: ScatterReport
    volume: VarianceVolumeReport
    log_volume_ratio: float
    floored_before: int
    floored_after: int
    n_components: int


def compare_models(before: AcousticModel, after: AcousticModel) -> Comparison:
    if before.means.shape != after.means.shape:
        raise ContractError("models have different architectures")
    a, b = mean_scatter(before), mean_scatter(after)
    if math.isinf(a.log_volume) and math.isinf(b.log_volume):
        ratio = 0.0
    else:
        ratio = b.log_volume - a.log_volume
    return Comparison(a, b, variance_volume_change(before, after), ratio,
                      count_floored(before), count_floored(after), int(before.variances.size))
