"""Brute-force reference implementations used by the test suite.

Everything here is correctness-first and O(n^2) or worse: truncated-series
matrix exponentials, linear-scan spatial queries, exhaustive matching, joint
batch pose fusion, hash-grouped voxel moments, closed-form 3x3 eigen solves,
and dense plane fits.  None of it is used on the fast paths.
"""

from __future__ import annotations

import numpy as np

from .. import lie


def se3_exp_series(xi, terms=20):
    """Truncated power series of the 4x4 matrix exponential of a twist."""
    xi = np.asarray(xi, dtype=float)
    m = np.zeros((4, 4))
    m[:3, :3] = lie.hat(xi[:3])
    m[:3, 3] = xi[3:]
    out = np.eye(4)
    power = np.eye(4)
    factorial = 1.0
    for k in range(1, terms + 1):
        power = power @ m
        factorial *= k
        out = out + power / factorial
    return out


def numeric_left_jacobian(xi, eps=1e-5):
    """SE(3) left Jacobian built by central differences of the exponential.

    Column i approximates d/de log(exp(xi + e e_i) exp(-xi)) at e = 0.
    """
    xi = np.asarray(xi, dtype=float)
    inv = lie.se3_exp(xi).inverse()
    out = np.zeros((6, 6))
    for i in range(6):
        step = np.zeros(6)
        step[i] = eps
        plus = lie.se3_log(lie.se3_exp(xi + step) @ inv)
        minus = lie.se3_log(lie.se3_exp(xi - step) @ inv)
        out[:, i] = (plus - minus) / (2.0 * eps)
    return out


class LinearScanIndex:
    """Shadow spatial index: a dict and a scan, nothing else."""

    def __init__(self):
        self.points = {}

    def insert(self, key, point):
        self.points[key] = np.asarray(point, dtype=float)

    def remove(self, key):
        del self.points[key]

    def query_radius(self, center, radius):
        center = np.asarray(center, dtype=float)
        return sorted(
            k for k, p in self.points.items() if np.linalg.norm(p - center) <= radius
        )


def match_surfels_exhaustive(src, surfels_by_id, theta_r, theta_d):
    """Evaluate both matching gates against every map surfel."""
    matched = []
    for key, dst in surfels_by_id.items():
        delta = src.centroid - dst.centroid
        along = float(dst.normal @ delta)
        in_plane = float(np.linalg.norm(delta - along * dst.normal))
        if in_plane >= theta_r:
            continue
        sigma_sq = float(
            src.normal @ src.centroid_cov @ src.normal
            + dst.normal @ dst.centroid_cov @ dst.normal
        )
        if abs(along) / np.sqrt(sigma_sq) < theta_d:
            matched.append(key)
    return sorted(matched)


def batch_pose_fusion(poses, covariances, max_iterations=100, tol=1e-14):
    """Jointly minimize the summed squared pose errors over all estimates.

    Gauss-Newton on ``0.5 * sum_n log(T T_n^-1)^T Sigma_n^-1 log(T T_n^-1)``
    with the inverse left Jacobian as the exact derivative of the residual
    under a left perturbation of ``T``.
    """
    estimate = poses[0]
    infos = [np.linalg.inv(c) for c in covariances]
    normal = np.zeros((6, 6))
    for _ in range(max_iterations):
        normal = np.zeros((6, 6))
        rhs = np.zeros(6)
        for pose, info in zip(poses, infos):
            eps_n = lie.se3_log(estimate @ pose.inverse())
            jac = lie.se3_left_jacobian_inv(eps_n)
            normal += jac.T @ info @ jac
            rhs += jac.T @ info @ eps_n
        delta = -np.linalg.solve(normal, rhs)
        estimate = lie.se3_exp(delta) @ estimate
        if np.linalg.norm(delta) < tol:
            break
    return estimate, np.linalg.inv(normal)


def voxel_moments_bruteforce(points, times, resolution):
    """Per-voxel mean, sample covariance, count, and mean time by plain grouping."""
    groups = {}
    for p, t in zip(points, times):
        key = tuple(int(np.floor(c / resolution)) for c in p)
        groups.setdefault(key, []).append((p, t))
    out = {}
    for key, members in groups.items():
        pts = np.array([p for p, _ in members])
        ts = np.array([t for _, t in members])
        mean = pts.mean(axis=0)
        if len(pts) > 1:
            cov = (pts - mean).T @ (pts - mean) / (len(pts) - 1)
        else:
            cov = np.zeros((3, 3))
        out[key] = (mean, cov, len(pts), ts.mean())
    return out


def plane_fit_residuals(points):
    """Unsigned distances of points from their own total-least-squares plane."""
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    return np.abs(centered @ normal)


def eig3_symmetric_closed_form(matrix):
    """Eigenvalues (descending) and smallest-eigenvalue eigenvector of a
    symmetric 3x3 matrix via the characteristic polynomial (trigonometric
    solution), independent of any packaged eigen solver."""
    a = np.asarray(matrix, dtype=float)
    q = np.trace(a) / 3.0
    b = a - q * np.eye(3)
    p2 = float(np.sum(b * b)) / 6.0
    if p2 <= 0.0:
        eigenvalues = np.array([q, q, q])
    else:
        p = np.sqrt(p2)
        det = np.linalg.det(b / p) / 2.0
        det = np.clip(det, -1.0, 1.0)
        phi = np.arccos(det) / 3.0
        eig1 = q + 2.0 * p * np.cos(phi)
        eig3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
        eig2 = 3.0 * q - eig1 - eig3
        eigenvalues = np.array([eig1, eig2, eig3])
    smallest = eigenvalues[2]
    # Null-space direction of (A - lambda I) from its two most independent rows.
    m = a - smallest * np.eye(3)
    best = np.zeros(3)
    best_norm = -1.0
    for i in range(3):
        for j in range(i + 1, 3):
            cand = np.cross(m[i], m[j])
            norm = np.linalg.norm(cand)
            if norm > best_norm:
                best_norm = norm
                best = cand
    if best_norm <= 0.0:
        best = np.array([0.0, 0.0, 1.0])
        best_norm = 1.0
    return eigenvalues, best / np.linalg.norm(best)
