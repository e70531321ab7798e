"""SO(3)/SE(3) algebra: exponential and logarithm maps, pose interpolation,
and the left Jacobian used by pose fusion.

Twist ordering is fixed as (rotational, translational): a twist is a 6-vector
``xi = [rx, ry, rz, tx, ty, tz]`` with the rotational part in radians
(rotation vector) and the translational part in meters.  All updates in this
package are left perturbations, ``T <- exp(xi) * T``.

Rotations are stored as 3x3 matrices.  Poses re-orthonormalize themselves by
polar projection every ``REORTHONORMALIZE_EVERY`` compositions to bound
accumulated drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AmbiguousLogarithmError, InvalidArgumentError, OutOfRangeError

REORTHONORMALIZE_EVERY = 1000

# Taylor-series branch thresholds.  Below SMALL_ANGLE the closed forms are
# 0/0; below SERIES_ANGLE the closed forms lose digits to cancellation.
SMALL_ANGLE = 1e-8
SERIES_ANGLE = 0.02

_MAX_LOG_ANGLE = np.pi - 1e-6


def hat(v):
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    """Inverse of :func:`hat` for an exactly antisymmetric matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _sinc(theta):
    # sin(theta)/theta
    if theta < SMALL_ANGLE:
        return 1.0 - theta * theta / 6.0
    return np.sin(theta) / theta


def _cos_coeff(theta):
    # (1 - cos(theta)) / theta^2, via 2 sin^2(theta/2) to avoid cancellation
    if theta < SMALL_ANGLE:
        return 0.5 - theta * theta / 24.0
    s = np.sin(0.5 * theta)
    return 2.0 * s * s / (theta * theta)


def _one_minus_sinc_coeff(theta):
    # (theta - sin(theta)) / theta^3
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    return (theta - np.sin(theta)) / theta**3


def _jl_inv_coeff(theta):
    # 1/theta^2 - (1 + cos(theta)) / (2 theta sin(theta))
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    return 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))


def so3_exp(r):
    """Rodrigues formula for a rotation vector."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    k = hat(r)
    return np.eye(3) + _sinc(theta) * k + _cos_coeff(theta) * (k @ k)


def so3_log(rotation):
    """Rotation vector of a rotation matrix; rejects angles at/near pi."""
    w = 0.5 * np.array(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    )
    s = np.linalg.norm(w)  # sin(theta)
    c = 0.5 * (np.trace(rotation) - 1.0)  # cos(theta)
    theta = np.arctan2(s, c)
    if theta >= _MAX_LOG_ANGLE:
        raise AmbiguousLogarithmError(
            f"rotation angle {theta:.9f} rad is within 1e-6 of pi; logarithm ambiguous"
        )
    if theta < SMALL_ANGLE:
        return w
    return w * (theta / s)


def so3_left_jacobian(r):
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    k = hat(r)
    return np.eye(3) + _cos_coeff(theta) * k + _one_minus_sinc_coeff(theta) * (k @ k)


def so3_left_jacobian_inv(r):
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    k = hat(r)
    return np.eye(3) - 0.5 * k + _jl_inv_coeff(theta) * (k @ k)


def polar_projection(m):
    """Nearest rotation matrix in Frobenius norm (det +1 branch)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    u[:, -1] *= d
    return u @ vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3); maps sensor-frame points p to R p + t."""

    rotation: np.ndarray
    translation: np.ndarray
    _compositions: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float)
        translation = np.asarray(self.translation, dtype=float)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidArgumentError("Pose needs a 3x3 rotation and a 3-vector")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidArgumentError("Pose entries must be finite")
        defect = np.linalg.norm(rotation.T @ rotation - np.eye(3))
        if defect > 1e-6 or np.linalg.det(rotation) < 0.0:
            raise InvalidArgumentError(
                f"rotation is not orthonormal (defect {defect:.2e})"
            )
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m):
        return Pose(np.array(m[:3, :3]), np.array(m[:3, 3]))

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        rotation = self.rotation @ other.rotation
        translation = self.rotation @ other.translation + self.translation
        count = self._compositions + other._compositions + 1
        if count >= REORTHONORMALIZE_EVERY:
            rotation = polar_projection(rotation)
            count = 0
        return Pose(rotation, translation, count)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation, self._compositions)

    def apply(self, points):
        """Transform one point (3,) or a batch (N, 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation


def se3_exp(xi) -> Pose:
    """Matrix exponential of a twist (rotational, translational)."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,) or not np.all(np.isfinite(xi)):
        raise InvalidArgumentError("twist must be a finite 6-vector")
    r, t = xi[:3], xi[3:]
    return Pose(so3_exp(r), so3_left_jacobian(r) @ t)


def se3_log(pose: Pose):
    """Twist such that ``se3_exp(se3_log(T)) == T``; angle must be below pi."""
    r = so3_log(pose.rotation)
    t = so3_left_jacobian_inv(r) @ pose.translation
    return np.concatenate([r, t])


def _se3_q_matrix(r, t):
    # Coupling block of the SE(3) left Jacobian (Baker-Campbell-Hausdorff terms).
    theta = np.linalg.norm(r)
    rx = hat(r)
    tx = hat(t)
    rxtx = rx @ tx
    txrx = tx @ rx
    rxtxrx = rxtx @ rx
    if theta < 0.1:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        t3, t4, t5 = theta**3, theta**4, theta**5
        c1 = (theta - s) / t3
        c2 = -(1.0 - theta * theta / 2.0 - c) / t4
        c3 = -0.5 * (
            (1.0 - theta * theta / 2.0 - c) / t4 - 3.0 * (theta - s - t3 / 6.0) / t5
        )
    q = 0.5 * tx
    q += c1 * (rxtx + txrx + rxtxrx)
    q += c2 * (rx @ rxtx + txrx @ rx - 3.0 * rxtxrx)
    q += c3 * (rxtxrx @ rx + rx @ rxtxrx)
    return q


def se3_left_jacobian(xi):
    """6x6 left Jacobian of SE(3) in (rotational, translational) ordering."""
    xi = np.asarray(xi, dtype=float)
    r, t = xi[:3], xi[3:]
    jl = so3_left_jacobian(r)
    out = np.zeros((6, 6))
    out[:3, :3] = jl
    out[3:, 3:] = jl
    out[3:, :3] = _se3_q_matrix(r, t)
    return out


def se3_left_jacobian_inv(xi):
    """Inverse left Jacobian; identity at xi = 0.

    Satisfies ``se3_exp(se3_left_jacobian_inv(xi) @ d + xi) ~ se3_exp(d) * se3_exp(xi)``
    to second order in ``d``.
    """
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise InvalidArgumentError("twist must be finite")
    r, t = xi[:3], xi[3:]
    jl_inv = so3_left_jacobian_inv(r)
    out = np.zeros((6, 6))
    out[:3, :3] = jl_inv
    out[3:, 3:] = jl_inv
    out[3:, :3] = -jl_inv @ _se3_q_matrix(r, t) @ jl_inv
    return out


def interp_pose(pose_a: Pose, pose_b: Pose, alpha: float) -> Pose:
    """On-manifold interpolation ``Ta * exp(alpha * log(Ta^-1 Tb))``."""
    if not 0.0 <= alpha <= 1.0:
        raise OutOfRangeError(f"interpolation ratio {alpha} outside [0, 1]")
    if alpha == 0.0:
        return pose_a
    if alpha == 1.0:
        return pose_b
    xi = se3_log(pose_a.inverse() @ pose_b)
    return pose_a @ se3_exp(alpha * xi)


# ---------------------------------------------------------------------------
# Batched rotation helpers (hot paths in trajectory sampling and optimization).


def hat_batch(v):
    """(N, 3) -> (N, 3, 3)."""
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _coeff_batch(theta, closed, series, threshold):
    small = theta < threshold
    safe = np.where(small, 1.0, theta)
    out = closed(safe)
    if np.any(small):
        out = np.where(small, series(theta), out)
    return out


def so3_exp_batch(r):
    """Rodrigues formula over (N, 3) rotation vectors."""
    theta = np.linalg.norm(r, axis=1)
    a = _coeff_batch(
        theta, lambda t: np.sin(t) / t, lambda t: 1.0 - t * t / 6.0, SMALL_ANGLE
    )
    half = np.sin(0.5 * theta)
    b = np.where(theta < SMALL_ANGLE, 0.5, 2.0 * half * half / np.where(theta == 0, 1.0, theta) ** 2)
    k = hat_batch(r)
    kk = k @ k
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * kk


def so3_log_batch(rotations):
    """Rotation vectors of (N, 3, 3) rotation matrices; all angles must be below pi."""
    w = 0.5 * np.stack(
        [
            rotations[:, 2, 1] - rotations[:, 1, 2],
            rotations[:, 0, 2] - rotations[:, 2, 0],
            rotations[:, 1, 0] - rotations[:, 0, 1],
        ],
        axis=1,
    )
    s = np.linalg.norm(w, axis=1)
    c = 0.5 * (np.trace(rotations, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta >= _MAX_LOG_ANGLE):
        raise AmbiguousLogarithmError("batch contains a rotation with angle at/near pi")
    scale = np.where(theta < SMALL_ANGLE, 1.0, theta / np.where(s == 0, 1.0, s))
    return w * scale[:, None]


def so3_left_jacobian_batch(r):
    theta = np.linalg.norm(r, axis=1)
    half = np.sin(0.5 * theta)
    b = np.where(theta < SMALL_ANGLE, 0.5, 2.0 * half * half / np.where(theta == 0, 1.0, theta) ** 2)
    c = _coeff_batch(
        theta,
        lambda t: (t - np.sin(t)) / t**3,
        lambda t: 1.0 / 6.0 - t * t / 120.0 + (t * t) ** 2 / 5040.0,
        SERIES_ANGLE,
    )
    k = hat_batch(r)
    return np.eye(3) + b[:, None, None] * k + c[:, None, None] * (k @ k)


def so3_left_jacobian_inv_batch(r):
    theta = np.linalg.norm(r, axis=1)
    e = _coeff_batch(
        theta,
        lambda t: 1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
        lambda t: 1.0 / 12.0 + t * t / 720.0 + (t * t) ** 2 / 30240.0,
        SERIES_ANGLE,
    )
    k = hat_batch(r)
    return np.eye(3) - 0.5 * k + e[:, None, None] * (k @ k)


def se3_interp_batch(rot_a, t_a, rot_b, t_b, alpha):
    """Vectorized ``Ta * exp(alpha * log(Ta^-1 Tb))`` for pose arrays.

    alpha is (N,) in [0, 1]; bracketing pairs are given as rotation stacks
    (N, 3, 3) and translation stacks (N, 3).
    """
    rot_rel = np.einsum("nji,njk->nik", rot_a, rot_b)
    t_rel = np.einsum("nji,nj->ni", rot_a, t_b - t_a)
    phi = so3_log_batch(rot_rel)
    rho = np.einsum("nij,nj->ni", so3_left_jacobian_inv_batch(phi), t_rel)
    phi_s = phi * alpha[:, None]
    rho_s = rho * alpha[:, None]
    rot_d = so3_exp_batch(phi_s)
    t_d = np.einsum("nij,nj->ni", so3_left_jacobian_batch(phi_s), rho_s)
    rot = np.einsum("nij,njk->nik", rot_a, rot_d)
    t = np.einsum("nij,nj->ni", rot_a, t_d) + t_a
    return rot, t
