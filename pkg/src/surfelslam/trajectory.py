"""Continuous-time trajectory: densely sampled poses with on-manifold linear
interpolation, plus the cubic B-spline correction layer.

The trajectory is a discrete pose sequence at a nominal rate (100 Hz by
default); querying between samples interpolates the bracketing pair.  The
correction layer holds per-knot translation and rotation-vector control
points; corrections always start from zero at the beginning of an optimizer
iteration, so the spline evaluates small local updates that are composed onto
the stored poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie
from .errors import InvalidArgumentError, MissingSupportError, OutOfRangeError

# Uniform cubic B-spline basis for a descending power row [u^3 u^2 u 1];
# weights apply to knots (k-1, k, k+1, k+2).  Rows sum to (0, 0, 0, 1) so the
# four weights always sum to one.
SPLINE_MATRIX = (
    np.array(
        [
            [-1.0, 3.0, -3.0, 1.0],
            [3.0, -6.0, 3.0, 0.0],
            [-3.0, 0.0, 3.0, 0.0],
            [1.0, 4.0, 1.0, 0.0],
        ]
    )
    / 6.0
)


def spline_weights(u):
    """Basis weights on knots (k-1, k, k+1, k+2) for offsets ``u`` in [0, 1]."""
    u = np.asarray(u, dtype=float)
    powers = np.stack([u**3, u**2, u, np.ones_like(u)], axis=-1)
    return powers @ SPLINE_MATRIX


@dataclass
class Trajectory:
    """Timestamped pose sequence; treated as an immutable value."""

    times: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    nominal_rate: float = 100.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.rotations = np.asarray(self.rotations, dtype=float)
        self.translations = np.asarray(self.translations, dtype=float)
        n = self.times.shape[0]
        if n < 2:
            raise InvalidArgumentError("trajectory needs at least two samples")
        if self.rotations.shape != (n, 3, 3) or self.translations.shape != (n, 3):
            raise InvalidArgumentError("trajectory array shapes are inconsistent")
        dt = np.diff(self.times)
        if np.any(dt <= 0):
            raise InvalidArgumentError("timestamps must be strictly increasing")
        nominal = 1.0 / self.nominal_rate
        if np.any(np.abs(dt - nominal) > 0.01 * nominal):
            raise InvalidArgumentError(
                "sample spacing deviates more than 1% from the nominal rate"
            )
        self._rotvec_cache = None

    @staticmethod
    def from_poses(samples, nominal_rate=100.0) -> "Trajectory":
        """Build from a list of ``(timestamp, Pose)`` pairs."""
        times = np.array([t for t, _ in samples], dtype=float)
        rotations = np.stack([p.rotation for _, p in samples])
        translations = np.stack([p.translation for _, p in samples])
        return Trajectory(times, rotations, translations, nominal_rate)

    def __len__(self):
        return self.times.shape[0]

    def pose(self, index) -> lie.Pose:
        return lie.Pose(self.rotations[index].copy(), self.translations[index].copy())

    @property
    def start(self):
        return float(self.times[0])

    @property
    def end(self):
        return float(self.times[-1])

    def _brackets(self, taus):
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        tol = 1e-9 / self.nominal_rate
        if np.any(taus < self.times[0] - tol) or np.any(taus > self.times[-1] + tol):
            raise OutOfRangeError("query time outside the trajectory span")
        idx = np.clip(np.searchsorted(self.times, taus, side="right") - 1, 0, len(self) - 2)
        dt = self.times[idx + 1] - self.times[idx]
        alpha = np.clip((taus - self.times[idx]) / dt, 0.0, 1.0)
        # Snap to exact samples so knot queries return the stored pose.
        exact = np.abs(taus - self.times[idx]) <= tol
        alpha = np.where(exact, 0.0, alpha)
        exact_next = np.abs(self.times[idx + 1] - taus) <= tol
        alpha = np.where(exact_next, 1.0, alpha)
        return idx, alpha

    def _rotvecs(self):
        if self._rotvec_cache is None:
            self._rotvec_cache = lie.so3_log_batch(self.rotations)
        return self._rotvec_cache

    def sample_batch(self, taus, mode="se3"):
        """Interpolated rotations (N,3,3) and translations (N,3) at ``taus``.

        ``mode="se3"`` follows the SE(3) geodesic between bracketing samples;
        ``mode="euclidean"`` interpolates translation and the absolute
        rotation-vector chart componentwise (the cost-function variant).
        """
        idx, alpha = self._brackets(taus)
        if mode == "se3":
            return lie.se3_interp_batch(
                self.rotations[idx],
                self.translations[idx],
                self.rotations[idx + 1],
                self.translations[idx + 1],
                alpha,
            )
        if mode == "euclidean":
            rv = self._rotvecs()
            r = rv[idx] * (1.0 - alpha[:, None]) + rv[idx + 1] * alpha[:, None]
            t = (
                self.translations[idx] * (1.0 - alpha[:, None])
                + self.translations[idx + 1] * alpha[:, None]
            )
            return lie.so3_exp_batch(r), t
        raise InvalidArgumentError(f"unknown interpolation mode {mode!r}")

    def sample(self, tau, mode="se3") -> lie.Pose:
        """Pose at time ``tau`` (exact sample when ``tau`` hits a knot)."""
        rot, t = self.sample_batch(np.array([tau]), mode=mode)
        return lie.Pose(rot[0], t[0])

    def write_csv(self, path):
        """Rows ``t,tx,ty,tz,rx,ry,rz`` with the rotation as a rotation vector."""
        rv = lie.so3_log_batch(self.rotations)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("t,tx,ty,tz,rx,ry,rz\n")
            for i in range(len(self)):
                row = [self.times[i], *self.translations[i], *rv[i]]
                f.write(",".join(repr(float(v)) for v in row) + "\n")

    @staticmethod
    def read_csv(path, nominal_rate=None) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != 7:
            raise InvalidArgumentError("trajectory CSV needs 7 columns")
        times = data[:, 0]
        if nominal_rate is None:
            nominal_rate = 1.0 / float(np.mean(np.diff(times)))
        rotations = lie.so3_exp_batch(data[:, 4:7])
        return Trajectory(times, rotations, data[:, 1:4], nominal_rate)


@dataclass
class ControlGrid:
    """Uniformly spaced control points for the B-spline correction.

    ``c_t`` are translational and ``c_r`` rotational (rotation-vector) control
    points.  Boundary access is index-clamped, which replicates the boundary
    knots; with zero-valued knots this padding is invisible.
    """

    times: np.ndarray
    c_t: np.ndarray
    c_r: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.c_t = np.asarray(self.c_t, dtype=float)
        self.c_r = np.asarray(self.c_r, dtype=float)
        k = self.times.shape[0]
        if k < 2:
            raise InvalidArgumentError("control grid needs at least two knots")
        if self.c_t.shape != (k, 3) or self.c_r.shape != (k, 3):
            raise InvalidArgumentError("control point array shapes are inconsistent")
        dt = np.diff(self.times)
        if np.any(np.abs(dt - dt[0]) > 1e-9 * dt[0]):
            raise InvalidArgumentError("knot spacing must be uniform")

    @staticmethod
    def zeros(start, stop, step) -> "ControlGrid":
        """Zero-valued grid covering [start, stop] at the given knot spacing."""
        n = int(round((stop - start) / step)) + 1
        if n < 2:
            raise InvalidArgumentError("grid span shorter than one knot step")
        times = start + step * np.arange(n)
        return ControlGrid(times, np.zeros((n, 3)), np.zeros((n, 3)))

    @staticmethod
    def for_window(start, stop, knots) -> "ControlGrid":
        """Zero grid with the given knot count, extending one knot step past
        each window end.

        Knots clamped at the grid boundary leave the spline too stiff right at
        the ends of the data span; one step of margin restores full cubic
        freedom over [start, stop] while keeping every knot observable.
        """
        if knots < 4:
            raise InvalidArgumentError("window grid needs at least four knots")
        step = (stop - start) / (knots - 3)
        times = (start - step) + step * np.arange(knots)
        return ControlGrid(times, np.zeros((knots, 3)), np.zeros((knots, 3)))

    @property
    def step(self):
        return float(self.times[1] - self.times[0])

    def __len__(self):
        return self.times.shape[0]

    def covers(self, taus):
        taus = np.asarray(taus, dtype=float)
        tol = 1e-9 * self.step
        return (taus >= self.times[0] - tol) & (taus <= self.times[-1] + tol)

    def knot_indices_and_weights(self, taus):
        """Clamped knot indices (N, 4) and basis weights (N, 4) per query."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        inside = self.covers(taus)
        if not np.all(inside):
            raise MissingSupportError(
                "timestamps outside spline support", taus[~inside]
            )
        k = np.clip(
            np.floor((taus - self.times[0]) / self.step).astype(int), 0, len(self) - 2
        )
        u = np.clip((taus - self.times[k]) / self.step, 0.0, 1.0)
        weights = spline_weights(u)
        idx = np.clip(k[:, None] + np.arange(-1, 3)[None, :], 0, len(self) - 1)
        return idx, weights

    def weight_matrix(self, taus):
        """Dense (N, K) matrix W with correction = W @ control_points."""
        idx, weights = self.knot_indices_and_weights(taus)
        out = np.zeros((idx.shape[0], len(self)))
        np.add.at(out, (np.arange(idx.shape[0])[:, None], idx), weights)
        return out

    def correction_batch(self, taus):
        """Correction rotations (N, 3, 3) and translations (N, 3) at ``taus``."""
        idx, weights = self.knot_indices_and_weights(taus)
        t = np.einsum("nk,nkj->nj", weights, self.c_t[idx])
        r = np.einsum("nk,nkj->nj", weights, self.c_r[idx])
        return lie.so3_exp_batch(r), t

    def correction_at(self, tau) -> lie.Pose:
        """Correction pose at ``tau`` (Pose(exp(spline(c_r)), spline(c_t)))."""
        rot, t = self.correction_batch(np.array([tau]))
        return lie.Pose(rot[0], t[0])


def apply_correction(traj: Trajectory, grid: ControlGrid, update="se3") -> Trajectory:
    """Compose the spline correction onto every trajectory sample.

    ``update="se3"`` left-multiplies the correction transform,
    ``T'_k = dT(tau_k) T_k``; ``update="so3_r3"`` applies the rotation the
    same way but adds the translation correction instead of composing it.
    """
    inside = grid.covers(traj.times)
    if not np.all(inside):
        raise MissingSupportError(
            "grid does not span the trajectory", traj.times[~inside]
        )
    rot_c, t_c = grid.correction_batch(traj.times)
    rotations = np.einsum("nij,njk->nik", rot_c, traj.rotations)
    if update == "se3":
        translations = np.einsum("nij,nj->ni", rot_c, traj.translations) + t_c
    elif update == "so3_r3":
        translations = traj.translations + t_c
    else:
        raise InvalidArgumentError(f"unknown update method {update!r}")
    return Trajectory(traj.times.copy(), rotations, translations, traj.nominal_rate)
