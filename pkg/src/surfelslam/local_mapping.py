"""Local-window trajectory optimization.

Four residual families constrain the window: surfel-to-surfel point-to-plane
errors, surfel-to-map-prior point-to-plane errors, and IMU acceleration and
body-rate errors.  A damped Gauss-Newton solver estimates the spline control
points together with the IMU biases and an optional time lag.

Two optimization models are supported.  The composition model keeps the
densely sampled trajectory and estimates spline *corrections* that are
composed onto it; the control points restart from zero at every iteration.
The direct model represents the trajectory itself as the spline and estimates
absolute control points (kept only for the model comparison study).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import lie
from .errors import (
    DegenerateGeometryError,
    InvalidArgumentError,
    MissingSupportError,
    NoProgressError,
    OutOfRangeError,
)
from .trajectory import ControlGrid, Trajectory, apply_correction

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.80665])


def _unit(v, what):
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"{what} must be a unit vector")
    return v


@dataclass(frozen=True)
class SurfelPairConstraint:
    """Two observations of the same surface, tied along their averaged normal."""

    u_a: np.ndarray
    u_b: np.ndarray
    tau_a: float
    tau_b: float
    n_ab: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u_a", np.asarray(self.u_a, dtype=float))
        object.__setattr__(self, "u_b", np.asarray(self.u_b, dtype=float))
        object.__setattr__(self, "n_ab", _unit(self.n_ab, "n_ab"))
        if self.tau_a == self.tau_b:
            raise InvalidArgumentError("pair constraint needs two distinct times")


@dataclass(frozen=True)
class MapPriorConstraint:
    """A sensor-frame observation tied to a world-frame map point."""

    u_m: np.ndarray
    u_c: np.ndarray
    tau_c: float
    n_mc: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u_m", np.asarray(self.u_m, dtype=float))
        object.__setattr__(self, "u_c", np.asarray(self.u_c, dtype=float))
        object.__setattr__(self, "n_mc", _unit(self.n_mc, "n_mc"))


@dataclass(frozen=True)
class ImuSample:
    tau: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        accel = np.asarray(self.accel, dtype=float)
        gyro = np.asarray(self.gyro, dtype=float)
        if not (np.all(np.isfinite(accel)) and np.all(np.isfinite(gyro))):
            raise InvalidArgumentError("IMU sample must be finite")
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "gyro", gyro)


@dataclass
class OptState:
    """Optimization state: control grid, IMU biases, time lag."""

    grid: ControlGrid
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time_lag: float = 0.0

    def __post_init__(self):
        self.accel_bias = np.asarray(self.accel_bias, dtype=float)
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float)


@dataclass
class OptimizerConfig:
    window: float = 5.0
    max_iterations: int = 50
    step_tol: float = 1e-8
    cost_tol: float = 1e-10
    damping_init: float = 1e-6
    damping_retries: int = 5
    jacobian: str = "forward"  # or "central"
    fd_step: float = 1e-6
    model: str = "composition"  # or "spline_direct"
    update_method: str = "se3"  # or "so3_r3"
    interpolation: str = "se3"  # or "euclidean"
    estimate_biases: bool = True
    estimate_time_lag: bool = False
    max_time_lag: float = 0.05
    max_bias: float = 1.0
    sigma_surfel: float = 0.02
    sigma_prior: float = 0.02
    sigma_accel: float = 0.05
    sigma_gyro: float = 0.005
    cauchy_scale: float = 3.0  # in whitened units, i.e. 3 sigma


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    rms_surfel: float
    rms_prior: float
    rms_accel: float
    rms_gyro: float
    step_norm: float


@dataclass
class OptimizationReport:
    records: list
    converged: bool
    reason: str

    @property
    def final_cost(self):
        return self.records[-1].cost

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("iter,cost,rms_surfel,rms_prior,rms_accel,rms_gyro,step_norm\n")
            for r in self.records:
                f.write(
                    f"{r.iteration},{r.cost!r},{r.rms_surfel!r},{r.rms_prior!r},"
                    f"{r.rms_accel!r},{r.rms_gyro!r},{r.step_norm!r}\n"
                )


def _interp_arrays(times, rotations, translations, taus, mode, rotvecs=None):
    """Interpolate pose arrays at ``taus``; exact sample hits bypass the
    geodesic machinery."""
    n = times.shape[0]
    dt = times[1] - times[0]
    tol = 1e-9 * dt
    if np.any(taus < times[0] - tol) or np.any(taus > times[-1] + tol):
        raise OutOfRangeError("interpolation time outside trajectory support")
    idx = np.clip(np.searchsorted(times, taus, side="right") - 1, 0, n - 2)
    alpha = np.clip((taus - times[idx]) / (times[idx + 1] - times[idx]), 0.0, 1.0)
    snap_lo = alpha <= 1e-9
    snap_hi = alpha >= 1.0 - 1e-9
    gather = np.where(snap_hi, idx + 1, idx)
    interior = ~(snap_lo | snap_hi)
    rot = rotations[gather].copy()
    t = translations[gather].copy()
    if np.any(interior):
        ii = np.flatnonzero(interior)
        if mode == "se3":
            rot_i, t_i = lie.se3_interp_batch(
                rotations[idx[ii]],
                translations[idx[ii]],
                rotations[idx[ii] + 1],
                translations[idx[ii] + 1],
                alpha[ii],
            )
        else:
            if rotvecs is None:
                rotvecs = lie.so3_log_batch(rotations)
            a = alpha[ii][:, None]
            rv = rotvecs[idx[ii]] * (1.0 - a) + rotvecs[idx[ii] + 1] * a
            rot_i = lie.so3_exp_batch(rv)
            t_i = translations[idx[ii]] * (1.0 - a) + translations[idx[ii] + 1] * a
        rot[ii] = rot_i
        t[ii] = t_i
    return rot, t


def _corrected_pose_at(traj, grid, taus, update="se3", interpolation="se3"):
    corrected = apply_correction(traj, grid, update=update)
    return corrected.sample_batch(np.atleast_1d(taus), mode=interpolation)


def residual_surfel_pair(constraint, traj, grid, update="se3", interpolation="se3"):
    """Point-to-plane residual between two timed observations (meters)."""
    rot, t = _corrected_pose_at(
        traj, grid, [constraint.tau_a, constraint.tau_b], update, interpolation
    )
    world_a = rot[0] @ constraint.u_a + t[0]
    world_b = rot[1] @ constraint.u_b + t[1]
    return float(constraint.n_ab @ (world_a - world_b))


def residual_map_prior(constraint, traj, grid, update="se3", interpolation="se3"):
    """Point-to-plane residual against a fixed world-frame map point (meters)."""
    rot, t = _corrected_pose_at(traj, grid, [constraint.tau_c], update, interpolation)
    world = rot[0] @ constraint.u_c + t[0]
    return float(constraint.n_mc @ (constraint.u_m - world))


def residual_imu(sample, traj, grid, state, update="se3", interpolation="se3"):
    """Six IMU residuals (accel m/s^2, gyro rad/s) at the lag-shifted time.

    The acceleration uses central differences of the interpolated translation
    at the trajectory sample interval; the body rate uses the forward
    difference of the interpolated rotation.
    """
    h = 1.0 / traj.nominal_rate
    tau = sample.tau + state.time_lag
    corrected = apply_correction(traj, grid, update=update)
    taus = np.array([tau - h, tau, tau + h])
    if np.any(taus < corrected.start) or np.any(taus > corrected.end):
        raise OutOfRangeError("IMU finite-difference stencil outside support")
    rot, t = corrected.sample_batch(taus, mode=interpolation)
    accel_world = (t[2] - 2.0 * t[1] + t[0]) / (h * h)
    accel_res = sample.accel - rot[1].T @ (accel_world - GRAVITY) + state.accel_bias
    omega = lie.so3_log(rot[1].T @ rot[2]) / h
    gyro_res = sample.gyro - omega + state.gyro_bias
    return np.concatenate([accel_res, gyro_res])


class _WindowSystem:
    """Vectorized residual assembly with per-parameter influence masks."""

    def __init__(self, pair_constraints, prior_constraints, imu, traj, state, cfg):
        self.cfg = cfg
        self.grid = state.grid
        self.n_knots = len(state.grid)
        self.traj_times = traj.times
        self.base_rot = traj.rotations.copy()
        self.base_t = traj.translations.copy()
        self.rate = traj.nominal_rate
        self.h = 1.0 / self.rate

        self.pair_u_a = np.array([c.u_a for c in pair_constraints]).reshape(-1, 3)
        self.pair_u_b = np.array([c.u_b for c in pair_constraints]).reshape(-1, 3)
        self.pair_n = np.array([c.n_ab for c in pair_constraints]).reshape(-1, 3)
        self.pair_taus = np.array(
            [[c.tau_a, c.tau_b] for c in pair_constraints]
        ).reshape(-1, 2)

        self.prior_u_m = np.array([c.u_m for c in prior_constraints]).reshape(-1, 3)
        self.prior_u_c = np.array([c.u_c for c in prior_constraints]).reshape(-1, 3)
        self.prior_n = np.array([c.n_mc for c in prior_constraints]).reshape(-1, 3)
        self.prior_taus = np.array([c.tau_c for c in prior_constraints])

        lag_slack = cfg.max_time_lag if cfg.estimate_time_lag else abs(state.time_lag)
        usable = [
            s
            for s in imu
            if s.tau + state.time_lag - self.h - lag_slack >= traj.start
            and s.tau + state.time_lag + self.h + lag_slack <= traj.end
        ]
        self.imu_taus = np.array([s.tau for s in usable])
        self.imu_accel = np.array([s.accel for s in usable]).reshape(-1, 3)
        self.imu_gyro = np.array([s.gyro for s in usable]).reshape(-1, 3)

        self.n_pair = len(self.pair_taus)
        self.n_prior = len(self.prior_taus)
        self.n_imu = len(self.imu_taus)
        self.sl_pair = slice(0, self.n_pair)
        self.sl_prior = slice(self.n_pair, self.n_pair + self.n_prior)
        base = self.n_pair + self.n_prior
        self.sl_accel = slice(base, base + 3 * self.n_imu)
        self.sl_gyro = slice(base + 3 * self.n_imu, base + 6 * self.n_imu)
        self.n_residuals = base + 6 * self.n_imu

        self.w_samples = self.grid.weight_matrix(self.traj_times)
        self._direct_cache = {}
        if cfg.model == "spline_direct":
            # Least-squares fit of the initial trajectory by the spline.
            rotvecs = lie.so3_log_batch(self.base_rot)
            self.c_t0 = np.linalg.lstsq(self.w_samples, self.base_t, rcond=None)[0]
            self.c_r0 = np.linalg.lstsq(self.w_samples, rotvecs, rcond=None)[0]

        self.robust_weights = np.ones(self.n_pair + self.n_prior)
        self.cauchy_eff = np.inf
        self._build_masks(lag_slack)

    # -- parameter vector layout: [c_t (3K), c_r (3K), b_a?, b_g?, d?] --

    def n_params(self):
        n = 6 * self.n_knots
        if self.cfg.estimate_biases:
            n += 6
        if self.cfg.estimate_time_lag:
            n += 1
        return n

    def split_params(self, x, state):
        k = self.n_knots
        c_t = x[: 3 * k].reshape(k, 3)
        c_r = x[3 * k : 6 * k].reshape(k, 3)
        i = 6 * k
        if self.cfg.estimate_biases:
            b_a = state.accel_bias + x[i : i + 3]
            b_g = state.gyro_bias + x[i + 3 : i + 6]
            i += 6
        else:
            b_a, b_g = state.accel_bias, state.gyro_bias
        if self.cfg.estimate_time_lag:
            d = np.clip(
                state.time_lag + x[i], -self.cfg.max_time_lag, self.cfg.max_time_lag
            )
        else:
            d = state.time_lag
        return c_t, c_r, b_a, b_g, d

    def _corrected_samples(self, c_t, c_r):
        corr_t = self.w_samples @ c_t
        corr_r = self.w_samples @ c_r
        rot_c = lie.so3_exp_batch(corr_r)
        rot = np.einsum("nij,njk->nik", rot_c, self.base_rot)
        if self.cfg.update_method == "se3":
            t = np.einsum("nij,nj->ni", rot_c, self.base_t) + corr_t
        else:
            t = self.base_t + corr_t
        return rot, t

    def _direct_weights(self, taus, key):
        cached = self._direct_cache.get(key)
        if cached is None:
            cached = self.grid.weight_matrix(taus)
            self._direct_cache[key] = cached
        return cached

    def residuals(self, x, state):
        """Whitened residual vector (no robust weighting)."""
        cfg = self.cfg
        c_t, c_r, b_a, b_g, d = self.split_params(x, state)
        out = np.empty(self.n_residuals)

        stencil = np.concatenate(
            [self.imu_taus + d - self.h, self.imu_taus + d, self.imu_taus + d + self.h]
        )
        if cfg.model == "composition":
            rot_s, t_s = self._corrected_samples(c_t, c_r)
            rotvecs = (
                lie.so3_log_batch(rot_s) if cfg.interpolation == "euclidean" else None
            )

            def at(taus):
                return _interp_arrays(
                    self.traj_times, rot_s, t_s, taus, cfg.interpolation, rotvecs
                )

            if self.n_pair:
                rot, t = at(self.pair_taus.reshape(-1))
                rot = rot.reshape(-1, 2, 3, 3)
                t = t.reshape(-1, 2, 3)
                world_a = np.einsum("nij,nj->ni", rot[:, 0], self.pair_u_a) + t[:, 0]
                world_b = np.einsum("nij,nj->ni", rot[:, 1], self.pair_u_b) + t[:, 1]
                out[self.sl_pair] = np.sum(self.pair_n * (world_a - world_b), axis=1)
            if self.n_prior:
                rot, t = at(self.prior_taus)
                world = np.einsum("nij,nj->ni", rot, self.prior_u_c) + t
                out[self.sl_prior] = np.sum(self.prior_n * (self.prior_u_m - world), axis=1)
            if self.n_imu:
                rot_all, t_all = at(stencil)
        else:
            key_shift = round(float(d), 12)

            def direct(taus, key):
                w = self._direct_weights(taus, key)
                return lie.so3_exp_batch(w @ c_r), w @ c_t

            if self.n_pair:
                rot, t = direct(self.pair_taus.reshape(-1), key=("pair",))
                rot = rot.reshape(-1, 2, 3, 3)
                t = t.reshape(-1, 2, 3)
                world_a = np.einsum("nij,nj->ni", rot[:, 0], self.pair_u_a) + t[:, 0]
                world_b = np.einsum("nij,nj->ni", rot[:, 1], self.pair_u_b) + t[:, 1]
                out[self.sl_pair] = np.sum(self.pair_n * (world_a - world_b), axis=1)
            if self.n_prior:
                rot, t = direct(self.prior_taus, key=("prior",))
                world = np.einsum("nij,nj->ni", rot, self.prior_u_c) + t
                out[self.sl_prior] = np.sum(self.prior_n * (self.prior_u_m - world), axis=1)
            if self.n_imu:
                rot_all, t_all = direct(stencil, key=("imu", key_shift))

        if self.n_imu:
            m = self.n_imu
            t_minus, t_mid, t_plus = t_all[:m], t_all[m : 2 * m], t_all[2 * m :]
            rot_mid, rot_plus = rot_all[m : 2 * m], rot_all[2 * m :]
            accel_world = (t_plus - 2.0 * t_mid + t_minus) / (self.h * self.h)
            body = np.einsum("nji,nj->ni", rot_mid, accel_world - GRAVITY)
            accel_res = self.imu_accel - body + b_a
            rel = np.einsum("nji,njk->nik", rot_mid, rot_plus)
            omega = lie.so3_log_batch(rel) / self.h
            gyro_res = self.imu_gyro - omega + b_g
            out[self.sl_accel] = accel_res.reshape(-1) / self.cfg.sigma_accel
            out[self.sl_gyro] = gyro_res.reshape(-1) / self.cfg.sigma_gyro

        out[self.sl_pair] /= cfg.sigma_surfel
        out[self.sl_prior] /= cfg.sigma_prior
        return out

    # -- robust kernel ----------------------------------------------------
    #
    # The Cauchy scale is annealed: it starts at the spread of the current
    # residuals and tightens monotonically to the configured 3-sigma floor as
    # the fit improves.  A fixed small scale would let the solver park badly
    # initialized stretches of the window behind the kernel.  Because the
    # Cauchy cost is increasing in the scale, a non-increasing scale keeps
    # the recorded cost non-increasing across accepted iterations.

    def update_robust_weights(self, residuals):
        r = residuals[: self.n_pair + self.n_prior]
        if r.size:
            spread = 3.0 * np.median(np.abs(r)) / 0.6745
        else:
            spread = 0.0
        scale = max(self.cfg.cauchy_scale, spread)
        self.cauchy_eff = min(self.cauchy_eff, scale)
        self.robust_weights = 1.0 / np.sqrt(1.0 + (r / self.cauchy_eff) ** 2)

    def weighted(self, residuals):
        out = residuals.copy()
        out[: self.n_pair + self.n_prior] *= self.robust_weights
        return out

    def cost(self, residuals):
        c = self.cauchy_eff
        robust = residuals[: self.n_pair + self.n_prior]
        quad = residuals[self.n_pair + self.n_prior :]
        return float(
            np.sum(c * c * np.log1p((robust / c) ** 2)) + np.sum(quad * quad)
        )

    def family_rms(self, residuals):
        """Unwhitened RMS per family (surfel, prior, accel, gyro)."""

        def rms(sl, sigma):
            r = residuals[sl]
            return float(np.sqrt(np.mean(r * r)) * sigma) if r.size else 0.0

        return (
            rms(self.sl_pair, self.cfg.sigma_surfel),
            rms(self.sl_prior, self.cfg.sigma_prior),
            rms(self.sl_accel, self.cfg.sigma_accel),
            rms(self.sl_gyro, self.cfg.sigma_gyro),
        )

    # -- influence masks and Jacobian grouping ----------------------------

    def _build_masks(self, lag_slack):
        k = self.n_knots
        step = self.grid.step
        dt = self.h
        knot_lo = self.grid.times - 2.0 * step
        knot_hi = self.grid.times + 2.0 * step
        # Clamped boundary padding widens the first/last knots' support.
        knot_lo[0] = -np.inf
        knot_hi[-1] = np.inf

        lo = np.empty(self.n_residuals)
        hi = np.empty(self.n_residuals)
        bracket = dt if self.cfg.model == "composition" else 0.0
        if self.n_pair:
            lo[self.sl_pair] = self.pair_taus.min(axis=1) - bracket
            hi[self.sl_pair] = self.pair_taus.max(axis=1) + bracket
        if self.n_prior:
            lo[self.sl_prior] = self.prior_taus - bracket
            hi[self.sl_prior] = self.prior_taus + bracket
        if self.n_imu:
            imu_lo = np.repeat(self.imu_taus - self.h - lag_slack - bracket, 3)
            imu_hi = np.repeat(self.imu_taus + self.h + lag_slack + bracket, 3)
            lo[self.sl_accel] = imu_lo
            hi[self.sl_accel] = imu_hi
            lo[self.sl_gyro] = imu_lo
            hi[self.sl_gyro] = imu_hi

        knot_mask = (lo[:, None] <= knot_hi[None, :]) & (hi[:, None] >= knot_lo[None, :])
        masks = []
        for j in range(k):
            for _ in range(3):
                masks.append(("c_t", knot_mask[:, j]))
        for j in range(k):
            for _ in range(3):
                masks.append(("c_r", knot_mask[:, j]))
        if self.cfg.estimate_biases:
            for comp in range(3):
                m = np.zeros(self.n_residuals, dtype=bool)
                m[self.sl_accel] = (np.arange(3 * self.n_imu) % 3) == comp
                masks.append(("b_a", m))
            for comp in range(3):
                m = np.zeros(self.n_residuals, dtype=bool)
                m[self.sl_gyro] = (np.arange(3 * self.n_imu) % 3) == comp
                masks.append(("b_g", m))
        if self.cfg.estimate_time_lag:
            m = np.zeros(self.n_residuals, dtype=bool)
            m[self.sl_accel] = True
            m[self.sl_gyro] = True
            masks.append(("d", m))
        self.param_masks = [m for _, m in masks]
        self._group_params()

    def _group_params(self):
        groups = []
        unions = []
        for p, mask in enumerate(self.param_masks):
            placed = False
            for g, union in zip(groups, unions):
                if not np.any(union & mask):
                    g.append(p)
                    union |= mask
                    placed = True
                    break
            if not placed:
                groups.append([p])
                unions.append(mask.copy())
        self.groups = groups

    def jacobian(self, x, state, base_weighted):
        """Grouped finite-difference Jacobian of the robust-weighted residuals."""
        cfg = self.cfg
        eps = cfg.fd_step
        jac = np.zeros((self.n_residuals, self.n_params()))
        for group in self.groups:
            step = np.zeros(self.n_params())
            for p in group:
                step[p] = eps
            plus = self.weighted(self.residuals(x + step, state))
            if cfg.jacobian == "central":
                minus = self.weighted(self.residuals(x - step, state))
                diff = (plus - minus) / (2.0 * eps)
            else:
                diff = (plus - base_weighted) / eps
            for p in group:
                mask = self.param_masks[p]
                jac[mask, p] = diff[mask]
        return jac


def optimize_window(constraints, imu, traj, init, cfg=None):
    """Damped Gauss-Newton over control points, IMU biases, and time lag.

    ``constraints`` mixes :class:`SurfelPairConstraint` and
    :class:`MapPriorConstraint` instances.  Returns the final state, the
    corrected trajectory, and a per-iteration report.
    """
    if cfg is None:
        cfg = OptimizerConfig()
    if traj.end - traj.start > cfg.window + 1e-9:
        raise InvalidArgumentError("trajectory longer than the configured window")
    if not init.grid.covers(traj.times).all():
        raise MissingSupportError("grid does not span the window", traj.times)

    pairs = [c for c in constraints if isinstance(c, SurfelPairConstraint)]
    priors = [c for c in constraints if isinstance(c, MapPriorConstraint)]
    system = _WindowSystem(pairs, priors, imu, traj, init, cfg)
    if system.n_residuals < 6 * system.n_knots:
        raise InvalidArgumentError(
            f"{system.n_residuals} residuals cannot observe {6 * system.n_knots} knot states"
        )

    state = OptState(
        init.grid,
        init.accel_bias.copy(),
        init.gyro_bias.copy(),
        init.time_lag,
    )
    x = np.zeros(system.n_params())
    if cfg.model == "spline_direct":
        x[: 3 * system.n_knots] = system.c_t0.reshape(-1)
        x[3 * system.n_knots : 6 * system.n_knots] = system.c_r0.reshape(-1)

    residuals = system.residuals(x, state)
    system.update_robust_weights(residuals)
    cost = system.cost(residuals)
    records = [IterationRecord(0, cost, *system.family_rms(residuals), 0.0)]

    lam = cfg.damping_init
    converged = False
    reason = "max_iterations"
    for iteration in range(1, cfg.max_iterations + 1):
        if cost < 1e-16:
            converged = True
            reason = "zero_cost"
            break
        weighted = system.weighted(residuals)
        jac = system.jacobian(x, state, weighted)
        hess = jac.T @ jac
        grad = jac.T @ weighted
        if iteration == 1:
            eigvals = np.linalg.eigvalsh(hess)
            null_dim = int(np.sum(eigvals < max(eigvals[-1], 1e-30) * 1e-12))
            if null_dim > 0:
                raise DegenerateGeometryError(
                    f"normal equations rank deficient (null space dimension {null_dim})",
                    null_dim,
                )
        diag = np.diag(hess).copy()
        diag[diag <= 0.0] = 1.0

        accepted = False
        predicted = np.inf
        for _ in range(cfg.damping_retries + 1):
            try:
                delta = np.linalg.solve(hess + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate_x = x + delta
            candidate_res = system.residuals(candidate_x, state)
            candidate_cost = system.cost(candidate_res)
            if candidate_cost < cost:
                accepted = True
                break
            predicted = -(delta @ grad) - 0.5 * delta @ (hess @ delta)
            lam *= 10.0
        if not accepted:
            # The most damped step's own model predicts no usable decrease:
            # numerically stationary.  Anything else is a genuine failure.
            if predicted < cfg.cost_tol * max(cost, 1e-30):
                converged = True
                reason = "stationary"
                break
            raise NoProgressError(
                "cost failed to decrease after damping retries",
                best_state=_state_from(system, x, state, cfg),
                best_trajectory=_trajectory_from(system, x, state, cfg),
                report=OptimizationReport(records, False, "no_progress"),
            )

        lam = max(lam / 3.0, 1e-12)
        step_norm = float(np.linalg.norm(delta))
        prev_cost = cost
        if cfg.model == "composition":
            # Fold the accepted correction into the trajectory; the grid
            # restarts from zero for the next iteration.
            c_t, c_r, b_a, b_g, d = system.split_params(candidate_x, state)
            rot, t = system._corrected_samples(c_t, c_r)
            system.base_rot, system.base_t = rot, t
            state = OptState(state.grid, b_a, b_g, d)
            x = np.zeros(system.n_params())
            residuals = system.residuals(x, state)
        else:
            x = candidate_x
            residuals = candidate_res
        system.update_robust_weights(residuals)
        cost = system.cost(residuals)
        records.append(
            IterationRecord(iteration, cost, *system.family_rms(residuals), step_norm)
        )
        if step_norm < cfg.step_tol:
            converged = True
            reason = "step_norm"
            break
        if prev_cost - cost < cfg.cost_tol * max(prev_cost, 1e-30):
            converged = True
            reason = "cost_decrease"
            break

    final_state = _state_from(system, x, state, cfg)
    final_traj = _trajectory_from(system, x, state, cfg)
    report = OptimizationReport(records, converged, reason)
    return final_state, final_traj, report


def _state_from(system, x, state, cfg):
    k = system.n_knots
    if cfg.model == "composition":
        grid = ControlGrid(
            system.grid.times.copy(), np.zeros((k, 3)), np.zeros((k, 3))
        )
        return OptState(grid, state.accel_bias, state.gyro_bias, state.time_lag)
    c_t, c_r, b_a, b_g, d = system.split_params(x, state)
    # Direct model: the grid holds the absolute spline, not a correction.
    grid = ControlGrid(system.grid.times.copy(), c_t.copy(), c_r.copy())
    return OptState(grid, b_a, b_g, d)


def _trajectory_from(system, x, state, cfg):
    if cfg.model == "composition":
        return Trajectory(
            system.traj_times.copy(),
            system.base_rot.copy(),
            system.base_t.copy(),
            system.rate,
        )
    c_t, c_r, *_ = system.split_params(x, state)
    w = system.w_samples
    rotations = lie.so3_exp_batch(w @ c_r)
    return Trajectory(system.traj_times.copy(), rotations, w @ c_t, system.rate)
