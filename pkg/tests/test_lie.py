import numpy as np
import pytest

from surfelslam import lie
from surfelslam.errors import (
    AmbiguousLogarithmError,
    InvalidArgumentError,
    OutOfRangeError,
)
from surfelslam.simulation import oracles

from conftest import random_pose


def test_exp_zero_twist_is_identity():
    pose = lie.se3_exp(np.zeros(6))
    assert np.allclose(pose.rotation, np.eye(3))
    assert np.allclose(pose.translation, 0.0)


def test_exp_pure_translation():
    pose = lie.se3_exp(np.array([0.0, 0.0, 0.0, 1.0, 2.0, 3.0]))
    assert np.allclose(pose.rotation, np.eye(3))
    assert np.allclose(pose.translation, [1.0, 2.0, 3.0])


def test_exp_matches_series_oracle():
    xi = np.array([np.pi / 2, 0.0, 0.0, 0.0, 0.0, 0.0])
    expected = oracles.se3_exp_series(xi, terms=20)
    pose = lie.se3_exp(xi)
    assert np.allclose(pose.matrix(), expected, atol=1e-12)
    # 90 degrees about x.
    assert np.allclose(pose.rotation @ np.array([0.0, 1.0, 0.0]), [0.0, 0.0, 1.0])


def test_exp_matches_series_oracle_random(rng):
    for _ in range(50):
        xi = rng.normal(scale=0.4, size=6)
        assert np.allclose(
            lie.se3_exp(xi).matrix(), oracles.se3_exp_series(xi), atol=1e-12
        )


def test_exp_rejects_non_finite():
    with pytest.raises(InvalidArgumentError):
        lie.se3_exp(np.array([np.nan, 0, 0, 0, 0, 0]))


def test_log_identity_is_zero():
    assert np.allclose(lie.se3_log(lie.Pose.identity()), 0.0)


def test_log_pure_translation():
    xi = lie.se3_log(lie.Pose(np.eye(3), np.array([0.5, -1.0, 2.0])))
    assert np.allclose(xi[:3], 0.0)
    assert np.allclose(xi[3:], [0.5, -1.0, 2.0])


def test_exp_log_round_trip_1000(rng):
    worst = 0.0
    for _ in range(1000):
        direction = rng.normal(size=6)
        direction[:3] *= rng.uniform(0.0, 3.0) / max(np.linalg.norm(direction[:3]), 1e-12)
        xi = direction
        back = lie.se3_log(lie.se3_exp(xi))
        worst = max(worst, np.max(np.abs(back - xi)))
    assert worst < 1e-9


def test_round_trip_near_pi(rng):
    for _ in range(100):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        xi = np.concatenate([axis * (np.pi - 1e-3), rng.normal(size=3)])
        pose = lie.se3_exp(xi)
        again = lie.se3_exp(lie.se3_log(pose))
        assert np.linalg.norm(again.matrix() - pose.matrix()) < 1e-9


def test_log_rejects_angle_at_pi():
    pose = lie.Pose(lie.so3_exp(np.array([np.pi - 1e-9, 0.0, 0.0])), np.zeros(3))
    with pytest.raises(AmbiguousLogarithmError):
        lie.se3_log(pose)


def test_left_jacobian_inv_identity_at_zero():
    assert np.allclose(lie.se3_left_jacobian_inv(np.zeros(6)), np.eye(6))


def test_left_jacobian_composition_defect(rng):
    for _ in range(50):
        xi = rng.normal(scale=0.8, size=6)
        small = rng.normal(size=6)
        small *= 1e-4 / np.linalg.norm(small)
        lhs = lie.se3_exp(lie.se3_left_jacobian_inv(xi) @ small + xi)
        rhs = lie.se3_exp(small) @ lie.se3_exp(xi)
        assert np.linalg.norm(lhs.matrix() - rhs.matrix()) < 1e-7


def test_left_jacobian_inverse_against_numeric(rng):
    for scale in (1e-6, 0.01, 0.5, 1.5):
        for _ in range(10):
            xi = rng.normal(size=6)
            xi *= scale / np.linalg.norm(xi)
            numeric = oracles.numeric_left_jacobian(xi)
            product = lie.se3_left_jacobian_inv(xi) @ numeric
            assert np.linalg.norm(product - np.eye(6)) < 1e-9


def test_left_jacobian_pair_is_inverse(rng):
    for _ in range(20):
        xi = rng.normal(scale=1.0, size=6)
        product = lie.se3_left_jacobian_inv(xi) @ lie.se3_left_jacobian(xi)
        assert np.linalg.norm(product - np.eye(6)) < 1e-12


def test_interp_endpoints(rng):
    a, b = random_pose(rng), random_pose(rng)
    assert np.allclose(lie.interp_pose(a, b, 0.0).matrix(), a.matrix())
    assert np.allclose(lie.interp_pose(a, b, 1.0).matrix(), b.matrix())


def test_interp_translation_midpoint():
    a = lie.Pose.identity()
    b = lie.Pose(np.eye(3), np.array([2.0, 0.0, 0.0]))
    mid = lie.interp_pose(a, b, 0.5)
    assert np.allclose(mid.translation, [1.0, 0.0, 0.0], atol=1e-12)


def test_interp_rotation_scaling():
    b = lie.Pose(lie.so3_exp(np.array([0.0, 0.0, np.pi / 2])), np.zeros(3))
    third = lie.interp_pose(lie.Pose.identity(), b, 1.0 / 3.0)
    expected = lie.so3_exp(np.array([0.0, 0.0, np.pi / 6]))
    assert np.allclose(third.rotation, expected, atol=1e-12)


def test_interp_rejects_out_of_range(rng):
    a, b = random_pose(rng), random_pose(rng)
    with pytest.raises(OutOfRangeError):
        lie.interp_pose(a, b, 1.5)


def test_interp_symmetry(rng):
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        alpha = rng.uniform()
        lhs = lie.interp_pose(a, b, alpha)
        rhs = lie.interp_pose(b, a, 1.0 - alpha)
        assert np.linalg.norm(lhs.matrix() - rhs.matrix()) < 1e-9


def test_composition_chain_stays_orthonormal(rng):
    step = lie.se3_exp(np.array([1e-3, 2e-3, -1e-3, 0.01, 0.0, 0.02]))
    pose = lie.Pose.identity()
    for _ in range(10_000):
        pose = pose @ step
    defect = np.linalg.norm(pose.rotation.T @ pose.rotation - np.eye(3))
    assert defect < 1e-9
    assert abs(np.linalg.det(pose.rotation) - 1.0) < 1e-9


def test_pose_rejects_bad_rotation():
    with pytest.raises(InvalidArgumentError):
        lie.Pose(np.eye(3) * 2.0, np.zeros(3))


def test_batch_helpers_match_scalar(rng):
    rotvecs = rng.normal(size=(64, 3))
    rotvecs *= (rng.uniform(0.0, 3.0, size=64) / np.linalg.norm(rotvecs, axis=1))[:, None]
    rots = lie.so3_exp_batch(rotvecs)
    for i in range(64):
        assert np.allclose(rots[i], lie.so3_exp(rotvecs[i]), atol=1e-12)
    back = lie.so3_log_batch(rots)
    assert np.allclose(back, rotvecs, atol=1e-9)
    jl = lie.so3_left_jacobian_batch(rotvecs)
    jli = lie.so3_left_jacobian_inv_batch(rotvecs)
    for i in range(64):
        assert np.allclose(jl[i], lie.so3_left_jacobian(rotvecs[i]), atol=1e-12)
        assert np.allclose(jli[i], lie.so3_left_jacobian_inv(rotvecs[i]), atol=1e-12)


def test_se3_interp_batch_matches_interp_pose(rng):
    poses_a = [random_pose(rng, max_angle=1.5) for _ in range(32)]
    poses_b = [random_pose(rng, max_angle=1.5) for _ in range(32)]
    alphas = rng.uniform(size=32)
    rot, t = lie.se3_interp_batch(
        np.stack([p.rotation for p in poses_a]),
        np.stack([p.translation for p in poses_a]),
        np.stack([p.rotation for p in poses_b]),
        np.stack([p.translation for p in poses_b]),
        alphas,
    )
    for i in range(32):
        expected = lie.interp_pose(poses_a[i], poses_b[i], alphas[i])
        assert np.allclose(rot[i], expected.rotation, atol=1e-10)
        assert np.allclose(t[i], expected.translation, atol=1e-10)
