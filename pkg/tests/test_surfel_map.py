import numpy as np
import pytest

from surfelslam import lie
from surfelslam.errors import InvalidArgumentError
from surfelslam.simulation import oracles
from surfelslam.surfel_map import (
    DenseExtractionConfig,
    DenseSurfel,
    DenseSurfelMap,
    SparseSurfelMap,
    SurfelIndex,
    extract_dense,
    merge_moments,
    voxelize_sparse,
)
from surfelslam.trajectory import Trajectory


def test_voxelize_cube_corners():
    pts = np.array(
        [[x, y, z] for x in (1.0, 9.0) for y in (1.0, 9.0) for z in (1.0, 9.0)]
    )
    surfels = voxelize_sparse(pts, np.zeros(8), [10.0])
    assert len(surfels) == 1
    assert np.allclose(surfels[0].centroid, [5.0, 5.0, 5.0])
    assert surfels[0].count == 8


def test_voxelize_coplanar_points(rng):
    pts = rng.uniform(0.0, 1.0, size=(50, 3))
    pts[:, 2] = 0.5
    surfels = voxelize_sparse(pts, np.zeros(50), [2.0])
    assert len(surfels) == 1
    eigenvalues = np.linalg.eigvalsh(surfels[0].covariance)
    assert eigenvalues[0] < 1e-12 * eigenvalues[2]
    assert abs(abs(surfels[0].normal[2]) - 1.0) < 1e-9


def test_voxelize_empty_input():
    assert voxelize_sparse(np.zeros((0, 3)), np.zeros(0), [1.0]) == []


def test_voxelize_matches_bruteforce_moments(rng):
    pts = rng.uniform(-5.0, 5.0, size=(10_000, 3))
    times = rng.uniform(0.0, 10.0, size=10_000)
    for resolution in (1.0, 0.5):
        surfels = voxelize_sparse(pts, times, [resolution], min_points=5)
        expected = {
            k: v
            for k, v in oracles.voxel_moments_bruteforce(pts, times, resolution).items()
            if v[2] >= 5
        }
        assert len(surfels) == len(expected)
        for s in surfels:
            key = tuple(np.floor(s.centroid / resolution).astype(int))
            mean, cov, count, t_mean = expected[key]
            assert count == s.count
            assert np.allclose(s.centroid, mean, atol=1e-12)
            assert np.allclose(s.covariance, cov, atol=1e-10)
            assert abs(s.timestamp - t_mean) < 1e-9


def test_voxelize_requires_resolution():
    with pytest.raises(InvalidArgumentError):
        voxelize_sparse(np.zeros((4, 3)), np.zeros(4), [])


def plane_points(rng, n=4000, extent=0.5, noise=0.0, normal=(0.0, 0.0, 1.0)):
    normal = np.asarray(normal) / np.linalg.norm(normal)
    basis = np.linalg.svd(np.outer(normal, normal))[0][:, 1:]
    uv = rng.uniform(-extent, extent, size=(n, 2))
    pts = uv @ basis.T
    if noise:
        pts += rng.normal(scale=noise, size=(n, 3))
    return pts


def test_extract_dense_plane_normals(rng):
    pts = plane_points(rng, normal=(1.0, 2.0, 2.0))
    # Sensor sits on the +normal side.
    surfels = extract_dense(pts + np.array([3.0, 0.0, 0.0]), np.zeros(len(pts)))
    true_n = np.array([1.0, 2.0, 2.0]) / 3.0
    assert len(surfels) > 10
    for s in surfels:
        assert abs(abs(s.normal @ true_n) - 1.0) < 1e-9


def test_extract_dense_matches_greedy_seed_oracle(rng):
    pts = plane_points(rng, n=6000, extent=0.35, noise=0.001)
    cfg = DenseExtractionConfig()
    surfels = extract_dense(pts, np.zeros(len(pts)), cfg=cfg)

    # Brute-force greedy seeding in input order.
    seeds = []
    for i, p in enumerate(pts):
        if all(np.linalg.norm(p - pts[j]) >= cfg.radius for j in seeds):
            seeds.append(i)
    d = np.linalg.norm(pts[seeds][:, None] - pts[seeds][None, :], axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= cfg.radius

    expected = []
    for i in seeds:
        nbrs = np.flatnonzero(np.linalg.norm(pts - pts[i], axis=1) <= cfg.radius)
        if nbrs.size >= cfg.min_points:
            expected.append(pts[nbrs].mean(axis=0))
    got = sorted(map(tuple, (s.centroid for s in surfels)))
    want = sorted(map(tuple, expected))
    assert len(got) == len(want)
    assert np.allclose(np.array(got), np.array(want), atol=1e-12)


def test_extract_dense_reduces_plane_noise(rng):
    noise = 0.005
    pts = plane_points(rng, n=8000, noise=noise)
    surfels = extract_dense(pts, np.zeros(len(pts)))
    raw = np.mean(np.abs(pts @ np.array([0.0, 0.0, 1.0])))
    fused = np.mean(np.abs(np.array([s.centroid for s in surfels]) @ np.array([0, 0, 1.0])))
    assert fused < raw


def test_extract_dense_initializes_wishart_state(rng):
    pts = plane_points(rng, noise=0.002)
    surfels = extract_dense(pts, np.zeros(len(pts)))
    for s in surfels:
        assert s.dof >= DenseExtractionConfig().min_points
        assert s.obs_count == 1
        eigenvalues = np.linalg.eigvalsh(s.centroid_cov)
        assert eigenvalues[0] > 0.0


def test_extract_dense_deskews_with_trajectory(rng):
    # Identity rotation, constant velocity along x.
    n = 51
    times = np.arange(n) / 100.0
    traj = Trajectory(
        times,
        np.stack([np.eye(3)] * n),
        np.outer(times, np.array([1.0, 0.0, 0.0])),
    )
    pts = plane_points(rng, n=2000, noise=0.0)
    t_obs = rng.uniform(0.0, 0.5, size=len(pts))
    sensor = pts - np.outer(t_obs, np.array([1.0, 0.0, 0.0]))
    surfels = extract_dense(sensor, t_obs, traj=traj)
    for s in surfels:
        assert abs(s.centroid @ np.array([0.0, 0.0, 1.0])) < 1e-9


# -- spatial index ------------------------------------------------------------


def test_index_empty_query():
    index = SurfelIndex()
    assert index.query_radius([0.0, 0.0, 0.0], 1.0) == []


def test_index_exact_hit():
    index = SurfelIndex()
    index.insert(7, [1.0, 2.0, 3.0])
    assert index.query_radius([1.0, 2.0, 3.0], 1e-12) == [7]


def test_index_matches_linear_scan_bulk(rng):
    index = SurfelIndex(leaf_capacity=8)
    shadow = oracles.LinearScanIndex()
    pts = rng.uniform(-20.0, 20.0, size=(10_000, 3))
    for i, p in enumerate(pts):
        index.insert(i, p)
        shadow.insert(i, p)
    for _ in range(100):
        center = rng.uniform(-22.0, 22.0, size=3)
        radius = rng.uniform(0.1, 5.0)
        assert index.query_radius(center, radius) == shadow.query_radius(center, radius)


def test_index_randomized_insert_remove_query(rng):
    index = SurfelIndex(leaf_capacity=4)
    shadow = oracles.LinearScanIndex()
    alive = []
    next_key = 0
    for _ in range(10_000):
        op = rng.uniform()
        if op < 0.5 or not alive:
            p = rng.uniform(-50.0, 50.0, size=3)
            index.insert(next_key, p)
            shadow.insert(next_key, p)
            alive.append(next_key)
            next_key += 1
        elif op < 0.8:
            key = alive.pop(rng.integers(0, len(alive)))
            index.remove(key)
            shadow.remove(key)
        else:
            center = rng.uniform(-55.0, 55.0, size=3)
            radius = rng.uniform(0.5, 10.0)
            assert index.query_radius(center, radius) == shadow.query_radius(
                center, radius
            )
    assert len(index) == len(shadow.points)


def test_index_grows_beyond_initial_bounds():
    index = SurfelIndex(half_size=1.0)
    index.insert(0, [100.0, -250.0, 3.0])
    index.insert(1, [0.1, 0.1, 0.1])
    assert index.query_radius([100.0, -250.0, 3.0], 0.5) == [0]


def test_dense_map_replace_moves_index(rng):
    m = DenseSurfelMap()
    s = DenseSurfel(
        centroid=[0.0, 0.0, 0.0], normal=[0.0, 0.0, 1.0],
        centroid_cov=np.eye(3) * 1e-6, scatter=np.eye(3) * 1e-4,
        dof=6.0, obs_count=1, timestamp=0.0,
    )
    key = m.add(s)
    moved = DenseSurfel(
        centroid=[5.0, 0.0, 0.0], normal=[0.0, 0.0, 1.0],
        centroid_cov=np.eye(3) * 1e-6, scatter=np.eye(3) * 1e-4,
        dof=6.0, obs_count=2, timestamp=1.0,
    )
    m.replace(key, moved)
    assert m.query_radius([5.0, 0.0, 0.0], 0.1) == [key]
    assert m.query_radius([0.0, 0.0, 0.0], 0.1) == []


def test_sparse_map_fusion_pools_moments(rng):
    pts_a = rng.normal(size=(40, 3)) * 0.1 + 0.5
    pts_b = rng.normal(size=(60, 3)) * 0.1 + 0.5
    sa = voxelize_sparse(pts_a, np.zeros(40), [4.0])[0]
    sb = voxelize_sparse(pts_b, np.ones(60), [4.0])[0]
    m = SparseSurfelMap()
    m.fuse([sa])
    m.fuse([sb])
    assert len(m) == 1
    fused = m.all()[0]
    both = voxelize_sparse(np.vstack([pts_a, pts_b]), np.zeros(100), [4.0])[0]
    assert np.allclose(fused.centroid, both.centroid, atol=1e-12)
    assert np.allclose(fused.covariance, both.covariance, atol=1e-10)
    assert fused.count == 100


def test_covariances_stay_psd_through_merges(rng):
    mean_a, cov_a = rng.normal(size=3), np.eye(3) * 1e-6
    for _ in range(200):
        mean_b = rng.normal(size=3)
        amplitude = rng.uniform(1e-8, 1e-2)
        a = rng.normal(size=(3, 3)) * amplitude
        cov_b = a @ a.T
        mean_a, cov_a, _ = merge_moments(mean_a, cov_a, 10, mean_b, cov_b, 7)
        assert np.allclose(cov_a, cov_a.T)
        assert np.linalg.eigvalsh(cov_a)[0] >= -1e-15
