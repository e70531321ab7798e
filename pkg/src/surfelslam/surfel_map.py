"""Surfel map structures: multi-resolution sparse ellipsoid surfels, dense
disc surfels with Wishart state, and an octree spatial index.

Covariances are symmetrized on write and validated to be positive
semidefinite within tolerance; surfel values are treated as immutable, so
updates replace entries rather than mutating them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_SURFEL_RADIUS = 0.02
PSD_TOLERANCE = -1e-12


def _symmetrize(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def _check_psd(m, what):
    eigenvalues = np.linalg.eigvalsh(m)
    if eigenvalues[0] < PSD_TOLERANCE * max(abs(eigenvalues[-1]), 1.0):
        raise InvalidArgumentError(f"{what} is not positive semidefinite")
    return m


def clamp_psd(m):
    """Symmetrize and clamp negative eigenvalues at zero."""
    sym = _symmetrize(m)
    eigenvalues, vectors = np.linalg.eigh(sym)
    if eigenvalues[0] >= 0.0:
        return sym
    return (vectors * np.maximum(eigenvalues, 0.0)) @ vectors.T


@dataclass(frozen=True)
class SparseSurfel:
    """Ellipsoid surfel: voxel point statistics at one resolution."""

    centroid: np.ndarray
    covariance: np.ndarray
    count: int
    resolution: float
    timestamp: float
    normal: np.ndarray = None
    planarity: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=float))
        cov = _check_psd(_symmetrize(self.covariance), "sparse surfel covariance")
        object.__setattr__(self, "covariance", cov)
        if self.normal is None:
            eigenvalues, vectors = np.linalg.eigh(cov)
            scale = max(eigenvalues[2], 1e-30)
            object.__setattr__(self, "normal", vectors[:, 0].copy())
            object.__setattr__(
                self, "planarity", float((eigenvalues[1] - eigenvalues[0]) / scale)
            )
            object.__setattr__(
                self, "degenerate", bool(eigenvalues[1] - eigenvalues[0] < 1e-9 * scale)
            )
        else:
            object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float))


@dataclass(frozen=True)
class DenseSurfel:
    """Disc surfel with normal-inverse-Wishart state.

    ``scatter`` is the accrued (unnormalized) second-moment matrix whose
    smallest-eigenvalue eigenvector is the surface normal; ``centroid_cov``
    is the uncertainty of the centroid estimate; ``dof`` counts the points
    accrued into the scatter.
    """

    centroid: np.ndarray
    normal: np.ndarray
    centroid_cov: np.ndarray
    scatter: np.ndarray
    dof: float
    obs_count: int
    timestamp: float
    radius: float = DEFAULT_SURFEL_RADIUS
    colour: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    colour_sigma: float = 0.5
    stable: bool = False

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
            raise InvalidArgumentError("dense surfel normal must be unit length")
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=float))
        object.__setattr__(self, "normal", normal)
        object.__setattr__(
            self,
            "centroid_cov",
            _check_psd(_symmetrize(self.centroid_cov), "centroid covariance"),
        )
        object.__setattr__(
            self, "scatter", _check_psd(_symmetrize(self.scatter), "scatter matrix")
        )
        object.__setattr__(self, "colour", np.asarray(self.colour, dtype=float))


class _Node:
    __slots__ = ("center", "half", "children", "items")

    def __init__(self, center, half):
        self.center = center
        self.half = half
        self.children = None
        self.items = {}

    def octant(self, point):
        code = 0
        if point[0] >= self.center[0]:
            code |= 4
        if point[1] >= self.center[1]:
            code |= 2
        if point[2] >= self.center[2]:
            code |= 1
        return code

    def child_center(self, code):
        offset = self.half / 2.0
        return self.center + offset * np.array(
            [1.0 if code & 4 else -1.0, 1.0 if code & 2 else -1.0, 1.0 if code & 1 else -1.0]
        )


class SurfelIndex:
    """Dynamic octree over surfel centroids.

    The root grows by re-rooting when points fall outside the current world
    bounds, so callers do not need to size the bounds up front.
    """

    def __init__(self, center=(0.0, 0.0, 0.0), half_size=32.0, leaf_capacity=16):
        if leaf_capacity < 1:
            raise InvalidArgumentError("leaf capacity must be at least 1")
        self.leaf_capacity = leaf_capacity
        self.root = _Node(np.asarray(center, dtype=float), float(half_size))
        self._points = {}

    def __len__(self):
        return len(self._points)

    def __contains__(self, key):
        return key in self._points

    def point_of(self, key):
        return self._points[key]

    def _contains_point(self, node, point):
        return bool(np.all(np.abs(point - node.center) <= node.half))

    def _grow(self, point):
        while not self._contains_point(self.root, point):
            direction = np.where(point >= self.root.center, 1.0, -1.0)
            new_center = self.root.center + direction * self.root.half
            new_root = _Node(new_center, self.root.half * 2.0)
            new_root.children = [None] * 8
            code = new_root.octant(self.root.center)
            new_root.children[code] = self.root
            self.root = new_root

    def insert(self, key, point):
        point = np.asarray(point, dtype=float)
        if key in self._points:
            raise InvalidArgumentError(f"key {key} already indexed")
        self._grow(point)
        self._points[key] = point
        node = self.root
        while node.children is not None:
            code = node.octant(point)
            if node.children[code] is None:
                node.children[code] = _Node(node.child_center(code), node.half / 2.0)
            node = node.children[code]
        node.items[key] = point
        if len(node.items) > self.leaf_capacity and node.half > 1e-6:
            items = node.items
            node.items = {}
            node.children = [None] * 8
            for k, p in items.items():
                code = node.octant(p)
                if node.children[code] is None:
                    node.children[code] = _Node(node.child_center(code), node.half / 2.0)
                node.children[code].items[k] = p

    def remove(self, key):
        point = self._points.pop(key)
        node = self.root
        while node.children is not None:
            node = node.children[node.octant(point)]
        del node.items[key]

    def move(self, key, point):
        self.remove(key)
        self.insert(key, point)

    def query_radius(self, center, radius):
        """Exactly the keys whose stored point lies within ``radius``."""
        if radius < 0:
            raise InvalidArgumentError("radius must be non-negative")
        center = np.asarray(center, dtype=float)
        out = []
        stack = [self.root]
        r_sq = radius * radius
        while stack:
            node = stack.pop()
            gap = np.abs(center - node.center) - node.half
            gap[gap < 0.0] = 0.0
            if gap @ gap > r_sq:
                continue
            if node.children is not None:
                stack.extend(c for c in node.children if c is not None)
            elif node.items:
                keys = list(node.items.keys())
                pts = np.array([node.items[k] for k in keys])
                d_sq = np.sum((pts - center) ** 2, axis=1)
                out.extend(k for k, d in zip(keys, d_sq) if d <= r_sq)
        return sorted(out)


class DenseSurfelMap:
    """Dense surfel store with a spatial index; single writer, many readers."""

    def __init__(self, leaf_capacity=16):
        self.surfels = {}
        self.index = SurfelIndex(leaf_capacity=leaf_capacity)
        self._next_id = 0
        self._max_centroid_var = 0.0

    def __len__(self):
        return len(self.surfels)

    def ids(self):
        return list(self.surfels.keys())

    def get(self, key) -> DenseSurfel:
        return self.surfels[key]

    def max_centroid_variance(self):
        """Upper bound on the largest centroid-covariance eigenvalue in the
        map (never decreases; used to size match queries safely)."""
        return self._max_centroid_var

    def _track_variance(self, surfel):
        bound = float(np.trace(surfel.centroid_cov))
        if bound > self._max_centroid_var:
            self._max_centroid_var = bound

    def add(self, surfel: DenseSurfel) -> int:
        key = self._next_id
        self._next_id += 1
        self.surfels[key] = surfel
        self.index.insert(key, surfel.centroid)
        self._track_variance(surfel)
        return key

    def replace(self, key, surfel: DenseSurfel):
        old = self.surfels[key]
        self.surfels[key] = surfel
        if not np.array_equal(old.centroid, surfel.centroid):
            self.index.move(key, surfel.centroid)
        self._track_variance(surfel)

    def remove(self, key):
        del self.surfels[key]
        self.index.remove(key)

    def query_radius(self, center, radius):
        return self.index.query_radius(center, radius)


def merge_moments(mean_a, cov_a, n_a, mean_b, cov_b, n_b):
    """Pooled mean and sample covariance of two point groups."""
    n = n_a + n_b
    mean = (n_a * mean_a + n_b * mean_b) / n
    diff = np.outer(mean_a - mean_b, mean_a - mean_b)
    scatter = (n_a - 1) * cov_a + (n_b - 1) * cov_b + (n_a * n_b / n) * diff
    cov = scatter / max(n - 1, 1)
    return mean, clamp_psd(cov), n


class SparseSurfelMap:
    """Sparse surfel store keyed by (resolution, voxel); fusing a surfel into
    an occupied voxel pools the voxel moments."""

    def __init__(self):
        self.by_voxel = {}

    def __len__(self):
        return len(self.by_voxel)

    def all(self):
        return list(self.by_voxel.values())

    @staticmethod
    def _key(surfel: SparseSurfel):
        voxel = tuple(np.floor(surfel.centroid / surfel.resolution).astype(int))
        return (surfel.resolution, voxel)

    def fuse(self, surfels):
        for s in surfels:
            key = self._key(s)
            existing = self.by_voxel.get(key)
            if existing is None:
                self.by_voxel[key] = s
                continue
            mean, cov, n = merge_moments(
                existing.centroid,
                existing.covariance,
                existing.count,
                s.centroid,
                s.covariance,
                s.count,
            )
            self.by_voxel[key] = SparseSurfel(
                mean, cov, n, s.resolution, max(existing.timestamp, s.timestamp)
            )

    def rebuild(self, surfels):
        self.by_voxel = {}
        self.fuse(surfels)


def voxelize_sparse(points, times, resolutions, min_points=5):
    """Sparse ellipsoid surfels from multi-resolution voxels.

    One surfel per occupied voxel per resolution when the voxel holds at
    least ``min_points`` points: centroid is the mean, covariance the sample
    covariance.  Near-degenerate planar scatter is kept but flagged.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    times = np.asarray(times, dtype=float).reshape(-1)
    if len(resolutions) < 1:
        raise InvalidArgumentError("need at least one voxel resolution")
    out = []
    for resolution in resolutions:
        if points.shape[0] == 0:
            continue
        keys = np.floor(points / resolution).astype(np.int64)
        _, inverse, counts = np.unique(
            keys, axis=0, return_inverse=True, return_counts=True
        )
        order = np.argsort(inverse, kind="stable")
        boundaries = np.cumsum(counts)[:-1]
        for group in np.split(order, boundaries):
            if group.size < min_points:
                continue
            pts = points[group]
            mean = pts.mean(axis=0)
            centered = pts - mean
            cov = centered.T @ centered / (group.size - 1)
            out.append(
                SparseSurfel(
                    mean,
                    clamp_psd(cov),
                    int(group.size),
                    float(resolution),
                    float(times[group].mean()),
                )
            )
    return out


@dataclass
class DenseExtractionConfig:
    radius: float = DEFAULT_SURFEL_RADIUS
    min_points: int = 5
    beam_sigma: float = 0.003


class _GridHash:
    """Uniform grid over points for fixed-radius neighbor lookups."""

    def __init__(self, points, cell):
        self.cell = cell
        self.points = points
        self.cells = {}
        keys = np.floor(points / cell).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(i)

    def neighbors(self, point, radius):
        base = np.floor(point / self.cell).astype(np.int64)
        idx = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    idx.extend(
                        self.cells.get((base[0] + dx, base[1] + dy, base[2] + dz), ())
                    )
        if not idx:
            return np.array([], dtype=int)
        idx = np.array(idx, dtype=int)
        d_sq = np.sum((self.points[idx] - point) ** 2, axis=1)
        return idx[d_sq <= radius * radius]


def extract_dense(points, times, traj=None, cfg: DenseExtractionConfig | None = None,
                  colours=None):
    """Dense disc surfels from deskewed points.

    Points are deskewed through ``traj`` when given (world point =
    ``T(t_i) p_i``); seeds are accepted greedily so no two seeds lie within
    one surfel radius, and each seed's fixed-radius neighborhood provides the
    centroid, the accrued scatter, the centroid uncertainty (scatter over
    ``n (n-1)`` plus the beam noise floor), and the initial Wishart count.
    Normals point toward the observing sensor.
    """
    if cfg is None:
        cfg = DenseExtractionConfig()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    times = np.asarray(times, dtype=float).reshape(-1)
    if traj is not None:
        rot, trans = traj.sample_batch(times)
        world = np.einsum("nij,nj->ni", rot, points) + trans
        origins = trans
    else:
        world = points
        origins = np.zeros_like(points)

    grid = _GridHash(world, cfg.radius)
    seed_grid = {}
    seeds = []
    inv_cell = 1.0 / cfg.radius
    for i in range(world.shape[0]):
        p = world[i]
        base = tuple(np.floor(p * inv_cell).astype(np.int64))
        clear = True
        for dx in (-1, 0, 1):
            if not clear:
                break
            for dy in (-1, 0, 1):
                if not clear:
                    break
                for dz in (-1, 0, 1):
                    for j in seed_grid.get((base[0] + dx, base[1] + dy, base[2] + dz), ()):
                        if np.sum((world[j] - p) ** 2) < cfg.radius * cfg.radius:
                            clear = False
                            break
                    if not clear:
                        break
        if clear:
            seed_grid.setdefault(base, []).append(i)
            seeds.append(i)

    out = []
    for i in seeds:
        neighbor_idx = grid.neighbors(world[i], cfg.radius)
        if neighbor_idx.size < cfg.min_points:
            continue
        pts = world[neighbor_idx]
        mean = pts.mean(axis=0)
        centered = pts - mean
        scatter = centered.T @ centered
        n = neighbor_idx.size
        centroid_cov = scatter / (n * (n - 1)) + cfg.beam_sigma**2 * np.eye(3)
        eigenvalues, vectors = np.linalg.eigh(scatter)
        normal = vectors[:, 0]
        toward_sensor = origins[neighbor_idx].mean(axis=0) - mean
        if normal @ toward_sensor < 0:
            normal = -normal
        colour = (
            np.asarray(colours, dtype=float)[neighbor_idx].mean(axis=0)
            if colours is not None
            else np.full(3, 0.5)
        )
        out.append(
            DenseSurfel(
                centroid=mean,
                normal=normal / np.linalg.norm(normal),
                centroid_cov=centroid_cov,
                scatter=clamp_psd(scatter),
                dof=float(n),
                obs_count=1,
                timestamp=float(times[neighbor_idx].mean()),
                radius=cfg.radius,
                colour=colour,
            )
        )
    return out
