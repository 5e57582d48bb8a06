"""Explicit geometry: meshes, point clouds, exact nearest-point oracle, samplers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels

PAD = 0.55
DEFAULT_SIGMAS = (0.003, 0.01, 0.03)
DEFAULT_UNIFORM_FRACTION = 0.05


class GeometryError(ValueError):
    """Raised for malformed or degenerate geometry input."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.max() >= len(self.vertices) or self.triangles.min() < 0
        ):
            raise GeometryError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    @property
    def corners(self) -> np.ndarray:
        """(T, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.areas().sum())

    def edge_counts(self) -> dict:
        """Map each undirected edge to the number of incident triangles."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(k): int(c) for k, c in zip(uniq, counts)}

    def boundary_edges(self) -> np.ndarray:
        t = self.triangles
        if len(t) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]


@dataclass
class PointCloud:
    points: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class DisplacementSample:
    """Ground-truth displacement from query points to their nearest surface points.

    Batched: ``query`` and ``displacement`` are (M, 3).
    """

    query: np.ndarray
    displacement: np.ndarray
    triangle: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def distance(self) -> np.ndarray:
        return np.linalg.norm(self.displacement, axis=-1)

    @property
    def direction(self) -> np.ndarray:
        """Unit direction; NaN rows where the distance is zero."""
        d = self.distance[..., None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(d > 0, self.displacement / d, np.nan)

    @property
    def closest(self) -> np.ndarray:
        return self.query + self.displacement


def normalize_to_unit_cube(mesh: TriangleMesh):
    """Center the bounding box at the origin and scale its longest side to 1.

    Returns ``(mesh, scale, offset)`` with ``normalized = (v + offset) * scale``.
    """
    if len(mesh.vertices) == 0:
        raise GeometryError("empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise GeometryError("degenerate mesh: zero extent on all axes")
    offset = -(lo + hi) / 2.0
    scale = 1.0 / extent
    verts = (mesh.vertices + offset) * scale
    return TriangleMesh(verts, mesh.triangles.copy()), scale, offset


class Bvh:
    """Median-split bounding-volume hierarchy over triangles."""

    def __init__(self, mesh: TriangleMesh, leaf_size: int = 8):
        if len(mesh) == 0:
            raise GeometryError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        self.leaf_size = leaf_size
        corners = mesh.corners
        tri_lo = corners.min(axis=1)
        tri_hi = corners.max(axis=1)
        centroids = corners.mean(axis=1)

        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(mesh), dtype=np.int64)

        def new_node():
            for lst in (lo, hi):
                lst.append(None)
            for lst in (left, right, start, count):
                lst.append(-1)
            return len(lo) - 1

        # iterative build; each item is (node, begin, end)
        root = new_node()
        work = [(root, 0, len(order))]
        while work:
            node, b, e = work.pop()
            idx = order[b:e]
            lo[node] = tri_lo[idx].min(axis=0)
            hi[node] = tri_hi[idx].max(axis=0)
            if e - b <= leaf_size:
                start[node] = b
                count[node] = e - b
                continue
            c = centroids[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            perm = np.argsort(c[:, axis], kind="stable")
            order[b:e] = idx[perm]
            mid = b + (e - b) // 2
            l_node = new_node()
            r_node = new_node()
            left[node] = l_node
            right[node] = r_node
            work.append((r_node, mid, e))
            work.append((l_node, b, mid))

        self.node_lo = np.array(lo)
        self.node_hi = np.array(hi)
        self.node_left = np.array(left, dtype=np.int64)
        self.node_right = np.array(right, dtype=np.int64)
        self.node_start = np.array(start, dtype=np.int64)
        self.node_count = np.array(count, dtype=np.int64)
        self.order = order

    def leaves(self):
        """Yield the triangle-index array of every leaf."""
        for n in range(len(self.node_left)):
            if self.node_left[n] < 0:
                s = self.node_start[n]
                yield self.order[s:s + self.node_count[n]]

    def query(self, queries: np.ndarray):
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        return _kernels.bvh_nearest(
            self.mesh.vertices, self.mesh.triangles, self.node_lo, self.node_hi,
            self.node_left, self.node_right, self.node_start, self.node_count,
            self.order, q,
        )


def nearest_point_on_mesh(mesh: TriangleMesh, bvh: Optional[Bvh], q) -> DisplacementSample:
    """Exact closest surface point for each query; ties go to the lowest triangle index."""
    if len(mesh) == 0:
        raise GeometryError("empty mesh")
    q = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 3)
    if bvh is None:
        bvh = Bvh(mesh)
    closest, tri, _ = bvh.query(q)
    return DisplacementSample(q, closest - q, tri)


def brute_force_nearest(mesh: TriangleMesh, q) -> DisplacementSample:
    q = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 3)
    closest, tri, _ = _kernels.brute_force_nearest(mesh.vertices, mesh.triangles, q)
    return DisplacementSample(q, closest - q, tri)


class CloudIndex:
    """k-nearest-neighbour search on a fixed point set.

    Results are sorted by ascending distance with ties broken by the lower
    point index, which makes them independent of the tree's internals.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, q, k: int):
        n = len(self.points)
        if k > n:
            raise GeometryError(f"k={k} exceeds cloud size {n}")
        if k < 1:
            raise GeometryError("k must be positive")
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        kk = min(k + 1, n)
        _, idx = self.tree.query(q, k=kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), kk)
        dist = np.linalg.norm(self.points[idx] - q[:, None, :], axis=-1)
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        if kk > k:
            # a tie straddling the k-th slot may hide a lower index outside the returned set
            suspect = np.nonzero(dist[:, k] - dist[:, k - 1] <= 1e-12 * (1.0 + dist[:, k]))[0]
            for i in suspect:
                idx[i, :k], dist[i, :k] = self._exhaustive(q[i], k)
        return idx[:, :k], dist[:, :k]

    def _exhaustive(self, q, k):
        d = np.linalg.norm(self.points - q, axis=1)
        order = np.lexsort((np.arange(len(d)), d))[:k]
        return order, d[order]


def nearest_point_on_cloud(cloud: PointCloud, q, k: int):
    """Indices and distances of the ``k`` nearest cloud points to each query."""
    return CloudIndex(cloud.points).query(q, k)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface."""
    if len(mesh) == 0:
        raise GeometryError("empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        raise GeometryError("mesh has zero surface area")
    cdf = np.cumsum(areas) / total
    tri = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(mesh) - 1)
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    w0 = 1.0 - su
    w1 = su * (1.0 - v)
    w2 = su * v
    c = mesh.corners[tri]
    pts = w0[:, None] * c[:, 0] + w1[:, None] * c[:, 1] + w2[:, None] * c[:, 2]
    return PointCloud(pts)


def sample_queries(cloud: PointCloud, n: int, noise_sigmas: Sequence[float] = DEFAULT_SIGMAS,
                   uniform_fraction: float = DEFAULT_UNIFORM_FRACTION, seed: int = 0) -> np.ndarray:
    """Gaussian-perturbed cloud points mixed with uniform samples in the padded cube."""
    if not 0.0 <= uniform_fraction <= 1.0:
        raise GeometryError("uniform_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_uniform = int(round(n * uniform_fraction))
    n_near = n - n_uniform
    out = np.empty((n, 3))
    if n_near:
        if len(cloud) == 0:
            raise GeometryError("cannot perturb an empty cloud")
        src = cloud.points[rng.integers(0, len(cloud), n_near)]
        sig = np.asarray(noise_sigmas, dtype=np.float64)[rng.integers(0, len(noise_sigmas), n_near)]
        out[:n_near] = src + rng.standard_normal((n_near, 3)) * sig[:, None]
    out[n_near:] = rng.uniform(-PAD, PAD, (n_uniform, 3))
    return out
