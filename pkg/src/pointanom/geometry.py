"""Point-cloud container, neighborhood queries, normals and rigid motions.

Everything downstream (descriptors, decomposition, latent inference) works
on the :class:`Neighborhoods` CSR lists produced here, so the ordering rule
lives in one place: neighbors are sorted by ascending distance, distance
ties go to the smaller point index, and a point is never its own neighbor.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.distance import pdist

_DIAMETER_EXACT_LIMIT = 5000


def worker_count() -> int:
    """Worker cap from ``POINTANOM_WORKERS`` (default 1)."""
    raw = os.environ.get("POINTANOM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N unordered 3D points with optional ground-truth labels."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
            raise ValueError(f"non-finite coordinates at points {bad[:10].tolist()}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels).astype(np.int8)
            if lab.shape != (pts.shape[0],):
                raise ValueError("labels must have one entry per point")
            if np.any((lab != 0) & (lab != 1)):
                raise ValueError("labels must be 0 or 1")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    @cached_property
    def _diameter(self) -> float:
        pts = self.points
        if len(pts) < 2:
            return 0.0
        if len(pts) > _DIAMETER_EXACT_LIMIT:
            # the farthest pair always sits on the hull; QJ copes with flat clouds
            hull = ConvexHull(pts, qhull_options="QJ")
            pts = pts[np.unique(hull.simplices)]
        return float(pdist(pts).max())

    def diameter(self) -> float:
        """Largest pairwise distance."""
        return self._diameter


@dataclass(frozen=True)
class Neighborhoods:
    """Per-point neighbor lists in CSR layout.

    ``indices[indptr[i]:indptr[i+1]]`` are the neighbors of point ``i``
    sorted by distance, and ``distances`` holds the matching Euclidean
    distances.
    """

    indptr: np.ndarray
    indices: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.indptr) - 1

    def __getitem__(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def dist(self, i: int) -> np.ndarray:
        return self.distances[self.indptr[i]:self.indptr[i + 1]]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def rows(self) -> np.ndarray:
        """Owning point id of every CSR entry."""
        return np.repeat(np.arange(len(self)), self.counts)

    @classmethod
    def from_dense(cls, ids: np.ndarray, dists: np.ndarray) -> "Neighborhoods":
        n, k = ids.shape
        return cls(np.arange(0, n * k + 1, k, dtype=np.int64),
                   np.ascontiguousarray(ids.reshape(-1), dtype=np.int64),
                   np.ascontiguousarray(dists.reshape(-1), dtype=np.float64))


def _exact_dists(points: np.ndarray, rows: np.ndarray, cand: np.ndarray) -> np.ndarray:
    diff = points[cand] - points[rows][:, None, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _sorted_candidates(points, rows, cand):
    """Drop self/padding and order candidates by (distance, id)."""
    n = len(points)
    d = _exact_dists(points, rows, np.minimum(cand, n - 1))
    invalid = (cand >= n) | (cand == rows[:, None])
    d[invalid] = np.inf
    ids = np.where(invalid, n, cand)
    # two stable passes == row-wise lexsort on (distance, id)
    o1 = np.argsort(ids, axis=1, kind="stable")
    ids, d = np.take_along_axis(ids, o1, 1), np.take_along_axis(d, o1, 1)
    o2 = np.argsort(d, axis=1, kind="stable")
    return np.take_along_axis(ids, o2, 1), np.take_along_axis(d, o2, 1)


@dataclass(eq=False)
class NeighborhoodIndex:
    """kNN / radius index over an immutable :class:`PointCloud`.

    Backed by :class:`scipy.spatial.cKDTree`; distances are recomputed
    exactly for the candidate set so tie-breaking does not depend on the
    tree's traversal order.
    """

    cloud: PointCloud
    k: int | None = None
    r: float | None = None
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.cloud) < 2:
            raise ValueError("need at least 2 points to build a neighborhood index")
        if self.k is None and self.r is None:
            raise ValueError("configure k >= 1 or r > 0")
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.r is not None and not self.r > 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        self.tree = cKDTree(self.cloud.points)
        self._cache: dict = {}

    @property
    def n(self) -> int:
        return len(self.cloud)

    def _check_id(self, i):
        if not 0 <= i < self.n:
            raise IndexError(f"point id {i} out of range [0, {self.n})")

    def knn_all(self, k: int | None = None) -> Neighborhoods:
        """k nearest neighbors of every point as a dense-row CSR."""
        k = self.k if k is None else k
        if k is None or k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, self.n - 1)
        key = ("knn", k)
        if key in self._cache:
            return self._cache[key]
        pts = self.cloud.points
        n = self.n
        ids = np.empty((n, k), dtype=np.int64)
        dists = np.empty((n, k))
        todo = np.arange(n)
        pad = 4
        while len(todo):
            kq = min(n, k + 1 + pad)
            _, cand = self.tree.query(pts[todo], k=kq, workers=worker_count())
            cand = np.asarray(cand, dtype=np.int64).reshape(len(todo), kq)
            sid, sd = _sorted_candidates(pts, todo, cand)
            ids[todo] = sid[:, :k]
            dists[todo] = sd[:, :k]
            if kq >= n:
                break
            # a tie straddling the query horizon could hide a smaller id
            horizon = np.where(np.isfinite(sd), sd, -np.inf).max(axis=1)
            pending = np.flatnonzero((sd[:, k - 1] >= horizon * (1 - 1e-12))
                                     | ~np.isfinite(sd[:, k - 1]))
            todo = todo[pending]
            pad *= 4
        nb = Neighborhoods.from_dense(ids, dists)
        self._cache[key] = nb
        return nb

    def radius_all(self, r: float | None = None, k: int | None = None) -> Neighborhoods:
        """All neighbors within ``r`` (optionally capped at the ``k`` nearest)."""
        r = self.r if r is None else r
        if r is None or not r > 0:
            raise ValueError("r must be > 0")
        key = ("radius", r, k)
        if key in self._cache:
            return self._cache[key]
        pts = self.cloud.points
        lists = self.tree.query_ball_point(pts, r, workers=worker_count())
        indptr = [0]
        out_ids, out_d = [], []
        for i, lst in enumerate(lists):
            cand = np.array([j for j in lst if j != i], dtype=np.int64)
            d = np.sqrt(((pts[cand] - pts[i]) ** 2).sum(axis=1)) if len(cand) else np.empty(0)
            keep = d <= r
            cand, d = cand[keep], d[keep]
            order = np.lexsort((cand, d))
            if k is not None:
                order = order[:k]
            out_ids.append(cand[order])
            out_d.append(d[order])
            indptr.append(indptr[-1] + len(order))
        nb = Neighborhoods(np.asarray(indptr, dtype=np.int64),
                           np.concatenate(out_ids) if out_ids else np.empty(0, np.int64),
                           np.concatenate(out_d) if out_d else np.empty(0))
        self._cache[key] = nb
        return nb

    def neighborhoods(self) -> Neighborhoods:
        """Neighbor lists for the configured mode (k, r, or k capped by r)."""
        if self.r is not None:
            return self.radius_all(self.r, self.k)
        return self.knn_all(self.k)

    def knn(self, i: int, k: int | None = None) -> np.ndarray:
        self._check_id(i)
        return self.knn_all(k)[i].copy()

    def radius(self, i: int, r: float | None = None) -> np.ndarray:
        self._check_id(i)
        return self.radius_all(r)[i].copy()


def build_index(cloud: PointCloud, k: int | None = None, r: float | None = None) -> NeighborhoodIndex:
    return NeighborhoodIndex(cloud, k=k, r=r)


def knn(index: NeighborhoodIndex, i: int, k: int) -> np.ndarray:
    """Ids of the ``min(k, N-1)`` nearest neighbors of point ``i``."""
    return index.knn(i, k)


@dataclass(frozen=True)
class UnitNormalField:
    normals: np.ndarray
    degenerate: np.ndarray

    def __len__(self):
        return len(self.normals)


def _segment_pca(points: np.ndarray, seg_rows: np.ndarray, seg_ids: np.ndarray, n_seg: int):
    """Centroid, covariance eigenvalues/vectors for index segments."""
    counts = np.bincount(seg_rows, minlength=n_seg).astype(np.float64)
    members = points[seg_ids]
    sums = np.zeros((n_seg, 3))
    np.add.at(sums, seg_rows, members)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = sums / counts[:, None]
    centered = members - mu[seg_rows]
    outer = centered[:, :, None] * centered[:, None, :]
    cov = np.zeros((n_seg, 3, 3))
    np.add.at(cov, seg_rows, outer)
    cov /= np.maximum(counts, 1.0)[:, None, None]
    evals, evecs = np.linalg.eigh(cov)
    return mu, evals, evecs, counts


def _orient(normals, points, viewpoint, orient, center):
    if orient == "direction":
        v = np.asarray(viewpoint, dtype=np.float64)
        ref = np.broadcast_to(v / np.linalg.norm(v), normals.shape)
    elif orient == "outward":
        c = points.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
        ref = points - c
    elif orient == "viewpoint":
        ref = np.asarray(viewpoint, dtype=np.float64) - points
    else:
        raise ValueError(f"unknown orientation rule {orient!r}")
    s = np.einsum("ij,ij->i", normals, ref)
    flip = s < 0
    # exactly perpendicular: make the first non-zero component positive
    tie = s == 0
    if np.any(tie):
        first = np.argmax(np.abs(normals[tie]) > 0, axis=1)
        flip[tie] = normals[tie][np.arange(tie.sum()), first] < 0
    normals[flip] *= -1.0
    return normals


def estimate_normals(cloud: PointCloud, index: NeighborhoodIndex, viewpoint=(0.0, 0.0, 1.0),
                     orient: str = "direction", center=None) -> UnitNormalField:
    """PCA normals over each point's neighborhood (the point included).

    ``orient`` selects the sign rule: ``"direction"`` makes ``n . viewpoint
    >= 0`` for a fixed direction, ``"viewpoint"`` points normals towards a
    sensor position, ``"outward"`` points them away from ``center``
    (default: the centroid).  The viewpoint is expressed in the cloud's own
    frame, so it has to be transformed together with the cloud.

    Collinear or too-small neighborhoods get the viewpoint direction as a
    fallback normal and are flagged in ``degenerate``.
    """
    nb = index.neighborhoods()
    n = len(cloud)
    seg_rows = np.concatenate([np.arange(n), nb.rows()])
    seg_ids = np.concatenate([np.arange(n), nb.indices])
    _, evals, evecs, counts = _segment_pca(cloud.points, seg_rows, seg_ids, n)
    normals = np.ascontiguousarray(evecs[:, :, 0])
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    degenerate = (counts < 3) | (evals[:, 1] <= 1e-12 * scale) | (evals[:, 2] <= 0)
    normals = _orient(normals, cloud.points, viewpoint, orient, center)
    if np.any(degenerate):
        v = np.asarray(viewpoint, dtype=np.float64)
        if orient == "direction":
            normals[degenerate] = v / np.linalg.norm(v)
        else:
            normals[degenerate] = np.array([0.0, 0.0, 1.0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return UnitNormalField(normals, degenerate)


def plane_residuals(cloud: PointCloud, index: NeighborhoodIndex) -> np.ndarray:
    """Distance of each point to the PCA plane fitted through its neighbors alone."""
    nb = index.neighborhoods()
    if np.any(nb.counts < 3):
        bad = np.flatnonzero(nb.counts < 3)
        raise ValueError(f"points with fewer than 3 neighbors: {bad[:10].tolist()}")
    mu, _, evecs, _ = _segment_pca(cloud.points, nb.rows(), nb.indices, len(cloud))
    return np.abs(np.einsum("ij,ij->i", evecs[:, :, 0], cloud.points - mu))


def local_plane_residual(cloud: PointCloud, index: NeighborhoodIndex,
                         normals: UnitNormalField | None, i: int) -> float:
    """Residual ``|n^T (x_i - mu_i)|`` against the plane of point i's neighbors.

    Both the centroid and the normal are computed without x_i, so a spike
    is measured against the surface around it rather than a plane it
    already tilted.
    """
    index._check_id(i)
    if normals is not None and normals.degenerate[i]:
        raise ValueError(f"point {i} has no valid normal")
    ids = index.neighborhoods()[i]
    if len(ids) < 3:
        raise ValueError(f"point {i} has fewer than 3 neighbors")
    nbrs = cloud.points[ids]
    mu = nbrs.mean(axis=0)
    c = nbrs - mu
    _, vecs = np.linalg.eigh(c.T @ c)
    return float(abs(vecs[:, 0] @ (cloud.points[i] - mu)))


def check_rotation(R, tol: float = 1e-9) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("R is not a proper rotation (R^T R != I or det R != 1)")
    return R


def rigid_transform(cloud: PointCloud, R, t) -> PointCloud:
    """Map every point to ``R p + t``; labels and ordering are kept."""
    R = check_rotation(R)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    return PointCloud(cloud.points @ R.T + t, cloud.labels)
