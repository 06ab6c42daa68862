"""Sparse decomposition ``Y = X + A + E`` with a graph smoothness loss.

The reference surface is kept smooth by penalizing ``H (Y - A)``, where row
``i`` of ``H`` subtracts a convex combination of point i's neighbors from
the point itself.  Row-sparsity of ``A`` comes from the group LOG penalty

    p(A) = sum_i log(sqrt(||a_i||^2 + eps) + ||a_i||)

which is concave in ``||a_i||``.  The solver is majorization-minimization:
each outer step linearizes the penalty at the current iterate, leaving a
weighted group lasso that is solved by monotone FISTA with group
soft-thresholding.  Nonzero rows of ``A`` are the detected anomalies.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import NeighborhoodIndex, PointCloud, _segment_pca

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmoothnessOperator:
    """Sparse ``H = I - W`` with convex Gaussian neighbor weights.

    ``active`` marks rows kept in the loss.  Rows of points whose weighted
    neighbor centroid sits off to one side (open boundaries of a scan) are
    zeroed: there the convex combination cannot reproduce the point even
    on a perfectly flat surface.
    """

    H: sp.csr_matrix
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    active: np.ndarray

    @property
    def n(self) -> int:
        return self.H.shape[0]


def gaussian_weights(distances: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """exp(-d^2 / sigma_i^2) per row, normalized to sum 1.

    ``sigma_i`` is the mean neighbor distance of the row.
    """
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(len(counts)), counts)
    sigma = np.bincount(rows, weights=distances, minlength=len(counts)) / np.maximum(counts, 1)
    s = sigma[rows]
    w = np.exp(-(distances / np.where(s > 0, s, 1.0)) ** 2)
    tot = np.bincount(rows, weights=w, minlength=len(counts))
    return w / tot[rows]


def build_smoothness_operator(cloud: PointCloud, index: NeighborhoodIndex, k: int | None = 8,
                              drop_boundary: bool = True,
                              boundary_tol: float = 0.25) -> SmoothnessOperator:
    """Graph smoothness operator over the ``k`` nearest neighbors.

    A row is treated as boundary when the tangential part of
    ``x_i - sum_j w_ij x_j`` exceeds ``boundary_tol`` times the mean
    neighbor distance.
    """
    nb = index.radius_all(index.r, k) if index.r is not None else index.knn_all(k)
    counts = nb.counts
    if np.any(counts < 3):
        bad = np.flatnonzero(counts < 3)
        raise ValueError(f"isolated points (fewer than 3 neighbors): {bad.tolist()}")
    n = len(cloud)
    w = gaussian_weights(nb.distances, nb.indptr)
    rows = nb.rows()
    W = sp.csr_matrix((w, nb.indices, nb.indptr), shape=(n, n))
    pts = cloud.points
    offset = pts - W @ pts
    active = np.ones(n, dtype=bool)
    if drop_boundary:
        seg_rows = np.concatenate([np.arange(n), rows])
        seg_ids = np.concatenate([np.arange(n), nb.indices])
        _, _, evecs, _ = _segment_pca(pts, seg_rows, seg_ids, n)
        normal = evecs[:, :, 0]
        tang = offset - np.einsum("ij,ij->i", offset, normal)[:, None] * normal
        sigma = np.bincount(rows, weights=nb.distances, minlength=n) / counts
        active = np.linalg.norm(tang, axis=1) <= boundary_tol * sigma
    H = (sp.identity(n, format="csr") - W).tocsr()
    if not np.all(active):
        H = (sp.diags(active.astype(np.float64)) @ H).tocsr()
    H.sort_indices()
    return SmoothnessOperator(H, nb.indptr, nb.indices, w, active)


def group_log_penalty(A, eps: float) -> float:
    """sum_i log(sqrt(||a_i||^2 + eps) + ||a_i||)."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    A = np.asarray(A, dtype=np.float64)
    norms = np.linalg.norm(A.reshape(len(A), -1), axis=1)
    return float(np.sum(np.log(np.sqrt(norms ** 2 + eps) + norms)))


def marginal_weight(row_norms, lam: float, eps: float) -> np.ndarray:
    """Slope of the penalty at the given row norms (the MM reweighting)."""
    return lam / np.sqrt(np.asarray(row_norms) ** 2 + eps)


def _as_matrix(H) -> sp.csr_matrix:
    return H.H if isinstance(H, SmoothnessOperator) else sp.csr_matrix(H)


def _as_points(Y) -> np.ndarray:
    return Y.points if isinstance(Y, PointCloud) else np.asarray(Y, dtype=np.float64)


def lambda_max(H, Y, eps: float) -> float:
    """Smallest lambda for which A = 0 is a stationary point.

    The loss gradient at zero is ``-2 H^T H Y`` and the penalty's
    directional slope at zero is ``||.|| / sqrt(eps)``.
    """
    Hm, Y = _as_matrix(H), _as_points(Y)
    G = Hm.T @ (Hm @ Y)
    return float(2.0 * np.sqrt(eps) * np.linalg.norm(G, axis=1).max())


def spectral_norm_sq(H, rtol: float = 1e-4) -> float:
    """Largest eigenvalue of H^T H (Lanczos from a fixed start vector)."""
    Hm = _as_matrix(H)
    n = Hm.shape[1]
    if Hm.nnz == 0:
        return 0.0
    if n <= 64:
        return float(np.linalg.eigvalsh((Hm.T @ Hm).toarray())[-1])
    op = spla.LinearOperator((n, n), matvec=lambda x: Hm.T @ (Hm @ x), dtype=np.float64)
    v0 = np.random.default_rng(0).standard_normal(n)
    # ARPACK's tol is relative to the eigenvalue; tighten it below the target
    val = spla.eigsh(op, k=1, which="LA", v0=v0, tol=0.01 * rtol, return_eigenvectors=False)
    return float(val[0])


@dataclass
class DecompositionConfig:
    lam: float | None = None          # explicit sparsity weight
    lam_ratio: float = 0.1            # used when lam is None: lam = ratio * lambda_max
    eps: float | None = None          # default 1e-4 * diameter^2
    k: int = 8
    max_outer: int = 30
    max_inner: int = 200
    tol: float = 1e-6
    delta: float | None = None        # zero-row cutoff, default 1e-6 * diameter
    drop_boundary: bool = True

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.lam_ratio < 0:
            raise ValueError("lam_ratio must be >= 0")
        if self.k < 3:
            raise ValueError("k must be >= 3")
        for name in ("max_outer", "max_inner"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be > 0")

    def resolve_eps(self, diameter: float) -> float:
        return self.eps if self.eps is not None else 1e-4 * diameter ** 2

    def resolve_delta(self, diameter: float) -> float:
        return self.delta if self.delta is not None else 1e-6 * diameter


@dataclass
class DecompositionResult:
    A: np.ndarray
    X_hat: np.ndarray
    E: np.ndarray
    objective: list = field(default_factory=list)
    lam: float = 0.0
    lam_max: float = 0.0
    eps: float = 0.0
    delta: float = 0.0
    outer_iterations: int = 0
    rejected_steps: int = 0          # outer steps undone because J rose (rounding only)

    @property
    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.A, axis=1)


def objective(H, Y, A, lam: float, eps: float) -> float:
    Hm = _as_matrix(H)
    R = Hm @ (_as_points(Y) - A)
    return float(np.sum(R * R)) + lam * group_log_penalty(A, eps)


def group_soft_threshold(Z: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Prox of sum_i tau_i ||z_i||: shrink each row's norm by tau_i."""
    norms = np.linalg.norm(Z, axis=1)
    scale = np.zeros_like(norms)
    np.divide(np.maximum(norms - tau, 0.0), norms, out=scale, where=norms > 0)
    return Z * scale[:, None]


def _weighted_group_lasso(Hm, HY, A0, rho, L, max_iter, tol):
    """Monotone FISTA on ||HY - HA||^2 + sum_i rho_i ||a_i|| from A0."""
    def surrogate(A, HA=None):
        R = HY - (Hm @ A if HA is None else HA)
        return float(np.sum(R * R)) + float(rho @ np.linalg.norm(A, axis=1))

    x = A0.copy()
    fx = surrogate(x)
    y = x.copy()
    t = 1.0
    tau = rho / L
    for _ in range(max_iter):
        Hy = Hm @ y
        grad = -2.0 * (Hm.T @ (HY - Hy))
        z = group_soft_threshold(y - grad / L, tau)
        fz = surrogate(z)
        x_prev = x
        if fz <= fx:
            x, fx = z, fz
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x + (t / t_next) * (z - x) + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        step = np.linalg.norm(z - x_prev)
        if step <= tol * max(1.0, np.linalg.norm(x)):
            break
    return x, fx


def solve_decomposition(Y, H, cfg: DecompositionConfig | None = None,
                        diameter: float | None = None) -> DecompositionResult:
    """Minimize ||H(Y - A)||_F^2 + lam * p(A) over the anomaly matrix A."""
    cfg = cfg or DecompositionConfig()
    Yp = _as_points(Y)
    Hm = _as_matrix(H)
    if diameter is None:
        diameter = Y.diameter() if isinstance(Y, PointCloud) else PointCloud(Yp).diameter()
    eps = cfg.resolve_eps(diameter)
    delta = cfg.resolve_delta(diameter)
    lmax = lambda_max(Hm, Yp, eps)
    lam = cfg.lam if cfg.lam is not None else cfg.lam_ratio * lmax
    if lam < 0:
        raise ValueError("lambda must be >= 0")

    HY = Hm @ Yp
    # small margin so 1/L stays a safe step despite the eigenvalue tolerance
    L = 2.0 * spectral_norm_sq(Hm) * 1.01
    A = np.zeros_like(Yp)
    J = objective(Hm, Yp, A, lam, eps)
    trace = [J]
    it = rejected = 0
    if L > 0:
        for it in range(1, cfg.max_outer + 1):
            rho = marginal_weight(np.linalg.norm(A, axis=1), lam, eps)
            A_new, _ = _weighted_group_lasso(Hm, HY, A, rho, L, cfg.max_inner, cfg.tol)
            J_new = objective(Hm, Yp, A_new, lam, eps)
            if not np.isfinite(J_new):
                raise FloatingPointError(f"non-finite objective at outer iteration {it}")
            if J_new > J:
                # surrogate decrease guarantees J_new <= J up to rounding
                logger.debug("objective rose by %.3g; keeping previous iterate", J_new - J)
                A_new, J_new = A, J
                rejected += 1
            trace.append(J_new)
            done = abs(J - J_new) <= cfg.tol * max(1.0, abs(J))
            A, J = A_new, J_new
            if done:
                break
    X_hat = Yp - A
    return DecompositionResult(A=A, X_hat=X_hat, E=Hm @ X_hat, objective=trace, lam=lam,
                               lam_max=lmax, eps=eps, delta=delta, outer_iterations=it,
                               rejected_steps=rejected)


def labels_from_rows(result: DecompositionResult, delta: float | None = None) -> np.ndarray:
    """1 where the anomaly row norm exceeds ``delta``."""
    delta = result.delta if delta is None else delta
    return (result.row_norms > delta).astype(np.int8)


def bisect_lambda(Y, H, max_fraction: float, cfg: DecompositionConfig | None = None,
                  iters: int = 12, lo_ratio: float = 1e-3) -> tuple[float, DecompositionResult]:
    """Smallest lambda (on a log scale) keeping the anomaly fraction <= ``max_fraction``.

    Assumes the detected fraction shrinks as lambda grows.
    """
    cfg = cfg or DecompositionConfig()
    if not 0 < max_fraction < 1:
        raise ValueError("max_fraction must be in (0, 1)")
    Yp = _as_points(Y)
    diameter = Y.diameter() if isinstance(Y, PointCloud) else PointCloud(Yp).diameter()

    def run(lam):
        c = DecompositionConfig(**{**cfg.__dict__, "lam": lam})
        res = solve_decomposition(Yp, H, c, diameter)
        return res, labels_from_rows(res).mean()

    lmax = lambda_max(H, Yp, cfg.resolve_eps(diameter))
    best = run(lmax)[0]
    lo, hi = np.log(lo_ratio * lmax), np.log(lmax)
    res, frac = run(np.exp(lo))
    if frac <= max_fraction:
        return float(np.exp(lo)), res
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        res, frac = run(np.exp(mid))
        if frac <= max_fraction:
            hi, best = mid, res
        else:
            lo = mid
    return float(np.exp(hi)), best
