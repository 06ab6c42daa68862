"""Latent point-type inference with mean-field variational EM.

Each point carries a hidden type ``c_i`` (0 = reference, 1 = anomaly).
Observations are

* the residual ``r_i`` of the point against the plane of its neighbors,
  half-normal with scale ``sigma0`` (reference) or ``sigma1`` (anomaly);
* for every directed neighbor edge ``(i, j)`` the structure-tensor
  difference ``d_ij = ||K_i - K_j||_F^2``, exponential with rate
  ``beta_s`` when both endpoints are reference points and ``beta_d``
  otherwise;

with a Bernoulli(``pi``) prior on ``c_i``.  The posterior over types is
approximated by ``q(C) = prod_i q(c_i)`` with ``gamma_i = q(c_i = 1)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from ._kernels import backend
from .geometry import NeighborhoodIndex, Neighborhoods, UnitNormalField

logger = logging.getLogger(__name__)

_HALF_LOG_2_OVER_PI = 0.5 * np.log(2.0 / np.pi)
BETA_CAP = 1e12


def structure_tensors(normals: UnitNormalField | np.ndarray, nb: Neighborhoods) -> np.ndarray:
    """Unit-trace tensors ``sum_j w_ij n_j n_j^T`` over each point and its neighbors.

    The point itself has weight 1, neighbors get the Gaussian kernel used
    for the smoothness operator (before normalization).
    """
    nrm = normals.normals if isinstance(normals, UnitNormalField) else np.asarray(normals)
    n = len(nrm)
    counts = nb.counts
    if np.any(counts == 0):
        raise ValueError(f"empty neighborhoods at {np.flatnonzero(counts == 0)[:10].tolist()}")
    rows = nb.rows()
    sigma = np.bincount(rows, weights=nb.distances, minlength=n) / counts
    s = sigma[rows]
    w = np.exp(-(nb.distances / np.where(s > 0, s, 1.0)) ** 2)
    K = np.einsum("i,ij,ik->ijk", np.ones(n), nrm, nrm)
    contrib = w[:, None, None] * nrm[nb.indices][:, :, None] * nrm[nb.indices][:, None, :]
    np.add.at(K, rows, contrib)
    tr = np.trace(K, axis1=1, axis2=2)
    return K / tr[:, None, None]


def structure_tensor(normals: UnitNormalField, index: NeighborhoodIndex, i: int) -> np.ndarray:
    index._check_id(i)
    return structure_tensors(normals, index.neighborhoods())[i]


def pair_smoothness(Ki, Kj) -> float:
    """Squared Frobenius distance between two structure tensors."""
    D = np.asarray(Ki, dtype=np.float64) - np.asarray(Kj, dtype=np.float64)
    return float(np.sum(D * D))


@dataclass(frozen=True)
class SmoothnessGraph:
    """Directed neighbor edges ``src -> dst`` with their ``d`` values."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    d: np.ndarray

    @classmethod
    def from_tensors(cls, K: np.ndarray, nb: Neighborhoods) -> "SmoothnessGraph":
        src = nb.rows()
        dst = nb.indices
        D = K[src] - K[dst]
        return cls(len(K), src, dst.astype(np.int64), np.einsum("ijk,ijk->i", D, D))

    def incidence(self, delta: np.ndarray):
        """Per-node CSR of (other endpoint, edge value) over both edge directions."""
        nodes = np.concatenate([self.src, self.dst])
        other = np.concatenate([self.dst, self.src])
        vals = np.concatenate([delta, delta])
        order = np.argsort(nodes, kind="stable")
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(nodes, minlength=self.n), out=indptr[1:])
        return indptr, np.ascontiguousarray(other[order]), np.ascontiguousarray(vals[order])

    def coloring(self):
        """Greedy coloring in index order; returns (order, color_ptr)."""
        indptr, other, _ = self.incidence(np.zeros(len(self.src)))
        color = np.full(self.n, -1, dtype=np.int64)
        for i in range(self.n):
            used = set(color[other[indptr[i]:indptr[i + 1]]].tolist())
            c = 0
            while c in used:
                c += 1
            color[i] = c
        order = np.argsort(color, kind="stable").astype(np.int64)
        color_ptr = np.zeros(color.max() + 2, dtype=np.int64)
        np.cumsum(np.bincount(color), out=color_ptr[1:])
        return order, color_ptr


@dataclass
class LviParams:
    sigma0: float
    sigma1: float
    beta_s: float
    beta_d: float
    pi: float = 0.05

    def __post_init__(self):
        for name in ("sigma0", "sigma1", "beta_s", "beta_d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.pi < 1:
            raise ValueError("pi must be in (0, 1)")

    @classmethod
    def initial(cls, residuals, graph: SmoothnessGraph, pi: float = 0.05,
                floor: float = 1e-300) -> "LviParams":
        """sigma0 = median(r), sigma1 = 5 sigma0, beta_s = 1/mean(d), beta_d = beta_s / 5."""
        s0 = max(float(np.median(residuals)), floor)
        mean_d = float(np.mean(graph.d)) if len(graph.d) else 1.0
        bs = min(1.0 / max(mean_d, 1.0 / BETA_CAP), BETA_CAP)
        return cls(s0, 5.0 * s0, bs, bs / 5.0, pi)


@dataclass
class EMConfig:
    max_iter: int = 100
    tol: float = 1e-6              # relative change of the bound
    estep_tol: float = 1e-5        # max |delta gamma| per sweep
    max_sweeps: int = 500
    update_pi: bool = False
    sigma_floor: float = 1e-12     # absolute; callers scale it by the cloud diameter
    monotone_tol: float = 1e-8     # relative


@dataclass
class VariationalPosterior:
    gamma: np.ndarray
    bound: list = field(default_factory=list)
    flags: set = field(default_factory=set)
    iterations: int = 0


def _unary_loglik(r, sigma):
    return _HALF_LOG_2_OVER_PI - np.log(sigma) - r * r / (2.0 * sigma * sigma)


def _edge_agree(gamma, graph):
    return (1.0 - gamma[graph.src]) * (1.0 - gamma[graph.dst])


def evidence_bound(gamma, residuals, graph: SmoothnessGraph, params: LviParams) -> float:
    """E_q[log p(r, d, C)] + H(q) for the factorized posterior."""
    g = np.asarray(gamma, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)
    unary = (g * (np.log(params.pi) + _unary_loglik(r, params.sigma1))
             + (1.0 - g) * (np.log1p(-params.pi) + _unary_loglik(r, params.sigma0)))
    s = _edge_agree(g, graph)
    pair = (s * (np.log(params.beta_s) - params.beta_s * graph.d)
            + (1.0 - s) * (np.log(params.beta_d) - params.beta_d * graph.d))
    entropy = -(xlogy(g, g) + xlogy(1.0 - g, 1.0 - g))
    return float(unary.sum() + pair.sum() + entropy.sum())


class _EStep:
    """Coordinate-ascent sweeps for fixed parameters."""

    def __init__(self, graph: SmoothnessGraph):
        self.graph = graph
        self.order, self.color_ptr = graph.coloring()

    def run(self, gamma, residuals, params: LviParams, tol, max_sweeps):
        base = (np.log(params.pi) - np.log1p(-params.pi)
                + _unary_loglik(residuals, params.sigma1) - _unary_loglik(residuals, params.sigma0))
        delta = (np.log(params.beta_d / params.beta_s)
                 + (params.beta_s - params.beta_d) * self.graph.d)
        indptr, other, vals = self.graph.incidence(delta)
        base = np.ascontiguousarray(base, dtype=np.float64)
        change = np.inf
        sweeps = 0
        while change >= tol and sweeps < max_sweeps:
            change = backend.mean_field_sweep(gamma, base, indptr, other, vals,
                                              self.order, self.color_ptr)
            sweeps += 1
        return sweeps, change


def _pooled_max(w0, s0, w1, s1, lower_first: bool):
    """Maximize W log(x) - S x for two groups subject to an ordering.

    ``x = 1/sigma^2`` (with a 1/2 factor absorbed) or ``x = beta``.  With
    ``lower_first`` the first group's x must not be below the second's.
    """
    x0 = w0 / s0 if s0 > 0 else np.inf
    x1 = w1 / s1 if s1 > 0 else np.inf
    if (x0 >= x1) == lower_first or x0 == x1:
        return x0, x1, False
    tot_w, tot_s = w0 + w1, s0 + s1
    x = tot_w / tot_s if tot_s > 0 else np.inf
    return x, x, True


def m_step(gamma, residuals, graph: SmoothnessGraph, params: LviParams, cfg: EMConfig):
    """Closed-form parameter update; returns (params, flags)."""
    flags = set()
    g = gamma
    r2 = residuals * residuals
    w0, w1 = float(np.sum(1.0 - g)), float(np.sum(g))
    s0, s1 = float(np.sum((1.0 - g) * r2)), float(np.sum(g * r2))
    # sigma0 <= sigma1  <=>  precision0 >= precision1
    p0, p1, pooled = _pooled_max(w0, s0, w1, s1, lower_first=True)
    if pooled:
        flags.add("sigma_pooled")
    sig0 = params.sigma0 if w0 <= 0 else (np.sqrt(1.0 / p0) if np.isfinite(p0) else 0.0)
    sig1 = params.sigma1 if w1 <= 0 else (np.sqrt(1.0 / p1) if np.isfinite(p1) else 0.0)
    if sig0 < cfg.sigma_floor or sig1 < cfg.sigma_floor:
        flags.add("sigma_floor")
        sig0, sig1 = max(sig0, cfg.sigma_floor), max(sig1, cfg.sigma_floor)

    s = _edge_agree(g, graph)
    e_s, e_d = float(np.sum(s)), float(np.sum(1.0 - s))
    ds, dd = float(np.sum(s * graph.d)), float(np.sum((1.0 - s) * graph.d))
    bs, bd, pooled = _pooled_max(e_s, ds, e_d, dd, lower_first=True)
    if pooled:
        flags.add("beta_pooled")
    bs = params.beta_s if e_s <= 0 else min(bs, BETA_CAP)
    bd = params.beta_d if e_d <= 0 else min(bd, BETA_CAP)
    pi = params.pi
    if cfg.update_pi:
        pi = float(np.clip(np.mean(g), 1e-9, 1.0 - 1e-9))
    return LviParams(sig0, sig1, bs, bd, pi), flags


def mean_field_em(residuals, graph: SmoothnessGraph, init: LviParams | None = None,
                  cfg: EMConfig | None = None, gamma0=None, fit_params: bool = True):
    """Alternate mean-field E-steps and closed-form M-steps.

    Returns ``(VariationalPosterior, LviParams)``.  The bound is recorded
    after every E and M step and must never drop by more than
    ``cfg.monotone_tol`` (relative); a drop raises ``RuntimeError``.
    With ``fit_params=False`` only the E-step runs (parameters known).
    """
    cfg = cfg or EMConfig()
    r = np.ascontiguousarray(residuals, dtype=np.float64)
    if r.shape != (graph.n,):
        raise ValueError("residuals do not match the graph")
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError("residuals must be finite and >= 0")
    params = init or LviParams.initial(r, graph)
    gamma = (np.full(graph.n, params.pi) if gamma0 is None
             else np.array(gamma0, dtype=np.float64, copy=True))
    estep = _EStep(graph)
    flags: set = set()
    bound = [evidence_bound(gamma, r, graph, params)]

    def record(value, where):
        prev = bound[-1]
        if value < prev - cfg.monotone_tol * max(1.0, abs(prev)):
            raise RuntimeError(f"evidence bound decreased in {where}: {prev!r} -> {value!r}")
        bound.append(value)

    it = 0
    for it in range(1, cfg.max_iter + 1):
        estep.run(gamma, r, params, cfg.estep_tol, cfg.max_sweeps)
        record(evidence_bound(gamma, r, graph, params), "E-step")
        if not fit_params:
            break
        params, f = m_step(gamma, r, graph, params, cfg)
        flags |= f
        record(evidence_bound(gamma, r, graph, params), "M-step")
        prev = bound[-3]
        if abs(bound[-1] - prev) <= cfg.tol * max(1.0, abs(prev)):
            break
    if np.all(gamma < 1e-6) or np.all(gamma > 1.0 - 1e-6):
        flags.add("saturated")
    return VariationalPosterior(gamma, bound, flags, it), params


def map_labels(post: VariationalPosterior | np.ndarray) -> np.ndarray:
    """1 where q(c_i = 1) > 1/2; exact ties go to the reference class."""
    g = post.gamma if isinstance(post, VariationalPosterior) else np.asarray(post)
    return (g > 0.5).astype(np.int8)


__all__ = [
    "structure_tensors", "structure_tensor", "pair_smoothness", "SmoothnessGraph",
    "LviParams", "EMConfig", "VariationalPosterior", "evidence_bound", "m_step",
    "mean_field_em", "map_labels",
]
