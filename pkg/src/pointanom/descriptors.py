"""Darboux-frame pair features, SPFH/FPFH histograms and a deviation scorer.

Each histogram is three concatenated blocks (alpha, phi, theta) of
``bins`` uniform buckets over the fixed ranges [-1, 1], [-1, 1] and
(-pi, pi]; every block is L1-normalized on its own.

The anomaly score is *not* part of the FPFH construction itself: a point
scores the L1 distance between its FPFH and the coordinate-wise median
FPFH of the whole sample, and labels come from a robust median/MAD cut.
This is a design choice of this package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import backend
from ._kernels._pyimpl import DEGENERATE_EPS, TIE_EPS
from .geometry import NeighborhoodIndex, Neighborhoods, PointCloud, UnitNormalField

MAD_SCALE = 1.4826


class DegeneratePairError(ValueError):
    """Coincident points, or connecting line parallel to the source normal."""


@dataclass(frozen=True)
class PairFeatures:
    alpha: float
    phi: float
    theta: float

    def as_tuple(self):
        return (self.alpha, self.phi, self.theta)


@dataclass(frozen=True)
class DescriptorConfig:
    bins: int = 11
    k: int = 16
    weight_floor: float = 1e-12  # relative to the cloud diameter

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not self.weight_floor > 0:
            raise ValueError("weight_floor must be > 0")


@dataclass
class DescriptorSet:
    histograms: np.ndarray
    flags: np.ndarray
    bins: int
    scores: np.ndarray | None = None
    skipped_pairs: int = 0

    def block(self, f: int) -> np.ndarray:
        """Histogram block of feature ``f`` (0=alpha, 1=phi, 2=theta)."""
        return self.histograms[:, f * self.bins:(f + 1) * self.bins]


def pair_features(p_i, n_i, p_j, n_j) -> PairFeatures:
    """Features of one pair; the first point wins a tie for the source role."""
    p_i, n_i, p_j, n_j = (np.asarray(x, dtype=np.float64) for x in (p_i, n_i, p_j, n_j))
    d = p_j - p_i
    dist = np.linalg.norm(d)
    if dist == 0:
        raise DegeneratePairError("coincident points")
    dn = d / dist
    if abs(n_j @ dn) > abs(n_i @ dn) + TIE_EPS:
        p_i, n_i, p_j, n_j = p_j, n_j, p_i, n_i
        dn = -dn
    u = n_i
    v = np.cross(dn, u)
    nv = np.linalg.norm(v)
    if nv < DEGENERATE_EPS:
        raise DegeneratePairError("connecting line parallel to source normal")
    v /= nv
    w = np.cross(u, v)
    theta = float(np.arctan2(w @ n_j, u @ n_j))
    if theta == -np.pi:
        theta = np.pi
    return PairFeatures(float(v @ n_j), float(u @ dn), theta)


def _neighbors(index: NeighborhoodIndex, cfg: DescriptorConfig) -> Neighborhoods:
    if index.r is not None:
        return index.radius_all(index.r, cfg.k)
    return index.knn_all(cfg.k)


def spfh_all(cloud: PointCloud, normals: UnitNormalField, index: NeighborhoodIndex,
             cfg: DescriptorConfig = DescriptorConfig()):
    """SPFH of every point: (histograms, valid pair counts, skipped pairs)."""
    nb = _neighbors(index, cfg)
    return backend.spfh_histograms(
        np.ascontiguousarray(cloud.points), np.ascontiguousarray(normals.normals),
        nb.indptr, nb.indices, cfg.bins)


def spfh(cloud: PointCloud, normals: UnitNormalField, index: NeighborhoodIndex, i: int,
         cfg: DescriptorConfig = DescriptorConfig()) -> np.ndarray:
    """SPFH of point ``i`` (all zeros when it has no valid pair)."""
    index._check_id(i)
    hist, _, _ = spfh_all(cloud, normals, index, cfg)
    return hist[i]


def fpfh(cloud: PointCloud, normals: UnitNormalField, index: NeighborhoodIndex,
         cfg: DescriptorConfig = DescriptorConfig()) -> DescriptorSet:
    """FPFH(p) = SPFH(p) + 1/k sum_k SPFH(p_k) / w_k, blocks renormalized.

    ``w_k`` is the distance from p to its neighbor, clamped below at
    ``cfg.weight_floor * diameter``.
    """
    hist, counts, skipped = spfh_all(cloud, normals, index, cfg)
    nb = _neighbors(index, cfg)
    floor = cfg.weight_floor * max(cloud.diameter(), np.finfo(float).tiny)
    out = backend.fpfh_aggregate(hist, nb.indptr, nb.indices, nb.distances, floor, cfg.bins)
    flags = ~np.any(out > 0, axis=1)
    return DescriptorSet(out, flags, cfg.bins, skipped_pairs=skipped)


def descriptor_scores(d: DescriptorSet) -> DescriptorSet:
    """L1 distance of each histogram to the sample's coordinate-wise median."""
    h = d.histograms
    ok = ~d.flags
    scores = np.zeros(len(h))
    if np.any(ok):
        med = np.median(h[ok], axis=0)
        scores[ok] = np.abs(h[ok] - med).sum(axis=1)
        scores[~ok] = scores[ok].max()
    return DescriptorSet(h, d.flags, d.bins, scores, d.skipped_pairs)


def threshold_scores(scores, rule: str = "mad", value: float = 3.0) -> np.ndarray:
    """Binary labels from scores.

    ``rule="mad"``: anomalous iff ``s > median + value * 1.4826 * MAD``.
    ``rule="quantile"``: anomalous iff ``s`` exceeds the ``value`` quantile.
    ``rule="value"``: anomalous iff ``s > value``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size and np.all(s == s[0]):
        return np.zeros(s.shape, dtype=np.int8)
    if rule == "mad":
        if s.size < 8:
            raise ValueError("the MAD rule needs at least 8 scores")
        med = np.median(s)
        mad = np.median(np.abs(s - med))
        cut = med + value * MAD_SCALE * mad
    elif rule == "quantile":
        if not 0 <= value <= 1:
            raise ValueError("quantile must be in [0, 1]")
        cut = np.quantile(s, value)
    elif rule == "value":
        cut = value
    else:
        raise ValueError(f"unknown threshold rule {rule!r}")
    return (s > cut).astype(np.int8)
