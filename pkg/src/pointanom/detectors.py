"""End-to-end single-sample detectors built from the library operations.

``fpfh``    FPFH descriptors, median-deviation scores, robust threshold.
``sgrade``  sparse decomposition with the graph smoothness loss.
``lvi``     latent point types with mean-field variational EM.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import decomposition as dec
from . import descriptors as desc
from . import latent
from .config import RunConfig
from .geometry import PointCloud, build_index, estimate_normals, plane_residuals

DEFAULT_K = {"fpfh": 16, "sgrade": 8, "lvi": 8}


@dataclass
class Detection:
    labels: np.ndarray
    scores: np.ndarray
    timings: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)


class _Timer:
    def __init__(self):
        self.t = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        yield
        self.t[name + "_seconds"] = time.perf_counter() - t0


def _k(cfg: RunConfig) -> int:
    return cfg.k if cfg.k is not None else DEFAULT_K[cfg.method]


def _normals(cloud, cfg, timer):
    with timer("normals"):
        idx = build_index(cloud, k=cfg.normal_k, r=cfg.radius)
        return estimate_normals(cloud, idx, viewpoint=cfg.viewpoint, orient=cfg.orient)


def detect_fpfh(cloud: PointCloud, cfg: RunConfig) -> Detection:
    timer = _Timer()
    normals = _normals(cloud, cfg, timer)
    with timer("descriptor"):
        idx = build_index(cloud, k=_k(cfg), r=cfg.radius)
        dcfg = desc.DescriptorConfig(bins=cfg.bins, k=_k(cfg))
        d = desc.descriptor_scores(desc.fpfh(cloud, normals, idx, dcfg))
    with timer("threshold"):
        labels = desc.threshold_scores(d.scores, cfg.threshold_rule, cfg.threshold_value)
    info = {"flagged_histograms": int(d.flags.sum()), "skipped_pairs": d.skipped_pairs,
            "degenerate_normals": int(normals.degenerate.sum())}
    return Detection(labels, d.scores, timer.t, info)


def detect_sgrade(cloud: PointCloud, cfg: RunConfig) -> Detection:
    timer = _Timer()
    dcfg = dec.DecompositionConfig(lam=cfg.lam, lam_ratio=cfg.lam_ratio, eps=cfg.eps, k=_k(cfg),
                                   max_outer=cfg.max_outer, max_inner=cfg.max_inner,
                                   tol=cfg.tol, delta=cfg.delta)
    with timer("operator"):
        idx = build_index(cloud, k=dcfg.k, r=cfg.radius)
        H = dec.build_smoothness_operator(cloud, idx, dcfg.k)
    with timer("solve"):
        if cfg.max_fraction is not None and cfg.lam is None:
            _, res = dec.bisect_lambda(cloud, H, cfg.max_fraction, dcfg)
        else:
            res = dec.solve_decomposition(cloud, H, dcfg)
    labels = dec.labels_from_rows(res)
    info = {"lambda": res.lam, "lambda_max": res.lam_max, "eps": res.eps, "delta": res.delta,
            "outer_iterations": res.outer_iterations, "objective": res.objective,
            "boundary_rows": int((~H.active).sum())}
    return Detection(labels, res.row_norms, timer.t, info)


def detect_lvi(cloud: PointCloud, cfg: RunConfig) -> Detection:
    timer = _Timer()
    normals = _normals(cloud, cfg, timer)
    with timer("graph"):
        idx = build_index(cloud, k=_k(cfg), r=cfg.radius)
        nb = idx.neighborhoods()
        r = plane_residuals(cloud, idx)
        K = latent.structure_tensors(normals, nb)
        graph = latent.SmoothnessGraph.from_tensors(K, nb)
    with timer("em"):
        init = latent.LviParams.initial(r, graph, pi=cfg.pi,
                                        floor=1e-12 * max(cloud.diameter(), 1e-300))
        init = latent.LviParams(
            cfg.sigma0 or init.sigma0, cfg.sigma1 or (5.0 * (cfg.sigma0 or init.sigma0)),
            cfg.beta_s or init.beta_s, cfg.beta_d or (cfg.beta_s or init.beta_s) / 5.0, cfg.pi)
        ecfg = latent.EMConfig(max_iter=cfg.em_max_iter, update_pi=cfg.update_pi,
                               sigma_floor=1e-12 * cloud.diameter())
        post, params = latent.mean_field_em(r, graph, init, ecfg)
    labels = latent.map_labels(post)
    info = {"bound": post.bound, "flags": sorted(post.flags), "em_iterations": post.iterations,
            "params": params.__dict__}
    return Detection(labels, post.gamma, timer.t, info)


DETECTORS = {"fpfh": detect_fpfh, "sgrade": detect_sgrade, "lvi": detect_lvi}


def detect(cloud: PointCloud, cfg: RunConfig) -> Detection:
    cfg.validate()
    return DETECTORS[cfg.method](cloud, cfg)
