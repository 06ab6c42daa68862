"""Deterministic synthetic surfaces with implanted bump/dent defects.

Surfaces are sampled on an ``n x n`` grid of parameter coordinates
``(u, v)`` centred on the origin.  Defect centres are given in the same
``(u, v)`` coordinates, and every displacement (noise and defects) acts
along the analytic surface normal at the grid sample.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import PointCloud

SURFACES = ("plane", "sphere_cap", "quadratic")


@dataclass(frozen=True)
class Defect:
    center: tuple[float, float]
    height: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("defect width must be > 0")
        if self.height == 0:
            raise ValueError("defect height must be non-zero")


@dataclass(frozen=True)
class SynthSpec:
    surface: str = "plane"
    n: int = 30
    spacing: float = 1.0
    noise: float = 0.0
    defects: tuple[Defect, ...] = field(default_factory=tuple)
    seed: int = 0
    radius: float | None = None       # sphere_cap; default 4 half-extents
    curvature: tuple[float, float] = (0.02, -0.01)   # quadratic, in 1/spacing

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise ValueError(f"surface must be one of {SURFACES}")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not self.spacing > 0:
            raise ValueError("spacing must be > 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "defects", tuple(
            d if isinstance(d, Defect) else Defect(**d) for d in self.defects))
        if self.surface == "sphere_cap" and self.sphere_radius() <= self.half_extent() * np.sqrt(2):
            raise ValueError("sphere radius too small for the grid extent")

    def half_extent(self) -> float:
        return 0.5 * (self.n - 1) * self.spacing

    def sphere_radius(self) -> float:
        return self.radius if self.radius is not None else 4.0 * self.half_extent()

    def to_dict(self) -> dict:
        return asdict(self)


def _grid(spec: SynthSpec):
    ax = (np.arange(spec.n) - 0.5 * (spec.n - 1)) * spec.spacing
    u, v = np.meshgrid(ax, ax, indexing="ij")
    return u.ravel(), v.ravel()


def base_surface(spec: SynthSpec):
    """Noise-free grid samples and their unit normals."""
    u, v = _grid(spec)
    if spec.surface == "plane":
        pts = np.column_stack([u, v, np.zeros_like(u)])
        nrm = np.tile([0.0, 0.0, 1.0], (len(u), 1))
    elif spec.surface == "sphere_cap":
        R = spec.sphere_radius()
        pts = np.column_stack([u, v, np.sqrt(R * R - u * u - v * v)])
        nrm = pts / R
    else:
        k1, k2 = (c / spec.spacing for c in spec.curvature)
        pts = np.column_stack([u, v, 0.5 * (k1 * u * u + k2 * v * v)])
        nrm = np.column_stack([-k1 * u, -k2 * v, np.ones_like(u)])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


def gen_surface(spec: SynthSpec) -> PointCloud:
    """Grid-sampled surface with Gaussian noise along the normal."""
    pts, nrm = base_surface(spec)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        pts = pts + rng.normal(0.0, spec.noise, len(pts))[:, None] * nrm
    return PointCloud(pts)


def defect_displacement(spec: SynthSpec) -> np.ndarray:
    """Signed displacement along the normal imposed by all defects."""
    u, v = _grid(spec)
    disp = np.zeros(len(u))
    for d in spec.defects:
        r2 = (u - d.center[0]) ** 2 + (v - d.center[1]) ** 2
        disp += d.height * np.exp(-r2 / (2.0 * d.width ** 2))
    return disp


def label_threshold(spec: SynthSpec) -> float:
    hmax = max((abs(d.height) for d in spec.defects), default=0.0)
    return max(3.0 * spec.noise, 0.05 * hmax)


def implant_defects(cloud: PointCloud, spec: SynthSpec) -> tuple[PointCloud, np.ndarray]:
    """Displace points by the defect envelopes and return ground truth.

    A point is anomalous iff its imposed displacement exceeds
    ``max(3 * noise, 0.05 * max|h|)``.
    """
    _, nrm = base_surface(spec)
    if len(cloud) != len(nrm):
        raise ValueError("cloud does not match the SynthSpec grid")
    if not spec.defects:
        return PointCloud(cloud.points, np.zeros(len(cloud), np.int8)), np.zeros(len(cloud), np.int8)
    disp = defect_displacement(spec)
    labels = (np.abs(disp) > label_threshold(spec)).astype(np.int8)
    out = PointCloud(cloud.points + disp[:, None] * nrm, labels)
    return out, labels


def random_defects(n: int, spacing: float, count: int, seed: int,
                   height: float = 2.0, width: float = 1.0) -> tuple[Defect, ...]:
    """``count`` well-separated defects inside an n x n grid.

    ``height`` and ``width`` are in units of ``spacing``; signs alternate
    randomly between bumps and dents.  Centres keep 3 widths from the edge
    and 6 widths from each other when the grid allows it.
    """
    rng = np.random.default_rng([seed, 0xDEF])
    half = 0.5 * (n - 1) * spacing
    w = width * spacing
    margin = min(3.0 * w, 0.4 * half)
    lo, hi = -half + margin, half - margin
    centers: list[np.ndarray] = []
    min_sep = 6.0 * w
    for _ in range(count):
        for attempt in range(1000):
            c = rng.uniform(lo, hi, 2)
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                break
            if attempt % 100 == 99:
                min_sep *= 0.8
        centers.append(c)
    signs = rng.choice([-1.0, 1.0], count)
    return tuple(Defect((float(c[0]), float(c[1])), float(s * height * spacing), float(w))
                 for c, s in zip(centers, signs))


def make_sample(spec: SynthSpec) -> tuple[PointCloud, np.ndarray]:
    """gen_surface followed by implant_defects."""
    return implant_defects(gen_surface(spec), spec)
