"""Pointwise detection metrics and the method x cloud benchmark harness.

"Positive" means a point detected as anomalous.  Degenerate denominators
(a class absent from the ground truth) follow fixed conventions:

* FOR = FN / (FN + TN) and FPR = FP / (FP + TN) are 0 when 0/0.
* In BA, a recall term whose class is absent counts as 1.
* DICE = 2TP / (2TP + FP + FN) is 1 when there is nothing to find and
  nothing was flagged.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

# Published reference values for the untrained methods on MVTec3D (~3000 points).
PUBLISHED_REFERENCE = {
    "note": "published reference, not reproduced here",
    "detection": {
        "PointSGRADE": {"FOR": 0.4208, "FPR": 0.0004, "BA": 0.7893, "DICE": 0.7212},
        "FPFH": {"FOR": 0.1463, "FPR": 0.0293, "BA": 0.9122, "DICE": 0.4217},
    },
    "efficiency": {
        "PointSGRADE": {"points": 3114, "inference_s": 3.96, "total_s": 3.96},
        "FPFH": {"points": 3114, "inference_s": 0.626, "total_s": 0.626},
    },
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    FOR: float
    FPR: float
    BA: float
    DICE: float
    method: str = ""
    n_points: int = 0
    timings: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def _labels(x, name) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != 1:
        raise ValueError(f"{name} must be a 1D label vector")
    if a.size and not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must contain only 0/1")
    return a.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _labels(pred, "pred"), _labels(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    return ConfusionCounts(int(np.sum(p & t)), int(np.sum(~p & ~t)),
                           int(np.sum(p & ~t)), int(np.sum(~p & t)))


def _ratio(num, den, empty):
    return num / den if den else empty


def metrics(c: ConfusionCounts, method: str = "", timings: dict | None = None) -> MetricsReport:
    tpr = _ratio(c.tp, c.tp + c.fn, 1.0)
    tnr = _ratio(c.tn, c.tn + c.fp, 1.0)
    return MetricsReport(
        FOR=_ratio(c.fn, c.fn + c.tn, 0.0),
        FPR=_ratio(c.fp, c.fp + c.tn, 0.0),
        BA=0.5 * (tpr + tnr),
        DICE=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 1.0),
        method=method,
        n_points=c.n,
        timings=dict(timings or {}),
    )


@dataclass
class Method:
    """A named detector: ``run(cloud) -> (labels, timings dict)``."""

    name: str
    run: Callable
    config: dict = field(default_factory=dict)


METRIC_KEYS = ("FOR", "FPR", "BA", "DICE")


def benchmark(methods: Sequence[Method], dataset: Sequence[tuple], pooled: bool = False) -> dict:
    """Run every method on every ``(name, cloud, truth)`` item.

    Aggregates are unweighted means over clouds, or metrics of the summed
    confusion counts with ``pooled=True``.  A method raising on a cloud is
    recorded as a failed row and the run continues.
    """
    if not methods:
        raise ValueError("need at least one method")
    if not dataset:
        raise ValueError("need at least one labeled cloud")
    rows = []
    aggregates = {}
    for m in methods:
        per_cloud, counts = [], []
        for name, cloud, truth in dataset:
            row = {"method": m.name, "cloud": name, "n_points": len(truth)}
            t0 = time.perf_counter()
            try:
                labels, timings = m.run(cloud)
                c = confusion(labels, truth)
            except Exception as exc:  # recorded, run continues
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                row["timing"] = {"wall_seconds": time.perf_counter() - t0}
                rows.append(row)
                continue
            rep = metrics(c, m.name)
            row.update(status="ok", confusion=asdict(c),
                       metrics={k: getattr(rep, k) for k in METRIC_KEYS},
                       n_predicted=int(np.sum(labels)))
            row["timing"] = {"wall_seconds": time.perf_counter() - t0, **timings}
            rows.append(row)
            per_cloud.append(rep)
            counts.append(c)
        if per_cloud:
            if pooled:
                total = counts[0]
                for c in counts[1:]:
                    total = total + c
                rep = metrics(total, m.name)
                agg = {k: getattr(rep, k) for k in METRIC_KEYS}
            else:
                agg = {k: float(np.mean([getattr(r, k) for r in per_cloud])) for k in METRIC_KEYS}
        else:
            agg = {}
        aggregates[m.name] = {"clouds_ok": len(per_cloud), "clouds_failed": len(dataset) - len(per_cloud),
                              "mode": "pooled" if pooled else "mean", "metrics": agg}
    return {
        "methods": [{"name": m.name, "config": m.config} for m in methods],
        "clouds": [name for name, _, _ in dataset],
        "rows": rows,
        "aggregates": aggregates,
        "published_reference": PUBLISHED_REFERENCE,
    }


def strip_timing(report):
    """Copy of a report without any ``timing`` entries (for determinism checks)."""
    if isinstance(report, dict):
        return {k: strip_timing(v) for k, v in report.items() if k != "timing"}
    if isinstance(report, list):
        return [strip_timing(v) for v in report]
    return report
