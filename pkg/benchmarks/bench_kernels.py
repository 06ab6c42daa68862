"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 55] [--repeat 5]

Inputs come from a synthetic plane with defects; both backends receive the
same arrays and their outputs are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from pointanom._kernels import cimpl, pyimpl
from pointanom.geometry import build_index, estimate_normals, plane_residuals
from pointanom.latent import LviParams, SmoothnessGraph, _EStep, structure_tensors
from pointanom.synth import SynthSpec, make_sample, random_defects


def inputs(n):
    cloud, _ = make_sample(SynthSpec(n=n, noise=0.005, seed=0,
                                     defects=random_defects(n, 1.0, 3, 0, 3.0, 1.5)))
    idx = build_index(cloud, k=16)
    nb = idx.neighborhoods()
    nrm = estimate_normals(cloud, build_index(cloud, k=10))
    pts, nn = np.ascontiguousarray(cloud.points), np.ascontiguousarray(nrm.normals)
    spfh, _, _ = pyimpl.spfh_histograms(pts, nn, nb.indptr, nb.indices, 11)

    idx8 = build_index(cloud, k=8)
    nb8 = idx8.neighborhoods()
    graph = SmoothnessGraph.from_tensors(structure_tensors(nrm, nb8), nb8)
    r = plane_residuals(cloud, idx8)
    p = LviParams.initial(r, graph)
    es = _EStep(graph)
    delta = np.log(p.beta_d / p.beta_s) + (p.beta_s - p.beta_d) * graph.d
    indptr, other, vals = graph.incidence(delta)
    base = np.log(p.pi / (1 - p.pi)) + np.log(p.sigma0 / p.sigma1) + r * r * (
        0.5 / p.sigma0 ** 2 - 0.5 / p.sigma1 ** 2)
    return {
        "spfh_histograms": lambda m: m.spfh_histograms(pts, nn, nb.indptr, nb.indices, 11),
        "fpfh_aggregate": lambda m: m.fpfh_aggregate(spfh, nb.indptr, nb.indices, nb.distances, 1e-12, 11),
        "mean_field_sweep": lambda m: m.mean_field_sweep(np.full(len(r), 0.05), base, indptr, other,
                                                         vals, es.order, es.color_ptr),
    }, len(cloud)


def first(x):
    return x[0] if isinstance(x, tuple) else x


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=55, help="grid side (n*n points)")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if cimpl is None:
        raise SystemExit("compiled extension not built; run `python setup.py build_ext --inplace`")
    kernels, n_points = inputs(args.n)
    print(f"{n_points} points, best of {args.repeat}")
    print(f"{'kernel':<18} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, call in kernels.items():
        a, b = first(call(pyimpl)), first(call(cimpl))
        if not np.allclose(a, b, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        tp = min(timeit.repeat(lambda: call(pyimpl), number=1, repeat=args.repeat))
        tc = min(timeit.repeat(lambda: call(cimpl), number=1, repeat=args.repeat))
        print(f"{name:<18} {1e3 * tp:>10.2f} {1e3 * tc:>10.2f} {tp / tc:>7.1f}x")


if __name__ == "__main__":
    main()
