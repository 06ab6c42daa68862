"""Vectorized numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_cimpl`` module; used when
the extension is not built or ``POINTANOM_PURE_PYTHON=1``.
"""
import numpy as np

TIE_EPS = 1e-12
DEGENERATE_EPS = 1e-9


def pair_feature_arrays(ps, ns, pt, nt):
    """Darboux-frame (alpha, phi, theta) for source/target arrays.

    Returns the three feature arrays and a boolean mask of valid pairs.
    Source selection must already have been applied.
    """
    d = pt - ps
    dist = np.sqrt(np.einsum("ij,ij->i", d, d))
    ok = dist > 0
    dn = d / np.where(ok, dist, 1.0)[:, None]
    v = np.cross(dn, ns)
    nv = np.sqrt(np.einsum("ij,ij->i", v, v))
    ok &= nv >= DEGENERATE_EPS
    v = v / np.where(ok, nv, 1.0)[:, None]
    w = np.cross(ns, v)
    alpha = np.einsum("ij,ij->i", v, nt)
    phi = np.einsum("ij,ij->i", ns, dn)
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", ns, nt))
    theta = np.where(theta == -np.pi, np.pi, theta)
    return alpha, phi, theta, ok


def select_source(points, normals, a, b):
    """Order each pair so the first point has the smaller normal/line angle.

    ``a`` must hold the lower point index of each pair; near-ties stay with it.
    """
    d = points[b] - points[a]
    dist = np.sqrt(np.einsum("ij,ij->i", d, d))
    dn = d / np.where(dist > 0, dist, 1.0)[:, None]
    ca = np.abs(np.einsum("ij,ij->i", normals[a], dn))
    cb = np.abs(np.einsum("ij,ij->i", normals[b], dn))
    swap = cb > ca + TIE_EPS
    src = np.where(swap, b, a)
    tgt = np.where(swap, a, b)
    return src, tgt


def feature_bins(alpha, phi, theta, bins):
    ba = np.clip(np.floor((alpha + 1.0) * (bins / 2.0)), 0, bins - 1).astype(np.int64)
    bp = np.clip(np.floor((phi + 1.0) * (bins / 2.0)), 0, bins - 1).astype(np.int64)
    bt = np.clip(np.floor((theta + np.pi) * (bins / (2.0 * np.pi))), 0, bins - 1).astype(np.int64)
    return ba, bp, bt


def spfh_histograms(points, normals, indptr, indices, bins):
    n = len(indptr) - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    cols = np.asarray(indices, dtype=np.int64)
    a = np.minimum(rows, cols)
    b = np.maximum(rows, cols)
    src, tgt = select_source(points, normals, a, b)
    alpha, phi, theta, ok = pair_feature_arrays(points[src], normals[src], points[tgt], normals[tgt])
    ba, bp, bt = feature_bins(alpha, phi, theta, bins)
    r = rows[ok]
    hist = np.zeros((n, 3 * bins))
    flat = hist.reshape(-1)
    stride = 3 * bins
    for off, bb in ((0, ba), (bins, bp), (2 * bins, bt)):
        flat += np.bincount(r * stride + off + bb[ok], minlength=n * stride)
    counts = np.bincount(r, minlength=n).astype(np.int64)
    hist /= np.maximum(counts, 1)[:, None]
    return hist, counts, int((~ok).sum())


def _renormalize_blocks(h, bins):
    blocks = h.reshape(len(h), 3, bins)
    s = blocks.sum(axis=2, keepdims=True)
    np.divide(blocks, s, out=blocks, where=s > 0)
    return blocks.reshape(len(h), 3 * bins)


def fpfh_aggregate(spfh, indptr, indices, distances, floor, bins):
    n = len(indptr) - 1
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n), counts)
    wts = 1.0 / np.maximum(distances, floor)
    wts = wts / np.maximum(counts, 1)[rows]
    acc = np.zeros_like(spfh)
    np.add.at(acc, rows, wts[:, None] * spfh[indices])
    out = spfh + acc
    return _renormalize_blocks(out, bins)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def mean_field_sweep(gamma, base, indptr, other, delta, order, color_ptr):
    """One coordinate-ascent sweep, one color class at a time (in place).

    Nodes inside a color class share no edges, so updating a class at once
    gives exactly the sequential result in ``order``.
    """
    max_change = 0.0
    for c in range(len(color_ptr) - 1):
        nodes = order[color_ptr[c]:color_ptr[c + 1]]
        starts = indptr[nodes]
        lens = indptr[nodes + 1] - starts
        idx = np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
        contrib = (1.0 - gamma[other[idx]]) * delta[idx]
        seg = np.repeat(np.arange(len(nodes)), lens)
        logit = base[nodes] + np.bincount(seg, weights=contrib, minlength=len(nodes))
        new = _sigmoid(logit)
        if len(nodes):
            max_change = max(max_change, float(np.max(np.abs(new - gamma[nodes]))))
        gamma[nodes] = new
    return max_change
