# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: pair-feature histograms, FPFH weighting, mean-field sweeps."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, atan2, floor, fabs, exp, M_PI

cnp.import_array()

cdef double TIE_EPS = 1e-12
cdef double DEGENERATE_EPS = 1e-9


cdef inline Py_ssize_t _bin(double x, double lo, double scale, Py_ssize_t bins) nogil:
    cdef double b = floor((x - lo) * scale)
    if b < 0:
        return 0
    if b > bins - 1:
        return bins - 1
    return <Py_ssize_t>b


def spfh_histograms(const double[:, ::1] points, const double[:, ::1] normals,
                    const long long[::1] indptr, const long long[::1] indices, Py_ssize_t bins):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    hist_arr = np.zeros((n, 3 * bins), dtype=np.float64)
    counts_arr = np.zeros(n, dtype=np.int64)
    cdef double[:, ::1] hist = hist_arr
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t i, e, j, a, b, s, t, q
    cdef long long skipped = 0
    cdef double dx, dy, dz, dist, ca, cb, ux, uy, uz, vx, vy, vz, nv, wx, wy, wz
    cdef double ntx, nty, ntz, alpha, phi, theta
    cdef double half = bins / 2.0
    cdef double tscale = bins / (2.0 * M_PI)
    with nogil:
        for i in range(n):
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                if i < j:
                    a = i
                    b = j
                else:
                    a = j
                    b = i
                dx = points[b, 0] - points[a, 0]
                dy = points[b, 1] - points[a, 1]
                dz = points[b, 2] - points[a, 2]
                dist = sqrt(dx * dx + dy * dy + dz * dz)
                if dist <= 0:
                    skipped += 1
                    continue
                dx = dx / dist
                dy = dy / dist
                dz = dz / dist
                ca = fabs(normals[a, 0] * dx + normals[a, 1] * dy + normals[a, 2] * dz)
                cb = fabs(normals[b, 0] * dx + normals[b, 1] * dy + normals[b, 2] * dz)
                if cb > ca + TIE_EPS:
                    s = b
                    t = a
                    dx = -dx
                    dy = -dy
                    dz = -dz
                else:
                    s = a
                    t = b
                ux = normals[s, 0]
                uy = normals[s, 1]
                uz = normals[s, 2]
                # v = d x u
                vx = dy * uz - dz * uy
                vy = dz * ux - dx * uz
                vz = dx * uy - dy * ux
                nv = sqrt(vx * vx + vy * vy + vz * vz)
                if nv < DEGENERATE_EPS:
                    skipped += 1
                    continue
                vx = vx / nv
                vy = vy / nv
                vz = vz / nv
                # w = u x v
                wx = uy * vz - uz * vy
                wy = uz * vx - ux * vz
                wz = ux * vy - uy * vx
                ntx = normals[t, 0]
                nty = normals[t, 1]
                ntz = normals[t, 2]
                alpha = vx * ntx + vy * nty + vz * ntz
                phi = ux * dx + uy * dy + uz * dz
                theta = atan2(wx * ntx + wy * nty + wz * ntz, ux * ntx + uy * nty + uz * ntz)
                if theta == -M_PI:
                    theta = M_PI
                hist[i, _bin(alpha, -1.0, half, bins)] += 1.0
                hist[i, bins + _bin(phi, -1.0, half, bins)] += 1.0
                hist[i, 2 * bins + _bin(theta, -M_PI, tscale, bins)] += 1.0
                counts[i] += 1
        for i in range(n):
            if counts[i] > 0:
                for q in range(3 * bins):
                    hist[i, q] = hist[i, q] / counts[i]
    return hist_arr, counts_arr, int(skipped)


def fpfh_aggregate(const double[:, ::1] spfh, const long long[::1] indptr,
                   const long long[::1] indices, const double[::1] distances,
                   double floor_, Py_ssize_t bins):
    cdef Py_ssize_t n = spfh.shape[0]
    cdef Py_ssize_t m = spfh.shape[1]
    out_arr = np.zeros((n, m), dtype=np.float64)
    acc_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] acc = acc_arr
    cdef Py_ssize_t i, e, j, q, blk
    cdef double w, s, kinv, d
    with nogil:
        for i in range(n):
            for q in range(m):
                acc[q] = 0.0
            kinv = 1.0 / (indptr[i + 1] - indptr[i]) if indptr[i + 1] > indptr[i] else 1.0
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                d = distances[e]
                if d < floor_:
                    d = floor_
                w = (1.0 / d) * kinv
                for q in range(m):
                    acc[q] += w * spfh[j, q]
            for q in range(m):
                out[i, q] = spfh[i, q] + acc[q]
            for blk in range(3):
                s = 0.0
                for q in range(blk * bins, (blk + 1) * bins):
                    s += out[i, q]
                if s > 0:
                    for q in range(blk * bins, (blk + 1) * bins):
                        out[i, q] = out[i, q] / s
    return out_arr


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def mean_field_sweep(double[::1] gamma, const double[::1] base, const long long[::1] indptr,
                     const long long[::1] other, const double[::1] delta,
                     const long long[::1] order, const long long[::1] color_ptr):
    """Sequential coordinate-ascent sweep over ``order`` (in place)."""
    cdef Py_ssize_t p, i, e
    cdef double acc, new, change, max_change = 0.0
    with nogil:
        for p in range(order.shape[0]):
            i = order[p]
            acc = 0.0
            for e in range(indptr[i], indptr[i + 1]):
                acc += (1.0 - gamma[other[e]]) * delta[e]
            new = _sigmoid(base[i] + acc)
            change = fabs(new - gamma[i])
            if change > max_change:
                max_change = change
            gamma[i] = new
    return max_change
