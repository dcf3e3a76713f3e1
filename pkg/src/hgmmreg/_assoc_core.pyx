# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-point tree descent for the adaptive E-step."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


cdef inline double _score(const double[:, ::1] pts, Py_ssize_t i,
                          const double[:, ::1] means, const double[:, :, ::1] white,
                          const double[::1] log_norm, Py_ssize_t k) noexcept nogil:
    cdef double d0 = pts[i, 0] - means[k, 0]
    cdef double d1 = pts[i, 1] - means[k, 1]
    cdef double d2 = pts[i, 2] - means[k, 2]
    cdef double q = 0.0
    cdef double y
    cdef int r
    for r in range(3):
        y = white[k, r, 0] * d0 + white[k, r, 1] * d1 + white[k, r, 2] * d2
        q += y * y
    return log_norm[k] - 0.5 * q


def descend(const double[:, ::1] pts,
            const double[:, ::1] means,
            const double[:, :, ::1] white,
            const double[::1] log_norm,
            const double[::1] complexity,
            const int[::1] first_child,
            const int[::1] n_children,
            int root_count,
            int max_level,
            double lambda_c,
            double log_floor):
    """Return ``(node, mass, evals)`` per point; ``node == -1`` marks an outlier."""
    cdef Py_ssize_t n = pts.shape[0]
    node_arr = np.empty(n, dtype=np.int64)
    mass_arr = np.empty(n, dtype=np.float64)
    eval_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] node_out = node_arr
    cdef double[::1] mass_out = mass_arr
    cdef long long[::1] eval_out = eval_arr
    cdef double scores[8]
    cdef Py_ssize_t i, k, first, count, best, level
    cdef double s, smax, total, mass
    cdef long long evals
    with nogil:
        for i in range(n):
            first = 0
            count = root_count
            mass = 1.0
            evals = 0
            best = -1
            for level in range(max_level):
                smax = -INFINITY
                best = first
                for k in range(count):
                    s = _score(pts, i, means, white, log_norm, first + k)
                    scores[k] = s
                    if s > smax:
                        smax = s
                        best = first + k
                evals += count
                if level == 0 and not (smax >= log_floor):
                    best = -1
                    break
                total = 0.0
                for k in range(count):
                    total += exp(scores[k] - smax)
                mass *= 1.0 / total
                if level + 1 >= max_level or n_children[best] == 0 or complexity[best] <= lambda_c:
                    break
                first = first_child[best]
                count = n_children[best]
            node_out[i] = best
            mass_out[i] = mass if best >= 0 else 0.0
            eval_out[i] = evals
    return node_arr, mass_arr, eval_arr
