# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled max-margin search kernel.

Must stay arithmetically identical to ``_fallback.search_clips``: element
similarities are summed left to right in float64 and divided by the
combination size before any comparison.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double NEG_INF = -np.inf


cdef inline double _mean(const double[:, :, ::1] arr, const int[:, ::1] elems,
                         Py_ssize_t c, int m, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double acc = arr[i, elems[c, 0], j]
    cdef int q
    for q in range(1, m):
        acc = acc + arr[i, elems[c, q], j]
    return acc / <double>m


def search_clips(const double[:, :, ::1] rows, const double[:, :, ::1] cols,
                 const int[:, ::1] elems, const int[::1] sizes, const long[::1] clips):
    """For each clip in ``clips`` return the index of the max-margin
    combination (first in table order on ties), its margin, and the number
    of combinations evaluated.

    rows[i, e, j] = s(i, j, e); cols[i, e, j] = s(j, i, e).
    """
    cdef Py_ssize_t n = rows.shape[2]
    cdef Py_ssize_t n_combo = elems.shape[0]
    cdef Py_ssize_t n_out = clips.shape[0]
    best_idx_arr = np.full(n_out, -1, dtype=np.int64)
    best_margin_arr = np.full(n_out, NEG_INF, dtype=np.float64)
    cdef long long[::1] best_idx = best_idx_arr
    cdef double[::1] best_margin = best_margin_arr
    cdef Py_ssize_t q, c, j, jj, i, killer
    cdef int m
    cdef double s, a, comp, best
    cdef bint pruned
    cdef long long evals = 0

    with nogil:
        for q in range(n_out):
            i = clips[q]
            best = NEG_INF
            killer = 1 if i == 0 else 0
            for c in range(n_combo):
                m = sizes[c]
                evals += 1
                s = _mean(rows, elems, c, m, i, i)
                comp = NEG_INF
                pruned = False
                # the competitor that last disqualified a combination is tried first
                for jj in range(-1, n):
                    if jj == -1:
                        j = killer
                    elif jj == killer:
                        continue
                    else:
                        j = jj
                    if j == i:
                        continue
                    a = _mean(rows, elems, c, m, i, j)
                    if s - a <= best:
                        pruned = True
                        killer = j
                        break
                    if a > comp:
                        comp = a
                    a = _mean(cols, elems, c, m, i, j)
                    if s - a <= best:
                        pruned = True
                        killer = j
                        break
                    if a > comp:
                        comp = a
                if not pruned:
                    best = s - comp
                    best_idx[q] = c
            best_margin[q] = best
    return best_idx_arr, best_margin_arr, evals
