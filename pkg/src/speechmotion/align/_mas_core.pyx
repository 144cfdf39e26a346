# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dynamic-programming kernel for monotonic alignment search.

Same contract as ``_mas_numpy.mas_fill``; this version runs the O(T_t * T_f)
recursion in C speed, which matters because alignment runs on every training
step.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def mas_fill(double[:, ::1] ll, cnp.int64_t[::1] durations):
    """Fill ``durations`` with optimal frames-per-token counts; return the score.

    ``ll[i, j]`` is the log-likelihood of frame ``j`` under token ``i``. The
    recursion is Q[i, j] = ll[i, j] + max(Q[i, j-1], Q[i-1, j-1]); backtracking
    prefers staying on the current token when the two sources tie.
    """
    cdef Py_ssize_t n_tokens = ll.shape[0]
    cdef Py_ssize_t n_frames = ll.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] q_arr = np.full(
        (n_tokens, n_frames), -np.inf, dtype=np.float64
    )
    cdef double[:, ::1] q = q_arr
    cdef Py_ssize_t i, j, i_lo, i_hi
    cdef double stay, advance, score

    q[0, 0] = ll[0, 0]
    for j in range(1, n_frames):
        # Feasible band: token i needs i earlier frames, and the remaining
        # tokens must fit in the remaining frames.
        i_lo = n_tokens - (n_frames - j)
        if i_lo < 0:
            i_lo = 0
        i_hi = j if j < n_tokens - 1 else n_tokens - 1
        for i in range(i_lo, i_hi + 1):
            stay = q[i, j - 1]
            advance = q[i - 1, j - 1] if i > 0 else -np.inf
            q[i, j] = ll[i, j] + (stay if stay >= advance else advance)

    score = q[n_tokens - 1, n_frames - 1]

    for i in range(n_tokens):
        durations[i] = 0
    i = n_tokens - 1
    for j in range(n_frames - 1, 0, -1):
        durations[i] += 1
        if i > 0 and q[i - 1, j - 1] > q[i, j - 1]:
            i -= 1
    durations[0] += 1
    return score
