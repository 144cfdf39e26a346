"""Pure-numpy fallback for the monotonic alignment search kernel.

The recursion is vectorized across tokens per frame column; the -inf
initialisation keeps infeasible cells (token index above the frame index)
out of every maximum, so no explicit band bookkeeping is needed.
"""

import numpy as np


def mas_fill(ll: np.ndarray, durations: np.ndarray) -> float:
    """Fill ``durations`` with optimal frames-per-token counts; return the score.

    Identical semantics to the compiled kernel: Q[i, j] = ll[i, j] +
    max(Q[i, j-1], Q[i-1, j-1]), ties broken toward staying on the token.
    """
    n_tokens, n_frames = ll.shape
    q = np.full((n_tokens, n_frames), -np.inf)
    q[0, 0] = ll[0, 0]
    diag = np.empty(n_tokens)
    for j in range(1, n_frames):
        prev = q[:, j - 1]
        diag[0] = -np.inf
        diag[1:] = prev[:-1]
        q[:, j] = ll[:, j] + np.maximum(prev, diag)

    durations[:] = 0
    i = n_tokens - 1
    for j in range(n_frames - 1, 0, -1):
        durations[i] += 1
        if i > 0 and q[i - 1, j - 1] > q[i, j - 1]:
            i -= 1
    durations[0] += 1
    return float(q[n_tokens - 1, n_frames - 1])
