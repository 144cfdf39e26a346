"""Monotonic alignment search between token-level Gaussian priors and frames.

``mas`` runs on a compiled Cython kernel when the extension was built,
otherwise on a numpy fallback with identical semantics. ``BACKEND`` reports
which one was selected at import; ``benchmarks/mas_benchmark.py`` compares
the two.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import InfeasibleAlignmentError, InvalidInputError

try:
    from . import _mas_core as _kernel

    BACKEND = "cython"
except ImportError:  # extension not built; numpy fallback
    from . import _mas_numpy as _kernel

    BACKEND = "python"

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Alignment:
    """Monotonic token-to-frame assignment as frames-per-token counts."""

    durations: np.ndarray  # int64, every entry >= 1

    @property
    def n_frames(self) -> int:
        return int(self.durations.sum())

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if self.durations.ndim != 1 or self.durations.size == 0:
            raise InvalidInputError("durations must be a non-empty 1-D array")
        if (self.durations < 1).any():
            raise InvalidInputError("every token must cover at least one frame")


def loglik_matrix(means: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Log density of each frame under a unit-variance Gaussian at each mean.

    Args:
        means: (T_t, D) predicted average vectors, one per token.
        frames: (T_f, D) observed feature frames.

    Returns:
        (T_t, T_f) matrix with entry (i, j) = log N(frames[j]; means[i], I).
    """
    means = np.asarray(means, dtype=np.float64)
    frames = np.asarray(frames, dtype=np.float64)
    if means.ndim != 2 or frames.ndim != 2 or means.shape[1] != frames.shape[1]:
        raise InvalidInputError(
            f"dimension mismatch: means {means.shape} vs frames {frames.shape}"
        )
    dim = means.shape[1]
    sq = (
        np.sum(means**2, axis=1)[:, None]
        - 2.0 * means @ frames.T
        + np.sum(frames**2, axis=1)[None, :]
    )
    return -0.5 * sq - 0.5 * dim * _LOG_2PI


def mas(ll: np.ndarray) -> Alignment:
    """Find the highest-scoring monotonic surjective alignment.

    Dynamic program Q[i, j] = ll[i, j] + max(Q[i, j-1], Q[i-1, j-1]) with
    backtracking; ties prefer Q[i, j-1] (stay on the current token), which
    makes the result a deterministic function of ``ll``.
    """
    ll = np.ascontiguousarray(ll, dtype=np.float64)
    if ll.ndim != 2:
        raise InvalidInputError("log-likelihood matrix must be 2-D")
    n_tokens, n_frames = ll.shape
    if n_tokens == 0 or n_frames == 0:
        raise InvalidInputError("empty log-likelihood matrix")
    if n_tokens > n_frames:
        raise InfeasibleAlignmentError(
            f"cannot align {n_tokens} tokens onto {n_frames} frames"
        )
    if not np.isfinite(ll).all():
        raise InvalidInputError("log-likelihood matrix contains non-finite values")
    durations = np.zeros(n_tokens, dtype=np.int64)
    _kernel.mas_fill(ll, durations)
    return Alignment(durations)


def alignment_score(ll: np.ndarray, durations: np.ndarray) -> float:
    """Accumulate ll along an alignment path in frame order (matches the DP)."""
    score = 0.0
    j = 0
    for i, d in enumerate(np.asarray(durations)):
        for _ in range(int(d)):
            score = score + float(ll[i, j])
            j += 1
    return score


def expand_durations(durations) -> np.ndarray:
    """Token index owning each frame: [2, 1] -> [0, 0, 1]."""
    durations = np.asarray(durations, dtype=np.int64)
    return np.repeat(np.arange(durations.shape[0]), durations)


def prior_loss(
    alignment: Alignment, means: torch.Tensor, frames: torch.Tensor
) -> torch.Tensor:
    """Mean negative aligned log-likelihood over frames; differentiable in means."""
    if means.ndim != 2 or frames.ndim != 2 or means.shape[1] != frames.shape[1]:
        raise InvalidInputError("means and frames must be 2-D with equal feature dims")
    if alignment.durations.shape[0] != means.shape[0]:
        raise InvalidInputError("alignment token count does not match means")
    if alignment.n_frames != frames.shape[0]:
        raise InvalidInputError("alignment frame count does not match frames")
    frame_tokens = torch.from_numpy(expand_durations(alignment.durations))
    aligned_means = means[frame_tokens]
    dim = means.shape[1]
    sq = ((frames - aligned_means) ** 2).sum(dim=1)
    neg_ll = 0.5 * sq + 0.5 * dim * _LOG_2PI
    return neg_ll.mean()
