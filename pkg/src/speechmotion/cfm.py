"""Optimal-transport conditional flow matching: targets, loss, Euler sampling.

The same machinery drives both the wide joint decoder and the per-token
duration predictor; dimensionality comes from the tensors, not the code.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .errors import InvalidInputError, NumericalFailureError

DEFAULT_SIGMA_MIN = 1e-4


@dataclass
class ODESolverConfig:
    """Forward-Euler settings: nfe steps from t=0 to t=1."""

    nfe: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 1:
            raise InvalidInputError("nfe must be >= 1")


@dataclass
class FlowSample:
    """One training draw on the straight conditional path from noise to data.

    Satisfies x_t = t*x1 + (1 - (1 - sigma_min)*t)*x0 and
    u_t = x1 - (1 - sigma_min)*x0 exactly.
    """

    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    u_t: torch.Tensor


def make_flow_sample(
    x1: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    t=None,
    sigma_min: float = DEFAULT_SIGMA_MIN,
) -> FlowSample:
    """Draw noise and build the interpolated point and target vector field.

    ``t`` may be a scalar in [0, 1] or a broadcastable tensor; when omitted it
    is drawn uniformly, one value per leading-dimension slice of ``x1``.
    """
    if not 0.0 <= sigma_min < 1.0:
        raise InvalidInputError("sigma_min must lie in [0, 1)")
    if t is None:
        shape = (x1.shape[0],) + (1,) * (x1.ndim - 1)
        t = torch.rand(shape, generator=generator, dtype=x1.dtype, device=x1.device)
    else:
        t = torch.as_tensor(t, dtype=x1.dtype, device=x1.device)
        if ((t < 0) | (t > 1)).any():
            raise InvalidInputError("t must lie in [0, 1]")
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype, device=x1.device)
    x_t = t * x1 + (1 - (1 - sigma_min) * t) * x0
    u_t = x1 - (1 - sigma_min) * x0
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, u_t=u_t)


def cfm_loss(
    field: Callable,
    sample: FlowSample,
    cond=None,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean squared error between the field and the target over unmasked elements.

    ``mask`` is a boolean (..., T) tensor marking valid positions; channels of
    a valid position all count. With no mask, every element counts.
    """
    v = field(sample.x_t, sample.t, cond)
    if v.shape != sample.u_t.shape:
        raise InvalidInputError(
            f"field output shape {tuple(v.shape)} != target {tuple(sample.u_t.shape)}"
        )
    sq = (v - sample.u_t) ** 2
    if mask is None:
        return sq.mean()
    if not mask.any():
        raise InvalidInputError("mask excludes every element")
    mask_f = mask.to(sq.dtype)
    while mask_f.ndim < sq.ndim:
        mask_f = mask_f[..., None]
    denom = mask_f.sum() * (sq.numel() / mask_f.numel())
    return (sq * mask_f).sum() / denom


def euler_solve(
    field: Callable,
    x_init: torch.Tensor,
    cond,
    config: ODESolverConfig,
) -> torch.Tensor:
    """Integrate dx/dt = field(x, t, cond) from t=0 to t=1 with nfe Euler steps.

    Deterministic given (x_init, cond, nfe). Raises NumericalFailureError
    carrying the step index if the field returns non-finite values.
    """
    x = x_init
    nfe = config.nfe
    dt = 1.0 / nfe
    for k in range(nfe):
        t = torch.tensor(k / nfe, dtype=x.dtype, device=x.device)
        v = field(x, t, cond)
        if not torch.isfinite(v).all():
            raise NumericalFailureError(
                f"non-finite field output at Euler step {k}", stage="euler_solve", step=k
            )
        x = x + dt * v
    return x
