"""Self-check suites behind the `verify` CLI subcommand.

Each suite re-derives expected behaviour from first principles (exhaustive
enumeration, closed-form ODE solutions, finite differences) and checks the
fast implementations against it.
"""

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import align, train
from .cfm import ODESolverConfig, euler_solve, make_flow_sample
from .net import ModelConfig, SpeechMotionModel


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _compositions(total: int, parts: int):
    """All ways to write total as an ordered sum of `parts` positive integers."""
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cuts + (total,)
        yield tuple(bounds[i + 1] - bounds[i] for i in range(parts))


def brute_force_mas_score(ll: np.ndarray) -> float:
    """Best alignment score by exhaustive enumeration (frame-order accumulation)."""
    n_tokens, n_frames = ll.shape
    best = -math.inf
    for durations in _compositions(n_frames, n_tokens):
        score = 0.0
        j = 0
        for i, d in enumerate(durations):
            for _ in range(d):
                score = score + ll[i, j]
                j += 1
        best = max(best, score)
    return best


def verify_mas(n_cases: int = 1000, max_tokens: int = 4, max_frames: int = 7, seed: int = 0):
    start = time.monotonic()
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(n_cases):
        n_t = int(rng.integers(1, max_tokens + 1))
        n_f = int(rng.integers(n_t, max_frames + 1))
        ll = rng.standard_normal((n_t, n_f))
        result = align.mas(ll)
        got = align.alignment_score(ll, result.durations)
        want = brute_force_mas_score(ll)
        if got != want:
            failures += 1
    return SuiteResult(
        name="mas-oracle",
        passed=failures == 0,
        detail=f"{n_cases} cases, {failures} mismatches, backend={align.BACKEND}",
        seconds=time.monotonic() - start,
    )


def verify_cfm(n_draws: int = 10000, seed: int = 0):
    start = time.monotonic()
    gen = torch.Generator().manual_seed(seed)
    ok = True
    for _ in range(100):
        x1 = torch.randn(n_draws // 100, 5, generator=gen, dtype=torch.float64)
        s = make_flow_sample(x1, gen, sigma_min=1e-4)
        lhs_x = s.t * s.x1 + (1 - (1 - 1e-4) * s.t) * s.x0
        lhs_u = s.x1 - (1 - 1e-4) * s.x0
        ok &= bool(torch.equal(lhs_x, s.x_t) and torch.equal(lhs_u, s.u_t))
    # Endpoints with sigma_min = 0.
    x1 = torch.randn(8, 3, generator=gen, dtype=torch.float64)
    s0 = make_flow_sample(x1, gen, t=0.0, sigma_min=0.0)
    s1 = make_flow_sample(x1, gen, t=1.0, sigma_min=0.0)
    ok &= bool(torch.equal(s0.x_t, s0.x0))
    ok &= bool(torch.equal(s1.x_t, s1.x1) and torch.equal(s1.u_t, s1.x1 - s1.x0))
    return SuiteResult(
        name="cfm-identities",
        passed=ok,
        detail=f"{n_draws} draws plus endpoint checks",
        seconds=time.monotonic() - start,
    )


def verify_euler():
    start = time.monotonic()
    field = lambda x, t, c: -x
    x0 = torch.ones(1, dtype=torch.float64)
    errors = []
    nfes = [4, 8, 16, 32, 64, 128, 256]
    for nfe in nfes:
        xT = euler_solve(field, x0, None, ODESolverConfig(nfe=nfe))
        errors.append(abs(float(xT) - math.exp(-1.0)))
    slope = float(np.polyfit(np.log(nfes), np.log(errors), 1)[0])
    passed = -1.2 <= slope <= -0.8
    return SuiteResult(
        name="euler-convergence",
        passed=passed,
        detail=f"log-log slope {slope:.3f} on v=-x vs closed form exp(-1)",
        seconds=time.monotonic() - start,
    )


def tiny_model_config() -> ModelConfig:
    """Smallest full model: every component present, few parameters."""
    return ModelConfig(
        vocab_size=12,
        hidden_dim=8,
        encoder_layers=1,
        encoder_heads=2,
        prosody_width=8,
        duration_width=8,
        decoder_channels=8,
        decoder_heads=2,
        n_buckets=4,
        n_mels=3,
        motion_dim=3,
        n_speakers=2,
    )


def micro_model_config() -> ModelConfig:
    """Even smaller than tiny: quick finite-difference sweeps."""
    return ModelConfig(
        vocab_size=8,
        hidden_dim=4,
        encoder_layers=1,
        encoder_heads=2,
        prosody_width=4,
        duration_width=4,
        decoder_channels=4,
        decoder_heads=2,
        n_buckets=2,
        n_mels=2,
        motion_dim=2,
        n_speakers=2,
    )


def verify_gradients(eps: float = 1e-5, threshold: float = 1e-4, quick: bool = False):
    start = time.monotonic()
    torch.manual_seed(0)
    model = SpeechMotionModel(micro_model_config() if quick else tiny_model_config())
    rel = train.check_gradients(model, eps=eps)
    return SuiteResult(
        name="gradient-check",
        passed=rel < threshold,
        detail=f"max relative error {rel:.3e} over {model.parameter_count()} parameters",
        seconds=time.monotonic() - start,
    )


def run_all(quick: bool = False):
    n_mas = 200 if quick else 1000
    n_cfm = 2000 if quick else 10000
    return [
        verify_mas(n_cases=n_mas),
        verify_cfm(n_draws=n_cfm),
        verify_euler(),
        verify_gradients(quick=quick),
    ]
