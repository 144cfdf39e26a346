"""Objective evaluation: WER, response encoding, statistics, mismatch stimuli.

The t-distribution tail probabilities are computed here from a
continued-fraction evaluation of the regularized incomplete beta function,
so the package needs no statistics dependency; the test suite checks the
values against an independent implementation.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .datapipe import normalize_words
from .errors import InvalidInputError
from .features import MotionSequence

SCALE_MOS = "mos_1_5"
SCALE_APPROPRIATENESS = "appropriateness_m2_2"

APPROPRIATENESS_CHOICES = (
    "Left is much better",
    "Left is slightly better",
    "Both are equal",
    "Right is slightly better",
    "Right is much better",
)

# Preference magnitude for the left stimulus; the sign flips when the
# matched stimulus sits on the right.
_LEFT_PREFERENCE = {
    "Left is much better": 2,
    "Left is slightly better": 1,
    "Both are equal": 0,
    "Right is slightly better": -1,
    "Right is much better": -2,
}


@dataclass
class ResponseSet:
    condition: str
    values: np.ndarray
    scale: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.scale == SCALE_MOS:
            allowed = {1, 2, 3, 4, 5}
        elif self.scale == SCALE_APPROPRIATENESS:
            allowed = {-2, -1, 0, 1, 2}
        else:
            raise InvalidInputError(f"unknown scale {self.scale!r}")
        if not set(np.unique(self.values)).issubset(allowed):
            raise InvalidInputError(f"responses outside the {self.scale} scale")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class TTestResult:
    t: float
    p: float
    significant: bool


@dataclass
class StimulusPair:
    """Matched and time-rescaled mismatched motion for one audio segment."""

    audio_duration_s: float
    matched: MotionSequence
    mismatched: MotionSequence
    matched_side: str  # "left" or "right"

    def __post_init__(self):
        if self.matched_side not in ("left", "right"):
            raise InvalidInputError("matched_side must be 'left' or 'right'")
        for track in (self.matched, self.mismatched):
            if abs(track.duration_s - self.audio_duration_s) * track.fps > 1.0:
                raise InvalidInputError(
                    "stimulus motion duration differs from audio by more than one frame"
                )


# ---- word error rate ---------------------------------------------------------


def _edit_distance(ref: list, hyp: list) -> int:
    """Minimum substitutions + insertions + deletions."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            if r == h:
                cur.append(prev[j - 1])
            else:
                cur.append(1 + min(prev[j - 1], prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def wer(ref_text, hyp_text) -> float:
    """(S + I + D) / reference length after shared word normalization."""
    ref = normalize_words(ref_text) if isinstance(ref_text, str) else list(ref_text)
    hyp = normalize_words(hyp_text) if isinstance(hyp_text, str) else list(hyp_text)
    if not ref:
        raise InvalidInputError("empty reference")
    return _edit_distance(ref, hyp) / len(ref)


# ---- response encoding ---------------------------------------------------------


def encode_responses(raw_labels, scale: str, condition: str = "") -> ResponseSet:
    """Map raw labels to numbers.

    MOS: labels are the integers 1..5 (or their string forms).
    Appropriateness: each label is a (choice, matched_side) pair; 2 always
    means the matched stimulus was strongly preferred, -2 the mismatched one.
    """
    values = []
    if scale == SCALE_MOS:
        for label in raw_labels:
            try:
                v = int(label)
            except (TypeError, ValueError):
                raise InvalidInputError(f"unknown MOS label {label!r}") from None
            if not 1 <= v <= 5:
                raise InvalidInputError(f"MOS label {v} outside 1..5")
            values.append(v)
    elif scale == SCALE_APPROPRIATENESS:
        for item in raw_labels:
            try:
                choice, matched_side = item
            except (TypeError, ValueError):
                raise InvalidInputError(
                    "appropriateness labels must be (choice, matched_side) pairs"
                ) from None
            if choice not in _LEFT_PREFERENCE:
                raise InvalidInputError(f"unknown choice {choice!r}")
            if matched_side not in ("left", "right"):
                raise InvalidInputError(f"unknown side {matched_side!r}")
            sign = 1 if matched_side == "left" else -1
            values.append(sign * _LEFT_PREFERENCE[choice])
    else:
        raise InvalidInputError(f"unknown scale {scale!r}")
    return ResponseSet(condition=condition, values=np.asarray(values), scale=scale)


# ---- t distribution ------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with df degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    p_two = betainc_reg(df / 2.0, 0.5, df / (df + t * t))
    return p_two / 2.0 if t >= 0 else 1.0 - p_two / 2.0


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def t_quantile(q: float, df: float) -> float:
    """Inverse CDF by bisection on the (monotone) survival function."""
    if not 0.5 <= q < 1.0:
        raise InvalidInputError("t_quantile expects q in [0.5, 1)")
    target = 1.0 - q
    hi = 1.0
    while t_sf(hi, df) > target:
        hi *= 2.0
        if hi > 1e12:
            break
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_sf(mid, df) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---- summary statistics ---------------------------------------------------------


def summarize(responses: ResponseSet):
    """Mean and 95% confidence half-width: t_{0.975, n-1} * s / sqrt(n)."""
    n = responses.n
    if n < 2:
        raise InvalidInputError("need at least 2 responses to summarize")
    mean = float(responses.values.mean())
    s = float(responses.values.std(ddof=1))
    half = t_quantile(0.975, n - 1) * s / math.sqrt(n)
    return mean, half


def format_mean_ci(mean: float, half_width: float) -> str:
    return f"{mean:.2f}±{half_width:.2f}"


def pairwise_ttest(a: ResponseSet, b: ResponseSet) -> TTestResult:
    """Welch two-sample t-test with a two-sided p-value.

    Zero variance in both samples is defined, not an error: equal means give
    t=0, p=1; unequal means give an infinite statistic and p=0.
    """
    x, y = a.values, b.values
    n1, n2 = len(x), len(y)
    if n1 < 2 or n2 < 2:
        raise InvalidInputError("both samples need n >= 2")
    v1 = float(x.var(ddof=1))
    v2 = float(y.var(ddof=1))
    se2 = v1 / n1 + v2 / n2
    diff = float(x.mean() - y.mean())
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(t=0.0, p=1.0, significant=False)
        return TTestResult(t=math.copysign(math.inf, diff), p=0.0, significant=True)
    t = diff / math.sqrt(se2)
    df = se2**2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1))
    p = t_two_sided_p(t, df)
    return TTestResult(t=t, p=p, significant=p < 0.05)


def build_report(sets: dict) -> str:
    """Aligned plain-text table of per-condition mean and half-width."""
    lines = [f"{'Condition':<16} {'Mean':>12} {'n':>6}"]
    for name, rs in sets.items():
        mean, half = summarize(rs)
        lines.append(f"{name:<16} {format_mean_ci(mean, half):>12} {rs.n:>6}")
    return "\n".join(lines)


# ---- mismatch stimuli ------------------------------------------------------------


def make_mismatch_pair(
    audio_duration_s: float,
    matched: MotionSequence,
    donor: MotionSequence,
    seed: int = 0,
) -> StimulusPair:
    """Pair the audio's own motion with donor motion rescaled to the same length.

    The donor is time-rescaled (cubic over time) so its duration equals the
    audio duration; left/right placement comes from a seeded fair coin.
    """
    if donor.n_frames < 4:
        raise InvalidInputError("donor motion needs at least 4 frames")
    if audio_duration_s <= 0:
        raise InvalidInputError("audio duration must be positive")
    fps = donor.fps
    n_out = max(1, int(round(audio_duration_s * fps)))
    t_in = np.arange(donor.n_frames) / fps
    # Map output time [0, audio_dur) onto the donor's own time axis.
    scale = donor.duration_s / audio_duration_s
    t_out = (np.arange(n_out) / fps) * scale
    spline = CubicSpline(t_in, donor.frames.astype(np.float64), axis=0)
    rescaled = MotionSequence(spline(t_out).astype(donor.frames.dtype), fps)
    side = "left" if np.random.default_rng(seed).integers(2) == 0 else "right"
    return StimulusPair(
        audio_duration_s=audio_duration_s,
        matched=matched,
        mismatched=rescaled,
        matched_side=side,
    )
