"""Acoustic and motion feature extraction, resampling, and token aggregation.

All operations are pure functions of their inputs and safe to call
concurrently on distinct utterances.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, InvalidInputError

MOTION_CHANNELS = 45

# 22050 Hz / hop 256; the frame rate shared by mel and resampled motion.
FRAME_RATE = 22050 / 256


@dataclass
class AudioConfig:
    """Analysis settings for mel, energy, and pitch extraction.

    The pitch frame/hop are tied to the mel settings so every contour has
    the same length as the mel spectrogram.
    """

    sample_rate: int = 22050
    hop_length: int = 256
    win_length: int = 1024
    n_mels: int = 80
    mel_f_min: float = 0.0
    mel_f_max: float = 8000.0
    log_floor: float = 1e-5
    pitch_f_min: float = 60.0
    pitch_f_max: float = 400.0
    voicing_threshold: float = 0.3

    def __post_init__(self):
        if self.hop_length <= 0 or self.win_length <= 0 or self.sample_rate <= 0:
            raise ConfigError("sample_rate, hop_length, win_length must be positive")
        if self.win_length % 2 != 0:
            raise ConfigError("win_length must be even")
        if not 0 < self.pitch_f_min < self.pitch_f_max < self.sample_rate / 2:
            raise ConfigError("pitch search range must satisfy 0 < f_min < f_max < Nyquist")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length


@dataclass
class MelSpectrogram:
    """Log-compressed mel energies, one row per frame."""

    frames: np.ndarray  # (T_f, n_mels)
    frame_rate: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InvalidInputError("mel frames must be a (T_f >= 1, n_mels) matrix")
        if not np.isfinite(self.frames).all():
            raise InvalidInputError("mel frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass
class MotionSequence:
    """Exponential-map pose vectors (15 upper-body joints x 3), one row per frame."""

    frames: np.ndarray  # (T_f, 45)
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != MOTION_CHANNELS:
            raise InvalidInputError(
                f"motion frames must have exactly {MOTION_CHANNELS} channels"
            )
        if not np.isfinite(self.frames).all():
            raise InvalidInputError("motion frames contain non-finite values")
        if self.fps <= 0:
            raise InvalidInputError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.fps


@dataclass
class PitchContour:
    values: np.ndarray  # Hz, 0 where unvoiced (before interpolation)
    voiced: np.ndarray  # bool mask

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.values.shape != self.voiced.shape or self.values.ndim != 1:
            raise InvalidInputError("values and voiced mask must be 1-D with equal length")
        if (self.values < 0).any() or not np.isfinite(self.values).all():
            raise InvalidInputError("pitch values must be finite and non-negative")


@dataclass
class EnergyContour:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InvalidInputError("energy values must be 1-D")
        if (self.values < 0).any() or not np.isfinite(self.values).all():
            raise InvalidInputError("energy values must be finite and non-negative")


@dataclass
class FeatureBundle:
    """One utterance's aligned features plus tokens and speaker identity."""

    tokens: np.ndarray
    mel: MelSpectrogram
    motion: MotionSequence
    pitch: PitchContour
    energy: EnergyContour
    speaker: int
    durations: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        t_f = self.mel.n_frames
        if not (
            self.motion.n_frames == t_f
            and self.pitch.values.shape[0] == t_f
            and self.energy.values.shape[0] == t_f
        ):
            raise InvalidInputError("mel, motion, pitch, and energy lengths must agree")
        if self.durations is not None:
            self.durations = np.asarray(self.durations, dtype=np.int64)
            if (self.durations < 1).any() or self.durations.sum() != t_f:
                raise InvalidInputError("durations must be >= 1 and sum to the frame count")

    @property
    def n_frames(self) -> int:
        return self.mel.n_frames

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


def _frame_signal(waveform, config: AudioConfig) -> np.ndarray:
    """Centered analysis frames (T_f, win_length) via reflection padding."""
    x = np.asarray(waveform, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidInputError("empty waveform")
    if x.size < config.win_length:
        raise InvalidInputError(
            f"waveform too short: {x.size} samples < window {config.win_length}"
        )
    pad = (config.win_length - config.hop_length) // 2
    x = np.pad(x, (pad, pad), mode="reflect")
    n_frames = 1 + (x.size - config.win_length) // config.hop_length
    idx = np.arange(config.win_length)[None, :] + config.hop_length * np.arange(n_frames)[:, None]
    return x[idx]


def _hz_to_mel(freq):
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    linear = freq / f_sp
    with np.errstate(divide="ignore"):
        logged = min_log_hz / f_sp + np.log(np.maximum(freq, 1e-12) / min_log_hz) / logstep
    return np.where(freq >= min_log_hz, logged, linear)


def _mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    linear = mel * f_sp
    logged = min_log_hz * np.exp(logstep * (mel - min_log_mel))
    return np.where(mel >= min_log_mel, logged, linear)


def mel_filterbank(config: AudioConfig) -> np.ndarray:
    """Triangular mel filterbank (n_mels, n_fft_bins), area-normalized."""
    n_bins = config.win_length // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(
        _hz_to_mel(config.mel_f_min), _hz_to_mel(config.mel_f_max), config.n_mels + 2
    )
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (hz_pts[2 : config.n_mels + 2] - hz_pts[: config.n_mels])
    return weights * enorm[:, None]


def mel_band_centers(config: AudioConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel band, from the filterbank construction."""
    mel_pts = np.linspace(
        _hz_to_mel(config.mel_f_min), _hz_to_mel(config.mel_f_max), config.n_mels + 2
    )
    return _mel_to_hz(mel_pts)[1:-1]


def extract_mel(waveform, sample_rate: int, config: AudioConfig) -> MelSpectrogram:
    """Log-mel spectrogram with natural-log compression floored at log_floor.

    Raises InvalidInputError for empty/too-short input and ConfigError when
    the waveform's sample rate does not match the analysis settings.
    """
    if sample_rate != config.sample_rate:
        raise ConfigError(
            f"sample rate {sample_rate} does not match config {config.sample_rate}"
        )
    frames = _frame_signal(waveform, config)
    n = config.win_length
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    spec = np.abs(np.fft.rfft(frames * window, axis=1))
    mel = spec @ mel_filterbank(config).T
    logmel = np.log(np.maximum(mel, config.log_floor))
    return MelSpectrogram(logmel.astype(np.float32), config.frame_rate)


def extract_energy(mel: MelSpectrogram) -> EnergyContour:
    """Per-frame Euclidean norm of the exponentiated (linear-domain) mel frame."""
    linear = np.exp(mel.frames.astype(np.float64))
    return EnergyContour(np.linalg.norm(linear, axis=1))


def extract_pitch(waveform, sample_rate: int, config: AudioConfig) -> PitchContour:
    """Fundamental frequency via normalized autocorrelation with parabolic refinement.

    Uses the same framing as extract_mel, so the contour length equals the
    mel frame count. All-unvoiced input is legal and yields an all-false mask.
    """
    if sample_rate != config.sample_rate:
        raise ConfigError(
            f"sample rate {sample_rate} does not match config {config.sample_rate}"
        )
    frames = _frame_signal(waveform, config)
    frames = frames - frames.mean(axis=1, keepdims=True)
    n = config.win_length

    tau_min = max(2, int(np.ceil(sample_rate / config.pitch_f_max)))
    tau_max = min(n - 2, int(np.floor(sample_rate / config.pitch_f_min)))
    if tau_min + 1 >= tau_max:
        raise ConfigError("pitch search range is empty for this window length")

    # Autocorrelation of every frame at once via FFT.
    nfft = 1
    while nfft < 2 * n:
        nfft *= 2
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acorr = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=1)[:, :n]

    # Normalization by the energies of the two overlapping segments.
    csq = np.cumsum(frames**2, axis=1)
    total = csq[:, -1]
    taus = np.arange(tau_min - 1, tau_max + 2)
    e_head = csq[:, n - taus - 1]
    e_tail = total[:, None] - csq[:, taus - 1]
    nacf = acorr[:, taus] / np.maximum(np.sqrt(e_head * e_tail), 1e-12)

    interior = nacf[:, 1:-1]
    row_max = interior.max(axis=1)
    local_max = (interior >= nacf[:, :-2]) & (interior >= nacf[:, 2:])
    candidates = local_max & (interior >= config.voicing_threshold)
    candidates &= interior >= (row_max[:, None] - 0.02)

    voiced = candidates.any(axis=1) & (total > 1e-10)
    # First qualifying lag = shortest period among the near-best peaks.
    pick = np.argmax(candidates, axis=1)
    tau = taus[pick + 1].astype(np.float64)

    r_prev = interior[np.arange(len(pick)), np.maximum(pick - 1, 0)]
    r_here = interior[np.arange(len(pick)), pick]
    r_next = nacf[np.arange(len(pick)), pick + 2]
    denom = r_prev - 2.0 * r_here + r_next
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = 0.5 * (r_prev - r_next) / denom
    delta = np.where(np.isfinite(delta) & (denom < 0), np.clip(delta, -0.5, 0.5), 0.0)

    freq = sample_rate / (tau + delta)
    freq = np.clip(freq, config.pitch_f_min, config.pitch_f_max)
    values = np.where(voiced, freq, 0.0)
    return PitchContour(values, voiced)


def interpolate_unvoiced(contour: PitchContour) -> PitchContour:
    """Fill unvoiced gaps by linear interpolation between voiced neighbors.

    Leading/trailing unvoiced runs take the nearest voiced value; an
    all-unvoiced contour comes back as zeros. The voiced mask is preserved,
    which makes the operation idempotent.
    """
    if not contour.voiced.any():
        return PitchContour(np.zeros_like(contour.values), contour.voiced.copy())
    anchors = np.flatnonzero(contour.voiced)
    positions = np.arange(contour.values.shape[0])
    values = np.interp(positions, anchors, contour.values[anchors])
    return PitchContour(values, contour.voiced.copy())


def resample_motion(motion: MotionSequence, target_fps: float) -> MotionSequence:
    """Cubic resampling of every channel; preserves duration within one frame."""
    if target_fps <= 0:
        raise InvalidInputError("target_fps must be positive")
    if motion.n_frames < 4:
        raise InvalidInputError("cubic resampling needs at least 4 frames")
    t_in = np.arange(motion.n_frames) / motion.fps
    duration = motion.n_frames / motion.fps
    n_out = max(1, int(round(duration * target_fps)))
    t_out = np.arange(n_out) / target_fps
    spline = CubicSpline(t_in, motion.frames.astype(np.float64), axis=0)
    return MotionSequence(spline(t_out).astype(motion.frames.dtype), target_fps)


def token_average(contour_values, durations) -> np.ndarray:
    """Mean of a frame-level contour over each token's frame span."""
    values = np.asarray(contour_values, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.int64)
    if values.ndim != 1 or durations.ndim != 1:
        raise InvalidInputError("contour and durations must be 1-D")
    if (durations < 1).any():
        raise InvalidInputError("durations must all be >= 1")
    if durations.sum() != values.shape[0]:
        raise InvalidInputError(
            f"durations sum {durations.sum()} does not match contour length {values.shape[0]}"
        )
    starts = np.concatenate(([0], np.cumsum(durations)[:-1]))
    sums = np.add.reduceat(values, starts)
    return sums / durations


def bucketize(value, boundaries):
    """Bucket index in [0, B) given B-1 sorted boundaries.

    A value equal to a boundary goes to the upper bucket (the index equals
    the count of boundaries <= value).
    """
    b = np.asarray(boundaries, dtype=np.float64)
    if b.ndim != 1 or b.shape[0] < 1:
        raise ConfigError("boundaries must be a non-empty 1-D array")
    if (np.diff(b) <= 0).any():
        raise ConfigError("boundaries must be strictly increasing")
    idx = np.searchsorted(b, value, side="right")
    if np.isscalar(value) or np.ndim(value) == 0:
        return int(idx)
    return idx


def build_bundle(
    waveform,
    sample_rate: int,
    motion: MotionSequence,
    token_ids,
    speaker: int,
    config: AudioConfig,
) -> FeatureBundle:
    """Extract and length-align all features for one utterance.

    Motion is resampled to the mel frame rate; a residual mismatch of at
    most 2 frames (rounding at both ends of the chain) is cropped away.
    """
    mel = extract_mel(waveform, sample_rate, config)
    pitch = interpolate_unvoiced(extract_pitch(waveform, sample_rate, config))
    energy = extract_energy(mel)
    resampled = resample_motion(motion, config.frame_rate)
    t_f = min(mel.n_frames, resampled.n_frames)
    if abs(mel.n_frames - resampled.n_frames) > 2:
        raise InvalidInputError(
            f"mel/motion length mismatch beyond rounding: {mel.n_frames} vs {resampled.n_frames}"
        )
    return FeatureBundle(
        tokens=np.asarray(token_ids, dtype=np.int64),
        mel=MelSpectrogram(mel.frames[:t_f], mel.frame_rate),
        motion=MotionSequence(resampled.frames[:t_f], resampled.fps),
        pitch=PitchContour(pitch.values[:t_f], pitch.voiced[:t_f]),
        energy=EnergyContour(energy.values[:t_f]),
        speaker=speaker,
    )
