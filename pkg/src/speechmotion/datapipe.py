"""Synthetic multimodal corpus pipeline with pluggable backends.

text -> speech -> duration/token filters -> re-transcription -> forced
alignment -> gestures, with exact bookkeeping: every record appears in the
manifest, discards are permanent, and stats always sum to the input count.

The five backends (text generator, speech synthesizer, recognizer, forced
aligner, gesture generator) are single-call interfaces; deterministic mocks
ship here, real adapters (LLM/TTS/ASR/MFA/diffusion-gesture services) plug
in behind the same methods. Records are independent, so stage execution may
run concurrently across records; stats are a single fold at the end.
"""

import hashlib
import json
import unicodedata
import wave
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensorfile
from .errors import ConfigError, InvalidInputError, PipelineError
from .features import MOTION_CHANNELS, MotionSequence

MAX_PHRASE_CHARS = 300


class Status(str, Enum):
    PENDING = "pending"
    OK = "ok"
    DISCARDED_TOO_LONG = "discarded_too_long"
    DISCARDED_TOKEN_CAP = "discarded_token_cap"
    DISCARDED_ALIGN_FAIL = "discarded_align_fail"
    ERROR = "error"


TERMINAL_STATUSES = frozenset(
    {
        Status.OK,
        Status.DISCARDED_TOO_LONG,
        Status.DISCARDED_TOKEN_CAP,
        Status.DISCARDED_ALIGN_FAIL,
        Status.ERROR,
    }
)


@dataclass
class UtteranceRecord:
    """Pipeline ledger entry for one (phrase, voice) pair.

    ``waveform``/``motion`` are in-memory payloads and never serialized;
    the manifest stores file references instead.
    """

    id: str
    prompt_text: str
    voice: str
    status: Status = Status.PENDING
    audio_path: Optional[str] = None
    duration_s: Optional[float] = None
    token_count: Optional[int] = None
    asr_text: Optional[str] = None
    word_timings: Optional[list] = None
    gesture_path: Optional[str] = None
    motion_fps: Optional[float] = None
    error_detail: Optional[str] = None
    waveform: Optional[np.ndarray] = None
    sample_rate: Optional[int] = None
    motion: Optional[MotionSequence] = None

    def mark(self, status: Status, detail: Optional[str] = None) -> None:
        """Move to a new status; terminal statuses are immutable."""
        if self.status in TERMINAL_STATUSES:
            raise PipelineError(
                f"record {self.id} is already terminal ({self.status.value})"
            )
        self.status = status
        if detail is not None:
            self.error_detail = detail

    @property
    def retained(self) -> bool:
        return self.status == Status.OK

    def to_manifest_dict(self) -> dict:
        return {
            "id": self.id,
            "prompt_text": self.prompt_text,
            "voice": self.voice,
            "status": self.status.value,
            "audio_path": self.audio_path,
            "duration_s": self.duration_s,
            "token_count": self.token_count,
            "asr_text": self.asr_text,
            "word_timings": self.word_timings,
            "gesture_path": self.gesture_path,
            "motion_fps": self.motion_fps,
            "error_detail": self.error_detail,
        }

    @classmethod
    def from_manifest_dict(cls, d: dict) -> "UtteranceRecord":
        d = dict(d)
        d["status"] = Status(d["status"])
        if d.get("word_timings") is not None:
            d["word_timings"] = [tuple(t) for t in d["word_timings"]]
        return cls(**d)


@dataclass
class PipelineBackends:
    text_generator: object
    speech_synthesizer: object
    recognizer: object
    forced_aligner: object
    gesture_generator: object


@dataclass
class PipelineStats:
    total: int
    counts: dict
    retained: int
    retained_hours: float

    @classmethod
    def from_records(cls, records: Sequence[UtteranceRecord]) -> "PipelineStats":
        counts = {status.value: 0 for status in Status}
        hours = 0.0
        for r in records:
            counts[r.status.value] += 1
            if r.retained and r.duration_s:
                hours += r.duration_s / 3600.0
        stats = cls(
            total=len(records),
            counts=counts,
            retained=counts[Status.OK.value],
            retained_hours=hours,
        )
        if sum(counts.values()) != stats.total:
            raise PipelineError("status counts do not sum to the input count")
        return stats


@dataclass
class MockBackendSettings:
    """Knobs for the packaged mock backends (crafted cases, toy scales)."""

    text_target_chars: int = 250
    seconds_per_char: float = 0.085
    tokens_per_char: float = 1.2
    sample_rate: int = 22050
    gesture_fps: float = 120.0
    gesture_mode: str = "pulse"
    align_fail_ids: list = field(default_factory=list)
    duration_overrides: dict = field(default_factory=dict)  # utt id -> seconds
    token_overrides: dict = field(default_factory=dict)  # utt id -> token count


@dataclass
class PipelineConfig:
    n_phrases: int = 20
    voices: list = field(default_factory=lambda: ["v00", "v01"])
    seed: int = 0
    max_tokens: int = 400
    max_duration_s: float = 25.0
    retries: int = 3
    style_examples: list = field(default_factory=list)
    mocks: MockBackendSettings = field(default_factory=MockBackendSettings)

    def __post_init__(self):
        if isinstance(self.mocks, dict):
            self.mocks = MockBackendSettings(**self.mocks)
        if self.n_phrases < 0:
            raise ConfigError("n_phrases must be >= 0")
        if not self.voices:
            raise ConfigError("at least one voice is required")
        if self.retries < 1:
            raise ConfigError("retries must be >= 1")


def derive_seed(base_seed: int, *parts) -> int:
    """Stable per-record seed; independent of Python hash randomization."""
    text = ":".join([str(base_seed), *map(str, parts)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def _with_retries(fn: Callable, retries: int, stage: str):
    last = None
    for _ in range(retries):
        try:
            return fn()
        except Exception as exc:  # backend faults become record errors upstream
            last = exc
    raise PipelineError(f"{stage} failed after {retries} attempts: {last}")


# ---- pipeline operations ----------------------------------------------------


def generate_texts(n: int, style_examples, backend, seed: int = 0, retries: int = 3) -> list:
    """Fetch n phrases from the text backend, hard-capped at 300 characters.

    Oversized backend output is truncated at the last word boundary that
    fits; the backend prompt itself targets ~250 characters.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    phrases = _with_retries(
        lambda: backend.generate(n, style_examples, seed), retries, "text generation"
    )
    if len(phrases) != n:
        raise PipelineError(f"text backend returned {len(phrases)} phrases, wanted {n}")
    return [truncate_phrase(p) for p in phrases]


def truncate_phrase(phrase: str, max_chars: int = MAX_PHRASE_CHARS) -> str:
    if len(phrase) <= max_chars:
        return phrase
    cut = phrase[: max_chars + 1]
    boundary = cut.rfind(" ")
    if boundary <= 0:
        return phrase[:max_chars]
    return cut[:boundary]


def synthesize_speech(
    phrase: str,
    voice: str,
    backend,
    seed: int,
    utt_id: str,
    max_tokens: int = 400,
    retries: int = 3,
) -> UtteranceRecord:
    """Synthesize audio for one phrase/voice; over-budget token counts discard."""
    record = UtteranceRecord(id=utt_id, prompt_text=phrase, voice=voice)
    try:
        out = _with_retries(
            lambda: backend.synthesize(phrase, voice, seed, utt_id), retries, "speech synthesis"
        )
    except PipelineError as exc:
        record.mark(Status.ERROR, str(exc))
        return record
    record.waveform = np.asarray(out.waveform, dtype=np.float32)
    record.sample_rate = int(out.sample_rate)
    record.duration_s = record.waveform.shape[0] / record.sample_rate
    record.token_count = int(out.token_count)
    if record.token_count > max_tokens:
        record.mark(Status.DISCARDED_TOKEN_CAP)
    return record


def filter_duration(record: UtteranceRecord, max_duration_s: float = 25.0) -> UtteranceRecord:
    """Discard audio strictly longer than the cap (25.0 s itself is retained)."""
    if record.status != Status.PENDING:
        return record
    if record.duration_s is None:
        raise InvalidInputError(f"record {record.id} has no duration")
    if record.duration_s > max_duration_s:
        record.mark(Status.DISCARDED_TOO_LONG)
    return record


def retranscribe(record: UtteranceRecord, recognizer, seed: int, retries: int = 3) -> UtteranceRecord:
    """Replace the prompt with recognizer output for all downstream steps."""
    if record.status != Status.PENDING:
        return record
    try:
        record.asr_text = _with_retries(
            lambda: recognizer.transcribe(record, seed), retries, "recognition"
        )
    except PipelineError as exc:
        record.mark(Status.ERROR, str(exc))
    return record


def normalize_words(text: str) -> list:
    """Whitespace split, strip leading/trailing punctuation, lower-case.

    Words that become empty are dropped.
    """
    words = []
    for raw in text.split():
        start, end = 0, len(raw)
        while start < end and unicodedata.category(raw[start]).startswith("P"):
            start += 1
        while end > start and unicodedata.category(raw[end - 1]).startswith("P"):
            end -= 1
        word = raw[start:end].lower()
        if word:
            words.append(word)
    return words


def force_align(record: UtteranceRecord, aligner, seed: int) -> UtteranceRecord:
    """Attach word timings; aligner failure is a status, not an exception."""
    if record.status != Status.PENDING:
        return record
    if record.asr_text is None:
        raise InvalidInputError(f"record {record.id} has no transcript to align")
    timings = aligner.align(record, seed)
    if timings is None:
        record.mark(Status.DISCARDED_ALIGN_FAIL)
        return record
    previous = 0.0
    for word, start, end in timings:
        if not 0.0 <= start <= end <= record.duration_s + 1e-6 or start < previous - 1e-6:
            record.mark(Status.ERROR, f"non-monotone timings near {word!r}")
            return record
        previous = start
    record.word_timings = [(w, float(s), float(e)) for w, s, e in timings]
    return record


def generate_gestures(record: UtteranceRecord, backend, seed: int, retries: int = 3) -> UtteranceRecord:
    """Attach generated motion; its length must match the audio within 1 frame."""
    if record.status != Status.PENDING:
        return record
    if record.word_timings is None:
        raise InvalidInputError(f"record {record.id} has no word timings")
    try:
        motion = _with_retries(
            lambda: backend.generate(record, seed), retries, "gesture generation"
        )
    except PipelineError as exc:
        record.mark(Status.ERROR, str(exc))
        return record
    expected = record.duration_s * motion.fps
    if abs(motion.n_frames - expected) > 1.0:
        record.mark(
            Status.ERROR,
            f"gesture length {motion.n_frames} frames != audio {expected:.1f}",
        )
        return record
    record.motion = motion
    record.motion_fps = motion.fps
    return record


def run_pipeline(config: PipelineConfig, backends: PipelineBackends, out_dir=None):
    """Run every stage for every (phrase, voice) pair.

    Individual record failures never abort the run. Returns (records, stats);
    when ``out_dir`` is given, audio/motion for retained records and the full
    manifest are written there.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        (out_path / "audio").mkdir(parents=True, exist_ok=True)
        (out_path / "motion").mkdir(parents=True, exist_ok=True)
    phrases = []
    if config.n_phrases > 0:
        phrases = generate_texts(
            config.n_phrases,
            config.style_examples,
            backends.text_generator,
            seed=derive_seed(config.seed, "texts"),
            retries=config.retries,
        )
    records = []
    for phrase_idx, phrase in enumerate(phrases):
        for voice in config.voices:
            utt_id = f"utt{phrase_idx:04d}_{voice}"
            seed = derive_seed(config.seed, utt_id)
            record = synthesize_speech(
                phrase,
                voice,
                backends.speech_synthesizer,
                seed,
                utt_id,
                max_tokens=config.max_tokens,
                retries=config.retries,
            )
            filter_duration(record, config.max_duration_s)
            retranscribe(record, backends.recognizer, seed, retries=config.retries)
            force_align(record, backends.forced_aligner, seed)
            generate_gestures(record, backends.gesture_generator, seed, retries=config.retries)
            if record.status == Status.PENDING:
                if out_path is not None:
                    record.audio_path = f"audio/{utt_id}.wav"
                    write_wav(out_path / record.audio_path, record.waveform, record.sample_rate)
                    record.gesture_path = f"motion/{utt_id}.mtf"
                    tensorfile.save(out_path / record.gesture_path, record.motion.frames)
                record.mark(Status.OK)
            records.append(record)
    stats = PipelineStats.from_records(records)
    if out_path is not None:
        write_manifest(records, out_path / "manifest.jsonl")
    return records, stats


# ---- manifest and audio I/O --------------------------------------------------


def write_manifest(records: Sequence[UtteranceRecord], path) -> None:
    """One compact JSON record per line; byte-stable for identical runs."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_manifest_dict(), sort_keys=True, separators=(",", ":")))
            f.write("\n")


def read_manifest(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(UtteranceRecord.from_manifest_dict(json.loads(line)))
    return records


def write_wav(path, waveform: np.ndarray, sample_rate: int) -> None:
    """Mono 16-bit PCM."""
    samples = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = (samples * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: expected mono 16-bit PCM")
        sample_rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float32) / 32768.0, sample_rate


# ---- deterministic mock backends ---------------------------------------------


_WORD_BANK = (
    "so well i think maybe we could go there and then really quite nice day "
    "you know like that was amazing honestly it felt strange but good the "
    "whole thing just kept moving along somehow right over here again never "
    "always people talking about little things everywhere lately"
).split()

_FILLERS = ("um", "uh", "uhm", "...")


class MockTextGenerator:
    """Seeded phrase sampler approximating conversational monologue style."""

    def __init__(self, target_chars: int = 250):
        self.target_chars = target_chars

    def generate(self, n: int, style_examples, seed: int) -> list:
        rng = np.random.default_rng(seed)
        phrases = []
        for _ in range(n):
            words = []
            length = 0
            while length < self.target_chars:
                if rng.random() < 0.12:
                    word = _FILLERS[rng.integers(len(_FILLERS))]
                else:
                    word = _WORD_BANK[rng.integers(len(_WORD_BANK))]
                words.append(word)
                length += len(word) + 1
            phrases.append(" ".join(words))
        return phrases


@dataclass
class SpeechOutput:
    waveform: np.ndarray
    sample_rate: int
    token_count: int


class MockSpeechSynthesizer:
    """Harmonic tone with vibrato, syllable-rate AM, and short word gaps.

    Duration and token count scale with text length so filter boundaries are
    exercised; the spectral content gives the feature extractors real work.
    Per-utterance overrides support crafted filter-boundary cases.
    """

    def __init__(
        self,
        sample_rate: int = 22050,
        seconds_per_char: float = 0.085,
        tokens_per_char: float = 1.2,
        duration_overrides: Optional[dict] = None,
        token_overrides: Optional[dict] = None,
    ):
        self.sample_rate = sample_rate
        self.seconds_per_char = seconds_per_char
        self.tokens_per_char = tokens_per_char
        self.duration_overrides = duration_overrides or {}
        self.token_overrides = token_overrides or {}

    def synthesize(self, text: str, voice: str, seed: int, utt_id: str = "") -> SpeechOutput:
        rng = np.random.default_rng(seed)
        duration = max(0.35, self.seconds_per_char * len(text) * (1.0 + 0.04 * (rng.random() - 0.5)))
        if utt_id in self.duration_overrides:
            duration = float(self.duration_overrides[utt_id])
        n = int(round(duration * self.sample_rate))
        t = np.arange(n) / self.sample_rate
        base_f0 = 110.0 + (derive_seed(0, voice) % 160)
        f0 = base_f0 * (1.0 + 0.06 * np.sin(2.0 * np.pi * 0.8 * t + rng.random() * 6.28))
        phase = 2.0 * np.pi * np.cumsum(f0) / self.sample_rate
        am = 0.55 + 0.45 * np.sin(2.0 * np.pi * 1.7 * t + rng.random() * 6.28)
        wave_out = am * (
            0.6 * np.sin(phase) + 0.25 * np.sin(2 * phase) + 0.1 * np.sin(3 * phase)
        ) * 0.35
        wave_out = wave_out + 0.002 * rng.standard_normal(n)
        # Brief silences roughly once a second (unvoiced stretches).
        gap = int(0.09 * self.sample_rate)
        step = int(1.1 * self.sample_rate)
        for start in range(step, n - gap, step):
            wave_out[start : start + gap] = 0.0
        tokens = int(round(self.tokens_per_char * len(text)))
        if utt_id in self.token_overrides:
            tokens = int(self.token_overrides[utt_id])
        return SpeechOutput(wave_out.astype(np.float32), self.sample_rate, tokens)


class MockRecognizer:
    """'identity' echoes the prompt; 'drop_fillers' removes hesitation words."""

    def __init__(self, mode: str = "identity"):
        if mode not in ("identity", "drop_fillers"):
            raise ConfigError(f"unknown recognizer mode {mode!r}")
        self.mode = mode

    def transcribe(self, record: UtteranceRecord, seed: int) -> str:
        text = record.prompt_text
        if self.mode == "drop_fillers":
            kept = [w for w in text.split() if w.lower().strip(".") not in ("um", "uh", "uhm", "")]
            text = " ".join(kept)
        return text


class MockForcedAligner:
    """Uniform word spans over the audio; selected ids can be made to fail."""

    def __init__(self, fail_ids: Sequence[str] = ()):
        self.fail_ids = frozenset(fail_ids)

    def align(self, record: UtteranceRecord, seed: int):
        if record.id in self.fail_ids:
            return None
        words = normalize_words(record.asr_text)
        if not words:
            return None
        duration = record.duration_s
        k = len(words)
        return [(w, i * duration / k, (i + 1) * duration / k) for i, w in enumerate(words)]


class MockGestureGenerator:
    """Zero pose, smooth noise, or word-onset pulses at a fixed fps.

    'pulse' puts a Gaussian bump on channel 0 at each word onset and slow
    seeded sinusoids on the remaining channels (so corpora have variance).
    """

    def __init__(self, fps: float = 120.0, mode: str = "pulse"):
        if mode not in ("zero", "pulse"):
            raise ConfigError(f"unknown gesture mode {mode!r}")
        self.fps = fps
        self.mode = mode

    def generate(self, record: UtteranceRecord, seed: int) -> MotionSequence:
        n = int(round(record.duration_s * self.fps))
        n = max(n, 4)
        frames = np.zeros((n, MOTION_CHANNELS), dtype=np.float64)
        if self.mode == "pulse":
            rng = np.random.default_rng(seed)
            t = np.arange(n) / self.fps
            for ch in range(1, MOTION_CHANNELS):
                freq = 0.2 + 0.6 * rng.random()
                frames[:, ch] = 0.15 * np.sin(2.0 * np.pi * freq * t + rng.random() * 6.28)
            width = max(2.0, 0.05 * self.fps)
            for _, start, _ in record.word_timings:
                center = round(start * self.fps)
                idx = np.arange(n)
                frames[:, 0] += np.exp(-(((idx - center) / width) ** 2))
        return MotionSequence(frames.astype(np.float32), self.fps)


def default_mock_backends(settings: Optional[MockBackendSettings] = None) -> PipelineBackends:
    s = settings or MockBackendSettings()
    return PipelineBackends(
        text_generator=MockTextGenerator(target_chars=s.text_target_chars),
        speech_synthesizer=MockSpeechSynthesizer(
            sample_rate=s.sample_rate,
            seconds_per_char=s.seconds_per_char,
            tokens_per_char=s.tokens_per_char,
            duration_overrides=s.duration_overrides,
            token_overrides=s.token_overrides,
        ),
        recognizer=MockRecognizer(),
        forced_aligner=MockForcedAligner(fail_ids=s.align_fail_ids),
        gesture_generator=MockGestureGenerator(fps=s.gesture_fps, mode=s.gesture_mode),
    )
