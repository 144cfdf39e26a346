"""End-to-end inference with prosody control and export of results.

Separate seeds drive duration sampling and joint decoding, so
controls-vs-baseline comparisons can hold the duration noise fixed.
Concurrent synthesize calls on one model are safe (read-only model,
caller-owned random streams).
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import tensorfile, tokens as tokenlib
from .cfm import ODESolverConfig
from .errors import InvalidInputError
from .features import MelSpectrogram, MotionSequence
from .net import SpeechMotionModel, length_regulate, speaker_one_hot, split_output


@dataclass
class ProsodyControls:
    """Multipliers applied to the predicted token-level contours; (1, 1) is identity."""

    pitch_scale: float = 1.0
    energy_scale: float = 1.0

    def __post_init__(self):
        if self.pitch_scale <= 0 or self.energy_scale <= 0:
            raise InvalidInputError("prosody scales must be positive")


@dataclass
class SynthesisResult:
    mel: MelSpectrogram
    motion: MotionSequence
    durations: np.ndarray
    token_pitch: np.ndarray
    token_energy: np.ndarray
    speaker: int
    seed_durations: int
    seed_decoder: int
    nfe_joint: int
    nfe_duration: int

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        total = int(self.durations.sum())
        if self.mel.n_frames != total or self.motion.n_frames != total:
            raise InvalidInputError("mel/motion frame counts must equal sum(durations)")


def apply_controls(pitch_tokens, energy_tokens, controls: ProsodyControls):
    """Scale pitch (in Hz, ahead of log-domain bucketization) and energy."""
    if controls.pitch_scale <= 0 or controls.energy_scale <= 0:
        raise InvalidInputError("prosody scales must be positive")
    return pitch_tokens * controls.pitch_scale, energy_tokens * controls.energy_scale


def synthesize(
    model: SpeechMotionModel,
    text: str,
    speaker: int,
    controls: Optional[ProsodyControls] = None,
    seed_durations: int = 0,
    seed_decoder: int = 1,
    nfe_joint: int = 100,
    nfe_duration: int = 10,
    durations_override=None,
    allow_untrained: bool = False,
) -> SynthesisResult:
    """tokenize -> encode -> prosody -> controls -> durations -> decode -> split.

    Fully deterministic given the two seeds. ``durations_override`` injects
    ground-truth durations, bypassing the stochastic duration predictor.
    """
    if int(model.trained_steps) == 0 and not allow_untrained:
        raise InvalidInputError(
            "model is untrained; pass allow_untrained=True to synthesize anyway"
        )
    token_ids = tokenlib.tokenize(text)
    if token_ids.size == 0:
        raise InvalidInputError("text is empty after normalization")
    spk = speaker_one_hot(speaker, model.config.n_speakers, model.dtype)
    controls = controls or ProsodyControls()
    with torch.no_grad():
        hidden, _ = model.encode_text(token_ids, spk)
        pitch, energy = model.predict_prosody(hidden, spk)
        pitch, energy = apply_controls(pitch, energy, controls)
        h_prosody = model.embed_prosody(hidden, pitch, energy)
        if durations_override is not None:
            durations = torch.as_tensor(np.asarray(durations_override), dtype=torch.long)
            if (durations < 1).any() or durations.shape[0] != token_ids.shape[0]:
                raise InvalidInputError("override durations must be >= 1, one per token")
        else:
            durations = model.sample_durations(
                h_prosody,
                spk,
                ODESolverConfig(nfe=nfe_duration, seed=seed_durations),
                torch.Generator().manual_seed(seed_durations),
            )
        regulated = length_regulate(h_prosody, durations)
        joint = model.decode_joint(
            regulated,
            spk,
            ODESolverConfig(nfe=nfe_joint, seed=seed_decoder),
            torch.Generator().manual_seed(seed_decoder),
        )
        joint = model.unstandardize_joint(joint)
    mel, motion = split_output(joint, model.config.n_mels)
    return SynthesisResult(
        mel=mel,
        motion=motion,
        durations=durations.cpu().numpy(),
        token_pitch=pitch.cpu().numpy(),
        token_energy=energy.cpu().numpy(),
        speaker=speaker,
        seed_durations=seed_durations,
        seed_decoder=seed_decoder,
        nfe_joint=nfe_joint,
        nfe_duration=nfe_duration,
    )


def export_result(result: SynthesisResult, directory) -> dict:
    """Write mel/motion as MTF/1, metadata as JSON, motion as delimited text.

    The motion text file has 46 comma-separated columns: time_s plus the 45
    exponential-map channels, one row per frame, for external visualizers.
    Returns the written paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "mel": directory / "mel.mtf",
        "motion": directory / "motion.mtf",
        "meta": directory / "result.json",
        "motion_csv": directory / "motion.csv",
    }
    tensorfile.save(paths["mel"], result.mel.frames)
    tensorfile.save(paths["motion"], result.motion.frames)
    meta = {
        "durations": result.durations.tolist(),
        "token_pitch": [float(v) for v in result.token_pitch],
        "token_energy": [float(v) for v in result.token_energy],
        "speaker": result.speaker,
        "seed_durations": result.seed_durations,
        "seed_decoder": result.seed_decoder,
        "nfe_joint": result.nfe_joint,
        "nfe_duration": result.nfe_duration,
        "frame_rate": result.mel.frame_rate,
    }
    with open(paths["meta"], "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(paths["motion_csv"], "w", encoding="utf-8", newline="\n") as f:
        fps = result.motion.fps
        for j, row in enumerate(result.motion.frames):
            cells = [f"{j / fps:.9f}"] + [f"{float(v):.9f}" for v in row]
            f.write(",".join(cells) + "\n")
    return {k: str(v) for k, v in paths.items()}
