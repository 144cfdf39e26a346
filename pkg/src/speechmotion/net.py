"""The joint synthesis network.

Text encoder with projected per-token averages, token-level pitch/energy
predictors with bucketed embeddings, a flow-matching duration predictor,
length regulation, and a 1-D convolutional U-Net decoder (transformer
bottleneck, three resolution levels) that samples mel and motion jointly.

Speaker identity is a one-hot vector concatenated to the inputs of the
encoder, prosody predictors, duration predictor, and decoder conditioning;
each injection point consumes it through a linear layer, so the parameter
cost of more speakers stays small.

A constructed model is safe for concurrent read-only inference; training
mutation requires exclusive access. Random streams are caller-supplied.
"""

import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tensorfile
from . import tokens as tokenlib
from .cfm import ODESolverConfig, euler_solve
from .errors import ConfigError, InvalidInputError
from .features import FRAME_RATE, MOTION_CHANNELS, MelSpectrogram, MotionSequence

TIME_EMB_DIM = 32

CHECKPOINT_FORMAT = "speechmotion-checkpoint-1"


@dataclass
class ModelConfig:
    vocab_size: int = tokenlib.VOCAB_SIZE
    hidden_dim: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 2
    prosody_width: int = 64
    duration_width: int = 64
    # The decoder field must reproduce all joint channels; keep this at or
    # above n_mels + motion_dim or it becomes an information bottleneck.
    decoder_channels: int = 128
    decoder_heads: int = 2
    n_buckets: int = 256
    n_mels: int = 80
    motion_dim: int = MOTION_CHANNELS
    n_speakers: int = 1
    sigma_min: float = 1e-4

    def __post_init__(self):
        if self.n_speakers < 1:
            raise ConfigError("n_speakers must be >= 1")
        if self.hidden_dim % 2 != 0:
            raise ConfigError("hidden_dim must be even (sinusoidal positions)")
        if self.n_buckets < 2:
            raise ConfigError("n_buckets must be >= 2")
        if not 0.0 <= self.sigma_min < 1.0:
            raise ConfigError("sigma_min must lie in [0, 1)")

    @property
    def joint_dim(self) -> int:
        return self.n_mels + self.motion_dim


class EncoderOutput(NamedTuple):
    hidden: torch.Tensor  # (..., T_t, d) last-layer states
    mu: torch.Tensor  # (..., T_t, joint_dim) projected average vectors


def speaker_one_hot(index: int, n_speakers: int, dtype=torch.float32) -> torch.Tensor:
    if not 0 <= index < n_speakers:
        raise InvalidInputError(f"speaker index {index} outside [0, {n_speakers})")
    vec = torch.zeros(n_speakers, dtype=dtype)
    vec[index] = 1.0
    return vec


def _check_one_hot(speaker: torch.Tensor) -> None:
    flat = speaker.reshape(-1, speaker.shape[-1])
    ones = (flat == 1.0).sum(dim=-1)
    zeros = (flat == 0.0).sum(dim=-1)
    if not ((ones == 1) & (zeros == flat.shape[-1] - 1)).all():
        raise InvalidInputError("speaker vector must be one-hot")


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) scalars in [0, 1] -> (B, dim) sin/cos features."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=t.dtype, device=t.device)
        * (-math.log(10000.0) / half)
    )
    args = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def positional_encoding(length: int, dim: int, dtype, device) -> torch.Tensor:
    position = torch.arange(length, dtype=dtype, device=device)[:, None]
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=dtype, device=device) * (-math.log(10000.0) / dim)
    )
    pe = torch.zeros(length, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)
    return pe


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, T); statistics ignore time."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ResBlock1d(nn.Module):
    def __init__(self, channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = ChannelNorm(channels)
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.t_proj = nn.Linear(temb_dim, channels)
        self.norm2 = ChannelNorm(channels)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(temb)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ProsodyPredictor(nn.Module):
    """Token-level scalar regressor (variance-adaptor style conv stack)."""

    def __init__(self, hidden_dim: int, n_speakers: int, width: int):
        super().__init__()
        self.in_proj = nn.Linear(hidden_dim + n_speakers, width)
        self.conv1 = nn.Conv1d(width, width, 3, padding=1)
        self.ln1 = nn.LayerNorm(width)
        self.conv2 = nn.Conv1d(width, width, 3, padding=1)
        self.ln2 = nn.LayerNorm(width)
        self.out = nn.Linear(width, 1)

    def forward(self, hidden, speaker, mask=None):
        spk = speaker[:, None, :].expand(-1, hidden.shape[1], -1)
        h = self.in_proj(torch.cat([hidden, spk], dim=-1))
        if mask is not None:
            h = h * mask[..., None].to(h.dtype)
        h = self.ln1(F.silu(self.conv1(h.transpose(1, 2)).transpose(1, 2)))
        h = self.ln2(F.silu(self.conv2(h.transpose(1, 2)).transpose(1, 2)))
        return self.out(h).squeeze(-1)


class DurationField(nn.Module):
    """Vector field over per-token duration scalars in log(1+d) space."""

    def __init__(self, width: int):
        super().__init__()
        self.in_proj = nn.Linear(1 + width, width)
        self.t_mlp = nn.Sequential(
            nn.Linear(TIME_EMB_DIM, width), nn.SiLU(), nn.Linear(width, width)
        )
        self.conv1 = nn.Conv1d(width, width, 3, padding=1)
        self.conv2 = nn.Conv1d(width, width, 3, padding=1)
        self.out = nn.Linear(width, 1)

    def forward(self, x, t, cond, mask=None):
        if t.ndim == 0:
            t = t.reshape(1).expand(x.shape[0])
        else:
            t = t.reshape(x.shape[0])
        h = self.in_proj(torch.cat([x, cond], dim=-1))
        h = h + self.t_mlp(sinusoidal_embedding(t, TIME_EMB_DIM))[:, None, :]
        if mask is not None:
            h = h * mask[..., None].to(h.dtype)
        h = F.silu(self.conv1(h.transpose(1, 2)))
        h = F.silu(self.conv2(h)).transpose(1, 2)
        return self.out(h)


class DecoderUNet(nn.Module):
    """1-D conv U-Net over frames with a transformer bottleneck; 3 levels."""

    def __init__(self, joint_dim: int, cond_dim: int, channels: int, heads: int):
        super().__init__()
        c = channels
        self.in_proj = nn.Linear(joint_dim + cond_dim, c)
        self.t_mlp = nn.Sequential(
            nn.Linear(TIME_EMB_DIM, c), nn.SiLU(), nn.Linear(c, c)
        )
        self.res_down1 = ResBlock1d(c, c)
        self.down1 = nn.Conv1d(c, c, 4, stride=2, padding=1)
        self.res_down2 = ResBlock1d(c, c)
        self.down2 = nn.Conv1d(c, c, 4, stride=2, padding=1)
        self.res_mid = ResBlock1d(c, c)
        self.bottleneck = nn.TransformerEncoderLayer(
            c, heads, dim_feedforward=2 * c, dropout=0.0, activation="gelu",
            batch_first=True, norm_first=True,
        )
        self.up2 = nn.ConvTranspose1d(c, c, 4, stride=2, padding=1)
        self.merge2 = nn.Conv1d(2 * c, c, 3, padding=1)
        self.res_up2 = ResBlock1d(c, c)
        self.up1 = nn.ConvTranspose1d(c, c, 4, stride=2, padding=1)
        self.merge1 = nn.Conv1d(2 * c, c, 3, padding=1)
        self.res_up1 = ResBlock1d(c, c)
        self.out_norm = ChannelNorm(c)
        self.out_proj = nn.Linear(c, joint_dim)

    def forward(self, x, t, cond, frame_mask=None):
        n_frames = x.shape[1]
        if t.ndim == 0:
            t = t.reshape(1).expand(x.shape[0])
        else:
            t = t.reshape(x.shape[0])
        temb = self.t_mlp(sinusoidal_embedding(t, TIME_EMB_DIM))
        h = self.in_proj(torch.cat([x, cond], dim=-1)).transpose(1, 2)  # (B, C, T)
        if frame_mask is not None:
            h = h * frame_mask[:, None, :].to(h.dtype)
        pad = (-n_frames) % 4
        if pad:
            h = F.pad(h, (0, pad))
        d1 = self.res_down1(h, temb)
        d2 = self.res_down2(self.down1(d1), temb)
        m = self.res_mid(self.down2(d2), temb)
        kpm = None
        if frame_mask is not None:
            valid = F.pad(frame_mask, (0, pad), value=False)
            kpm = ~valid[:, ::4]
        m = self.bottleneck(m.transpose(1, 2), src_key_padding_mask=kpm).transpose(1, 2)
        u2 = self.res_up2(self.merge2(torch.cat([self.up2(m), d2], dim=1)), temb)
        u1 = self.res_up1(self.merge1(torch.cat([self.up1(u2), d1], dim=1)), temb)
        out = self.out_proj(F.silu(self.out_norm(u1)).transpose(1, 2))
        return out[:, :n_frames]


class SpeechMotionModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, s = config.hidden_dim, config.n_speakers
        self.token_emb = nn.Embedding(config.vocab_size, d, padding_idx=tokenlib.PAD_ID)
        self.encoder_in = nn.Linear(d + s, d)
        self.encoder_layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d, config.encoder_heads, dim_feedforward=2 * d, dropout=0.0,
                activation="gelu", batch_first=True, norm_first=True,
            )
            for _ in range(config.encoder_layers)
        )
        self.mu_proj = nn.Linear(d, config.joint_dim)
        self.pitch_predictor = ProsodyPredictor(d, s, config.prosody_width)
        self.energy_predictor = ProsodyPredictor(d, s, config.prosody_width)
        self.pitch_emb = nn.Embedding(config.n_buckets, d)
        self.energy_emb = nn.Embedding(config.n_buckets, d)
        self.duration_cond = nn.Linear(d + s, config.duration_width)
        self.duration_field = DurationField(config.duration_width)
        self.decoder_cond = nn.Linear(d + s, d)
        self.decoder = DecoderUNet(
            config.joint_dim, d, config.decoder_channels, config.decoder_heads
        )
        # Standardization and bucket state, fitted at training start.
        self.register_buffer("joint_mean", torch.zeros(config.joint_dim))
        self.register_buffer("joint_std", torch.ones(config.joint_dim))
        self.register_buffer("pitch_stats", torch.tensor([0.0, 1.0]))
        self.register_buffer("energy_stats", torch.tensor([0.0, 1.0]))
        self.register_buffer(
            "pitch_edges",
            torch.linspace(math.log(60.0), math.log(400.0), config.n_buckets - 1),
        )
        self.register_buffer(
            "energy_edges", torch.linspace(0.0, 10.0, config.n_buckets - 1)
        )
        self.register_buffer("trained_steps", torch.zeros((), dtype=torch.long))

    # ---- helpers ----------------------------------------------------------

    @property
    def dtype(self):
        return self.mu_proj.weight.dtype

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def standardize_joint(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.joint_mean) / self.joint_std

    def unstandardize_joint(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.joint_std + self.joint_mean

    @staticmethod
    def _batched(x: torch.Tensor, ndim: int):
        if x.ndim == ndim - 1:
            return x[None], True
        if x.ndim == ndim:
            return x, False
        raise InvalidInputError(f"expected {ndim - 1}-D or {ndim}-D tensor, got {x.ndim}-D")

    # ---- encoder -----------------------------------------------------------

    def encode_text(self, token_ids, speaker, token_mask=None) -> EncoderOutput:
        """Hidden states and projected average vectors for a token sequence.

        Accepts (T_t,) ids with an (S,) one-hot, or batched (B, T_t)/(B, S)
        with an optional (B, T_t) validity mask.
        """
        if not torch.is_tensor(token_ids):
            token_ids = torch.as_tensor(np.asarray(token_ids), dtype=torch.long)
        tokens, squeeze = self._batched(token_ids, 2)
        if tokens.numel() == 0:
            raise InvalidInputError("empty token sequence")
        if ((tokens < 0) | (tokens >= self.config.vocab_size)).any():
            raise InvalidInputError("token id outside vocabulary")
        speaker, _ = self._batched(speaker.to(self.dtype), 2)
        _check_one_hot(speaker)
        if token_mask is None:
            mask = tokens != tokenlib.PAD_ID
        else:
            mask, _ = self._batched(token_mask, 2)
        n_tok = tokens.shape[1]
        emb = self.token_emb(tokens)
        spk = speaker[:, None, :].expand(-1, n_tok, -1)
        h = self.encoder_in(torch.cat([emb, spk], dim=-1))
        h = h + positional_encoding(n_tok, h.shape[-1], h.dtype, h.device)
        pad_mask = ~mask
        for layer in self.encoder_layers:
            h = layer(h, src_key_padding_mask=pad_mask)
        h = h * mask[..., None].to(h.dtype)
        mu = self.mu_proj(h)
        if squeeze:
            return EncoderOutput(h[0], mu[0])
        return EncoderOutput(h, mu)

    # ---- prosody -----------------------------------------------------------

    def predict_prosody(self, hidden, speaker, token_mask=None):
        """Per-token pitch (Hz) and energy in raw units.

        The regressors operate in standardized space; corpus statistics in
        the model buffers map the outputs back to raw units.
        """
        h, squeeze = self._batched(hidden, 3)
        speaker, _ = self._batched(speaker.to(h.dtype), 2)
        mask = None
        if token_mask is not None:
            mask, _ = self._batched(token_mask, 2)
        pitch = self.pitch_stats[0] + self.pitch_stats[1] * self.pitch_predictor(
            h, speaker, mask
        )
        energy = self.energy_stats[0] + self.energy_stats[1] * self.energy_predictor(
            h, speaker, mask
        )
        if squeeze:
            return pitch[0], energy[0]
        return pitch, energy

    def embed_prosody(self, hidden, pitch_hz, energy):
        """Add bucketed pitch/energy embeddings to the encoder output.

        Pitch is bucketed in log-Hz, energy on a linear scale; a value equal
        to a boundary lands in the upper bucket.
        """
        h, squeeze = self._batched(hidden, 3)
        pitch_hz, _ = self._batched(torch.as_tensor(pitch_hz, dtype=h.dtype), 2)
        energy, _ = self._batched(torch.as_tensor(energy, dtype=h.dtype), 2)
        log_pitch = torch.log(pitch_hz.detach().clamp_min(1e-3))
        p_idx = torch.bucketize(log_pitch, self.pitch_edges, right=True)
        e_idx = torch.bucketize(energy.detach(), self.energy_edges, right=True)
        out = h + self.pitch_emb(p_idx) + self.energy_emb(e_idx)
        if squeeze:
            return out[0]
        return out

    # ---- durations ---------------------------------------------------------

    def duration_condition(self, hidden_prosody, speaker):
        h, squeeze = self._batched(hidden_prosody, 3)
        speaker, _ = self._batched(speaker.to(h.dtype), 2)
        spk = speaker[:, None, :].expand(-1, h.shape[1], -1)
        cond = self.duration_cond(torch.cat([h, spk], dim=-1))
        return cond[0] if squeeze else cond

    @torch.no_grad()
    def sample_durations(
        self,
        hidden_prosody,
        speaker,
        solver: Optional[ODESolverConfig] = None,
        generator: Optional[torch.Generator] = None,
        token_mask=None,
    ):
        """Draw integer durations from the flow in log(1+d) space.

        expm1, clamp at 0, round, then floor at one frame per token.
        """
        solver = solver or ODESolverConfig(nfe=10)
        h, squeeze = self._batched(hidden_prosody, 3)
        speaker_b, _ = self._batched(speaker.to(h.dtype), 2)
        mask = None
        if token_mask is not None:
            mask, _ = self._batched(token_mask, 2)
        if generator is None:
            generator = torch.Generator().manual_seed(solver.seed)
        cond = self.duration_condition(h, speaker_b)
        x0 = torch.randn(
            (h.shape[0], h.shape[1], 1), generator=generator, dtype=h.dtype
        )
        x1 = euler_solve(
            lambda x, t, c: self.duration_field(x, t, c, mask), x0, cond, solver
        )
        dur = torch.expm1(x1.squeeze(-1)).clamp_min(0.0).round().clamp_min(1.0).long()
        if mask is not None:
            dur = dur * mask.long()
        return dur[0] if squeeze else dur

    # ---- decoder -----------------------------------------------------------

    def decoder_condition(self, regulated, speaker):
        r, squeeze = self._batched(regulated, 3)
        speaker, _ = self._batched(speaker.to(r.dtype), 2)
        spk = speaker[:, None, :].expand(-1, r.shape[1], -1)
        cond = self.decoder_cond(torch.cat([r, spk], dim=-1))
        return cond[0] if squeeze else cond

    @torch.no_grad()
    def decode_joint(
        self,
        regulated,
        speaker,
        solver: Optional[ODESolverConfig] = None,
        generator: Optional[torch.Generator] = None,
        frame_mask=None,
    ):
        """Sample standardized joint frames by integrating the decoder field."""
        solver = solver or ODESolverConfig(nfe=100)
        r, squeeze = self._batched(regulated, 3)
        speaker_b, _ = self._batched(speaker.to(r.dtype), 2)
        mask = None
        if frame_mask is not None:
            mask, _ = self._batched(frame_mask, 2)
        if generator is None:
            generator = torch.Generator().manual_seed(solver.seed)
        cond = self.decoder_condition(r, speaker_b)
        x0 = torch.randn(
            (r.shape[0], r.shape[1], self.config.joint_dim),
            generator=generator,
            dtype=r.dtype,
        )
        out = euler_solve(
            lambda x, t, c: self.decoder(x, t, c, mask), x0, cond, solver
        )
        return out[0] if squeeze else out


def length_regulate(hidden: torch.Tensor, durations) -> torch.Tensor:
    """Repeat token row i durations[i] times, in order."""
    if not torch.is_tensor(durations):
        durations = torch.as_tensor(np.asarray(durations), dtype=torch.long)
    if hidden.ndim != 2 or durations.ndim != 1 or durations.shape[0] != hidden.shape[0]:
        raise InvalidInputError("expected (T_t, d) hidden and matching (T_t,) durations")
    if (durations < 1).any():
        raise InvalidInputError("durations must all be >= 1")
    return torch.repeat_interleave(hidden, durations, dim=0)


def split_output(joint, n_mels: int = 80):
    """Split joint frames into a MelSpectrogram and a 45-channel MotionSequence."""
    arr = joint.detach().cpu().numpy() if torch.is_tensor(joint) else np.asarray(joint)
    if arr.ndim != 2 or arr.shape[1] != n_mels + MOTION_CHANNELS:
        raise InvalidInputError(
            f"joint width must be n_mels + {MOTION_CHANNELS} = {n_mels + MOTION_CHANNELS}"
        )
    mel = MelSpectrogram(arr[:, :n_mels].astype(np.float32), FRAME_RATE)
    motion = MotionSequence(arr[:, n_mels:].astype(np.float32), FRAME_RATE)
    return mel, motion


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(model: SpeechMotionModel, path, step: int = 0) -> None:
    """One file: a JSON manifest line, then MTF/1 records in manifest order."""
    state = model.state_dict()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "step": step,
        "tensors": [
            {"name": name, "shape": list(tensor.shape)} for name, tensor in state.items()
        ],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for tensor in state.values():
            tensorfile.write_tensor(f, tensor.detach().cpu().numpy())


def load_checkpoint(path):
    """Rebuild the model; shapes are validated against the manifest and config."""
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode("utf-8"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInputError(f"not a model checkpoint: {path}")
        config = ModelConfig(**manifest["config"])
        model = SpeechMotionModel(config)
        state = model.state_dict()
        for entry in manifest["tensors"]:
            name = entry["name"]
            if name not in state:
                raise InvalidInputError(f"unknown tensor {name!r} in checkpoint")
            arr = tensorfile.read_tensor(f)
            target_shape = tuple(state[name].shape)
            if tuple(arr.shape) != target_shape and target_shape != ():
                raise InvalidInputError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {target_shape}"
                )
            if target_shape == ():
                state[name] = torch.as_tensor(arr.reshape(()).item(), dtype=state[name].dtype)
            else:
                state[name] = torch.as_tensor(arr, dtype=state[name].dtype)
        model.load_state_dict(state)
    return model, int(manifest["step"])
