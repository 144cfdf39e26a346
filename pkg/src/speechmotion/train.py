"""Loss assembly, the optimization loop, standardization, and gradient checks.

The loop is single-threaded over optimizer state; upstream feature
extraction is pure per utterance and may run concurrently.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import align, datapipe, features, tensorfile, tokens as tokenlib
from .cfm import cfm_loss, make_flow_sample
from .errors import ConfigError, InvalidInputError, NumericalFailureError
from .net import ModelConfig, SpeechMotionModel, length_regulate, save_checkpoint, speaker_one_hot

LOSS_NAMES = ("cfm", "duration", "pitch", "energy", "prior")


@dataclass
class LossWeights:
    cfm: float = 1.0
    duration: float = 1.0
    pitch: float = 1.0
    energy: float = 1.0
    prior: float = 1.0

    def __post_init__(self):
        for name in LOSS_NAMES:
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    pretrain_steps: int = 0
    finetune_steps: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class Standardizer:
    """Per-channel statistics for the joint features plus prosody statistics.

    Also carries the bucket boundaries (linear between the per-corpus min and
    max; log-Hz for pitch) computed at training start.
    """

    joint_mean: np.ndarray
    joint_std: np.ndarray
    pitch_mean: float
    pitch_std: float
    energy_mean: float
    energy_std: float
    pitch_edges: np.ndarray
    energy_edges: np.ndarray

    @classmethod
    def fit(cls, corpus: Sequence[features.FeatureBundle], n_buckets: int) -> "Standardizer":
        if not corpus:
            raise ConfigError("cannot fit a standardizer on an empty corpus")
        joint = np.concatenate(
            [np.concatenate([b.mel.frames, b.motion.frames], axis=1) for b in corpus]
        ).astype(np.float64)
        pitch = np.concatenate([b.pitch.values for b in corpus])
        energy = np.concatenate([b.energy.values for b in corpus])
        joint_std = joint.std(axis=0)
        zero = np.flatnonzero(joint_std <= 0)
        if zero.size:
            raise ConfigError(f"zero variance in joint channel(s) {zero.tolist()[:8]}")
        pitch_std = float(pitch.std())
        energy_std = float(energy.std())
        if pitch_std <= 0 or energy_std <= 0:
            raise ConfigError("pitch/energy statistics have zero variance")
        return cls(
            joint_mean=joint.mean(axis=0),
            joint_std=joint_std,
            pitch_mean=float(pitch.mean()),
            pitch_std=pitch_std,
            energy_mean=float(energy.mean()),
            energy_std=energy_std,
            pitch_edges=_linear_edges(
                np.log(max(pitch.min(), 1e-3)), np.log(max(pitch.max(), 2e-3)), n_buckets
            ),
            energy_edges=_linear_edges(energy.min(), energy.max(), n_buckets),
        )

    def apply(self, model: SpeechMotionModel) -> None:
        dtype = model.dtype
        model.joint_mean.copy_(torch.as_tensor(self.joint_mean, dtype=dtype))
        model.joint_std.copy_(torch.as_tensor(self.joint_std, dtype=dtype))
        model.pitch_stats.copy_(
            torch.tensor([self.pitch_mean, self.pitch_std], dtype=dtype)
        )
        model.energy_stats.copy_(
            torch.tensor([self.energy_mean, self.energy_std], dtype=dtype)
        )
        model.pitch_edges.copy_(torch.as_tensor(self.pitch_edges, dtype=dtype))
        model.energy_edges.copy_(torch.as_tensor(self.energy_edges, dtype=dtype))


def _linear_edges(lo: float, hi: float, n_buckets: int) -> np.ndarray:
    if hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    return np.linspace(lo, hi, n_buckets - 1)


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, T_t) long, PAD_ID padded
    token_mask: torch.Tensor  # (B, T_t) bool
    joint: torch.Tensor  # (B, T_f, joint_dim) raw units
    frame_mask: torch.Tensor  # (B, T_f) bool
    pitch: torch.Tensor  # (B, T_f) interpolated Hz
    energy: torch.Tensor  # (B, T_f)
    speakers: torch.Tensor  # (B, S) one-hot
    n_tokens: torch.Tensor  # (B,) long
    n_frames: torch.Tensor  # (B,) long


def collate(bundles: Sequence[features.FeatureBundle], model: SpeechMotionModel) -> Batch:
    if not bundles:
        raise InvalidInputError("empty batch")
    dtype = model.dtype
    n_spk = model.config.n_speakers
    max_t = max(b.n_tokens for b in bundles)
    max_f = max(b.n_frames for b in bundles)
    batch = len(bundles)
    tokens = torch.full((batch, max_t), tokenlib.PAD_ID, dtype=torch.long)
    token_mask = torch.zeros(batch, max_t, dtype=torch.bool)
    joint = torch.zeros(batch, max_f, model.config.joint_dim, dtype=dtype)
    frame_mask = torch.zeros(batch, max_f, dtype=torch.bool)
    pitch = torch.zeros(batch, max_f, dtype=dtype)
    energy = torch.zeros(batch, max_f, dtype=dtype)
    speakers = torch.zeros(batch, n_spk, dtype=dtype)
    for i, b in enumerate(bundles):
        if b.n_tokens > b.n_frames:
            raise InvalidInputError(f"utterance has more tokens ({b.n_tokens}) than frames")
        tokens[i, : b.n_tokens] = torch.as_tensor(b.tokens)
        token_mask[i, : b.n_tokens] = True
        stacked = np.concatenate([b.mel.frames, b.motion.frames], axis=1)
        joint[i, : b.n_frames] = torch.as_tensor(stacked, dtype=dtype)
        frame_mask[i, : b.n_frames] = True
        pitch[i, : b.n_frames] = torch.as_tensor(b.pitch.values, dtype=dtype)
        energy[i, : b.n_frames] = torch.as_tensor(b.energy.values, dtype=dtype)
        speakers[i] = speaker_one_hot(b.speaker, n_spk, dtype)
    return Batch(
        tokens=tokens,
        token_mask=token_mask,
        joint=joint,
        frame_mask=frame_mask,
        pitch=pitch,
        energy=energy,
        speakers=speakers,
        n_tokens=torch.as_tensor([b.n_tokens for b in bundles]),
        n_frames=torch.as_tensor([b.n_frames for b in bundles]),
    )


def mas_durations_for_batch(model, batch, mu, z) -> list[np.ndarray]:
    """Alignment durations from the current projected averages, per item."""
    if not torch.isfinite(mu).all():
        raise NumericalFailureError(
            "non-finite projected averages entering alignment", stage="alignment"
        )
    out = []
    for i in range(batch.tokens.shape[0]):
        n_t = int(batch.n_tokens[i])
        n_f = int(batch.n_frames[i])
        ll = align.loglik_matrix(
            mu[i, :n_t].detach().cpu().numpy().astype(np.float64),
            z[i, :n_f].detach().cpu().numpy().astype(np.float64),
        )
        out.append(align.mas(ll).durations)
    return out


def compute_losses(
    model: SpeechMotionModel,
    batch: Batch,
    config: TrainConfig,
    generator: torch.Generator,
    durations_override: Optional[list[np.ndarray]] = None,
):
    """All five component losses for one batch.

    The duration targets and the prior loss share one alignment computed from
    the current model's projected averages (on detached likelihoods), unless
    an override is supplied. Returns (losses dict, durations list).
    """
    sigma_min = model.config.sigma_min
    hidden, mu = model.encode_text(batch.tokens, batch.speakers, batch.token_mask)
    z = model.standardize_joint(batch.joint)

    durations = durations_override or mas_durations_for_batch(model, batch, mu, z)

    # Prior loss: mean over all valid frames in the batch.
    total_nll = 0.0
    total_frames = 0
    for i, dur in enumerate(durations):
        n_t, n_f = int(batch.n_tokens[i]), int(batch.n_frames[i])
        item = align.prior_loss(align.Alignment(dur), mu[i, :n_t], z[i, :n_f])
        total_nll = total_nll + item * n_f
        total_frames += n_f
    prior = total_nll / total_frames

    # Token-level prosody targets from the same alignment.
    max_t = batch.tokens.shape[1]
    tgt_pitch = torch.zeros(batch.tokens.shape, dtype=hidden.dtype)
    tgt_energy = torch.zeros(batch.tokens.shape, dtype=hidden.dtype)
    for i, dur in enumerate(durations):
        n_t, n_f = int(batch.n_tokens[i]), int(batch.n_frames[i])
        tgt_pitch[i, :n_t] = torch.as_tensor(
            features.token_average(batch.pitch[i, :n_f].cpu().numpy(), dur),
            dtype=tgt_pitch.dtype,
        )
        tgt_energy[i, :n_t] = torch.as_tensor(
            features.token_average(batch.energy[i, :n_f].cpu().numpy(), dur),
            dtype=tgt_energy.dtype,
        )

    pred_pitch, pred_energy = model.predict_prosody(hidden, batch.speakers, batch.token_mask)
    tok_mask = batch.token_mask.to(hidden.dtype)
    n_tok = tok_mask.sum()
    pitch_loss = (
        ((pred_pitch - tgt_pitch) / model.pitch_stats[1]) ** 2 * tok_mask
    ).sum() / n_tok
    energy_loss = (
        ((pred_energy - tgt_energy) / model.energy_stats[1]) ** 2 * tok_mask
    ).sum() / n_tok

    # Ground-truth prosody conditions the rest of the step (teacher forcing).
    h_prosody = model.embed_prosody(hidden, tgt_pitch, tgt_energy)

    # Duration flow loss in log(1 + d) space.
    dur_padded = torch.zeros(batch.tokens.shape, dtype=hidden.dtype)
    for i, dur in enumerate(durations):
        dur_padded[i, : len(dur)] = torch.as_tensor(dur, dtype=hidden.dtype)
    x1_dur = torch.log1p(dur_padded)[..., None]
    dur_cond = model.duration_condition(h_prosody, batch.speakers)
    dur_sample = make_flow_sample(x1_dur, generator, sigma_min=sigma_min)
    duration_loss = cfm_loss(
        lambda x, t, c: model.duration_field(x, t, c, batch.token_mask),
        dur_sample,
        dur_cond,
        batch.token_mask,
    )

    # Joint decoder flow loss on frame-level conditioning.
    max_f = batch.joint.shape[1]
    regulated = torch.zeros(
        len(durations), max_f, model.config.hidden_dim, dtype=hidden.dtype
    )
    for i, dur in enumerate(durations):
        n_t = int(batch.n_tokens[i])
        reg = length_regulate(h_prosody[i, :n_t], torch.as_tensor(dur))
        regulated[i, : reg.shape[0]] = reg
    dec_cond = model.decoder_condition(regulated, batch.speakers)
    joint_sample = make_flow_sample(z, generator, sigma_min=sigma_min)
    joint_loss = cfm_loss(
        lambda x, t, c: model.decoder(x, t, c, batch.frame_mask),
        joint_sample,
        dec_cond,
        batch.frame_mask,
    )

    losses = {
        "cfm": joint_loss,
        "duration": duration_loss,
        "pitch": pitch_loss,
        "energy": energy_loss,
        "prior": prior,
    }
    w = config.weights
    losses["total"] = sum(getattr(w, name) * losses[name] for name in LOSS_NAMES)
    return losses, durations


def training_step(
    model: SpeechMotionModel,
    batch: Batch,
    config: TrainConfig,
    optimizer: torch.optim.Optimizer,
    generator: Optional[torch.Generator] = None,
) -> dict:
    """One optimizer update; returns the component losses as floats."""
    if generator is None:
        generator = torch.Generator().manual_seed(config.seed)
    losses, _ = compute_losses(model, batch, config, generator)
    for name in LOSS_NAMES + ("total",):
        if not torch.isfinite(losses[name]):
            raise NumericalFailureError(
                f"non-finite {name} loss in training step", stage=f"loss:{name}"
            )
    optimizer.zero_grad()
    losses["total"].backward()
    optimizer.step()
    return {name: float(losses[name].detach()) for name in ("total",) + LOSS_NAMES}


def make_optimizer(model: SpeechMotionModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate)


def _mix_seed(seed: int, stage: str, step: int) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}:{step}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def _pick_batch(corpus, batch_size: int, generator: torch.Generator):
    if batch_size >= len(corpus):
        return list(corpus)
    idx = torch.randperm(len(corpus), generator=generator)[:batch_size]
    return [corpus[int(i)] for i in idx]


def run_schedule(
    model: SpeechMotionModel,
    pretrain_corpus: Sequence[features.FeatureBundle],
    finetune_corpus: Sequence[features.FeatureBundle],
    config: TrainConfig,
    checkpoint_dir=None,
) -> list[dict]:
    """Pretrain stage then fine-tune stage; returns one metrics record per step.

    Per-step RNG is derived from (seed, stage, step-within-stage), so a
    fine-tune stage sees identical draws whether or not pretraining ran.
    """
    stages = [
        ("pretrain", pretrain_corpus, config.pretrain_steps),
        ("finetune", finetune_corpus, config.finetune_steps),
    ]
    for stage, corpus, steps in stages:
        if steps > 0 and not corpus:
            raise ConfigError(f"{stage} stage has steps but an empty corpus")
        for b in corpus or []:
            if not 0 <= b.speaker < model.config.n_speakers:
                raise ConfigError(
                    f"speaker {b.speaker} outside model range {model.config.n_speakers}"
                )
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, config)
    metrics: list[dict] = []
    global_step = 0
    t0 = time.monotonic()
    for stage, corpus, steps in stages:
        for local_step in range(steps):
            gen = torch.Generator().manual_seed(_mix_seed(config.seed, stage, local_step))
            batch = collate(_pick_batch(corpus, config.batch_size, gen), model)
            report = training_step(model, batch, config, optimizer, gen)
            global_step += 1
            record = {"step": global_step, "stage": stage}
            record.update(report)
            record["wall_time"] = time.monotonic() - t0
            metrics.append(record)
            if (
                checkpoint_dir is not None
                and config.checkpoint_every > 0
                and global_step % config.checkpoint_every == 0
            ):
                save_checkpoint(
                    model, checkpoint_dir / f"checkpoint_{global_step:06d}.ckpt", global_step
                )
    with torch.no_grad():
        model.trained_steps += global_step
    return metrics


def write_metrics(metrics: list[dict], path) -> None:
    """Append-only metrics log: one JSON record per line."""
    with open(path, "w", encoding="utf-8") as f:
        for record in metrics:
            f.write(json.dumps(record, sort_keys=True) + "\n")


# ---- gradient checking -----------------------------------------------------


def max_grad_rel_error(loss_fn, parameters, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic (re-seed internally). The relative
    error per element is |a - f| / max(|a|, |f|, 1e-3); the floor keeps
    finite-difference noise on near-zero gradients from dominating.
    """
    params = [p for p in parameters if p.requires_grad]
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g_ref in zip(params, analytic):
            flat = p.reshape(-1)
            g_flat = g_ref.reshape(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
                fd = (up - down) / (2.0 * eps)
                a = float(g_flat[idx])
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
                worst = max(worst, rel)
    return worst


def synthetic_batch(model: SpeechMotionModel, seed: int = 0) -> Batch:
    """Small random batch matching the model's dimensions (for gradient checks)."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    bundles_tokens = [rng.integers(2, cfg.vocab_size, size=3), rng.integers(2, cfg.vocab_size, size=4)]
    n_frames = [7, 9]
    dtype = model.dtype
    batch = len(bundles_tokens)
    max_t = max(len(t) for t in bundles_tokens)
    max_f = max(n_frames)
    tokens = torch.full((batch, max_t), tokenlib.PAD_ID, dtype=torch.long)
    token_mask = torch.zeros(batch, max_t, dtype=torch.bool)
    joint = torch.zeros(batch, max_f, cfg.joint_dim, dtype=dtype)
    frame_mask = torch.zeros(batch, max_f, dtype=torch.bool)
    pitch = torch.zeros(batch, max_f, dtype=dtype)
    energy = torch.zeros(batch, max_f, dtype=dtype)
    speakers = torch.zeros(batch, cfg.n_speakers, dtype=dtype)
    for i, tok in enumerate(bundles_tokens):
        tokens[i, : len(tok)] = torch.as_tensor(tok)
        token_mask[i, : len(tok)] = True
        joint[i, : n_frames[i]] = torch.as_tensor(
            rng.standard_normal((n_frames[i], cfg.joint_dim)), dtype=dtype
        )
        frame_mask[i, : n_frames[i]] = True
        # Scales as if the corpus statistics were already applied.
        pitch[i, : n_frames[i]] = torch.as_tensor(
            0.5 + rng.random(n_frames[i]), dtype=dtype
        )
        energy[i, : n_frames[i]] = torch.as_tensor(rng.random(n_frames[i]), dtype=dtype)
        speakers[i] = speaker_one_hot(i % cfg.n_speakers, cfg.n_speakers, dtype)
    return Batch(
        tokens=tokens,
        token_mask=token_mask,
        joint=joint,
        frame_mask=frame_mask,
        pitch=pitch,
        energy=energy,
        speakers=speakers,
        n_tokens=torch.as_tensor([len(t) for t in bundles_tokens]),
        n_frames=torch.as_tensor(n_frames),
    )


def check_gradients(
    model: SpeechMotionModel,
    eps: float = 1e-5,
    batch: Optional[Batch] = None,
    config: Optional[TrainConfig] = None,
    seed: int = 0,
) -> float:
    """Compare analytic total-loss gradients against central finite differences.

    Converts the model to double precision in place. The alignment is
    computed once and held fixed across evaluations, matching what the
    analytic gradient differentiates (alignment runs on detached
    likelihoods).
    """
    model.double()
    config = config or TrainConfig()
    if batch is None:
        batch = synthetic_batch(model, seed)
    else:
        batch = Batch(**{
            k: (v.double() if torch.is_tensor(v) and v.is_floating_point() else v)
            for k, v in vars(batch).items()
        })
    gen = torch.Generator().manual_seed(seed + 1)
    _, durations = compute_losses(model, batch, config, gen)

    def loss_fn():
        g = torch.Generator().manual_seed(seed + 1)
        losses, _ = compute_losses(model, batch, config, g, durations_override=durations)
        return losses["total"]

    return max_grad_rel_error(loss_fn, model.parameters(), eps)


# ---- corpus loading --------------------------------------------------------


def load_corpus(
    manifest_path,
    audio_config: Optional[features.AudioConfig] = None,
    speaker_map: Optional[dict[str, int]] = None,
    fixed_speaker: Optional[int] = None,
) -> list[features.FeatureBundle]:
    """Build FeatureBundles from a pipeline manifest's retained records.

    ``speaker_map`` assigns one-hot indices per voice (defaults to sorted
    order of appearance); ``fixed_speaker`` overrides it, which is how a
    fine-tune corpus is pinned to a reserved index.
    """
    audio_config = audio_config or features.AudioConfig()
    manifest_path = Path(manifest_path)
    records = [r for r in datapipe.read_manifest(manifest_path) if r.status == datapipe.Status.OK]
    if speaker_map is None and fixed_speaker is None:
        speaker_map = {v: i for i, v in enumerate(sorted({r.voice for r in records}))}
    bundles = []
    base = manifest_path.parent
    for record in records:
        waveform, sample_rate = datapipe.read_wav(base / record.audio_path)
        motion = features.MotionSequence(
            tensorfile.load(base / record.gesture_path), record.motion_fps
        )
        token_ids = tokenlib.tokenize(record.asr_text)
        if token_ids.size == 0:
            continue
        speaker = fixed_speaker if fixed_speaker is not None else speaker_map[record.voice]
        bundles.append(
            features.build_bundle(
                waveform, sample_rate, motion, token_ids, speaker, audio_config
            )
        )
    return bundles
