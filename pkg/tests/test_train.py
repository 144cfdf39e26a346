import numpy as np
import pytest
import torch

from speechmotion import align, features, net, train
from speechmotion.errors import ConfigError, NumericalFailureError


def make_batch(model, seed=0):
    return train.synthetic_batch(model, seed=seed)


def losses_for(model, batch, config, seed=1, override=None):
    gen = torch.Generator().manual_seed(seed)
    losses, durations = train.compute_losses(model, batch, config, gen, override)
    return losses, durations


# ---- loss weighting and determinism ----


def test_zero_weights_isolate_each_component(tiny_model):
    batch = make_batch(tiny_model)
    for name in train.LOSS_NAMES:
        weights = {n: 0.0 for n in train.LOSS_NAMES}
        weights[name] = 1.0
        config = train.TrainConfig(weights=train.LossWeights(**weights))
        losses, _ = losses_for(tiny_model, batch, config)
        assert float(losses["total"]) == float(losses[name]), name


def test_same_batch_same_seed_same_losses(tiny_model):
    batch = make_batch(tiny_model)
    config = train.TrainConfig()
    a, _ = losses_for(tiny_model, batch, config, seed=42)
    b, _ = losses_for(tiny_model, batch, config, seed=42)
    for name in train.LOSS_NAMES + ("total",):
        assert float(a[name]) == float(b[name])


def test_different_seed_changes_flow_losses(tiny_model):
    batch = make_batch(tiny_model)
    config = train.TrainConfig()
    a, _ = losses_for(tiny_model, batch, config, seed=1)
    b, _ = losses_for(tiny_model, batch, config, seed=2)
    assert float(a["cfm"]) != float(b["cfm"])


def test_prior_uses_the_supplied_alignment(tiny_model):
    batch = make_batch(tiny_model)
    config = train.TrainConfig()
    override = [
        np.array([2, 2, 3]),  # 3 tokens, 7 frames
        np.array([3, 3, 2, 1]),  # 4 tokens, 9 frames
    ]
    losses, durations = losses_for(tiny_model, batch, config, override=override)
    assert [d.tolist() for d in durations] == [d.tolist() for d in override]
    hidden, mu = tiny_model.encode_text(batch.tokens, batch.speakers, batch.token_mask)
    z = tiny_model.standardize_joint(batch.joint)
    total_nll, total_frames = 0.0, 0
    for i, dur in enumerate(override):
        n_t, n_f = int(batch.n_tokens[i]), int(batch.n_frames[i])
        item = align.prior_loss(align.Alignment(dur), mu[i, :n_t], z[i, :n_f])
        total_nll += float(item) * n_f
        total_frames += n_f
    assert float(losses["prior"]) == pytest.approx(total_nll / total_frames, rel=1e-6)


def test_training_step_reduces_nothing_but_runs(tiny_model):
    batch = make_batch(tiny_model)
    config = train.TrainConfig(learning_rate=1e-3)
    optimizer = train.make_optimizer(tiny_model, config)
    report = train.training_step(tiny_model, batch, config, optimizer,
                                 torch.Generator().manual_seed(0))
    assert set(report) == {"total"} | set(train.LOSS_NAMES)
    assert all(np.isfinite(v) for v in report.values())


def test_nonfinite_loss_aborts_with_component_name(tiny_model):
    batch = make_batch(tiny_model)
    with torch.no_grad():
        tiny_model.decoder.out_proj.weight.fill_(float("nan"))
    config = train.TrainConfig()
    optimizer = train.make_optimizer(tiny_model, config)
    with pytest.raises(NumericalFailureError) as err:
        train.training_step(tiny_model, batch, config, optimizer)
    assert err.value.stage == "loss:cfm"


def test_nonfinite_encoder_output_aborts_before_alignment(tiny_model):
    batch = make_batch(tiny_model)
    with torch.no_grad():
        tiny_model.mu_proj.weight.fill_(float("nan"))
    config = train.TrainConfig()
    optimizer = train.make_optimizer(tiny_model, config)
    with pytest.raises(NumericalFailureError) as err:
        train.training_step(tiny_model, batch, config, optimizer)
    assert err.value.stage == "alignment"


# ---- standardizer ----


def corpus_of(n, seed=0, n_mels=5, frames=40):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mel = rng.standard_normal((frames, n_mels)).astype(np.float32)
        motion = rng.standard_normal((frames, 45)).astype(np.float32)
        pitch = 100 + 50 * rng.random(frames)
        energy = rng.random(frames) + 0.1
        out.append(
            features.FeatureBundle(
                tokens=rng.integers(2, 10, size=6),
                mel=features.MelSpectrogram(mel, 86.1328125),
                motion=features.MotionSequence(motion, 86.1328125),
                pitch=features.PitchContour(pitch, np.ones(frames, dtype=bool)),
                energy=features.EnergyContour(energy),
                speaker=i % 2,
            )
        )
    return out


def test_standardizer_normalizes_corpus():
    corpus = corpus_of(4)
    std = train.Standardizer.fit(corpus, n_buckets=16)
    joint = np.concatenate(
        [np.concatenate([b.mel.frames, b.motion.frames], axis=1) for b in corpus]
    ).astype(np.float64)
    z = (joint - std.joint_mean) / std.joint_std
    assert np.abs(z.mean(axis=0)).max() < 1e-6
    assert np.abs(z.std(axis=0) - 1).max() < 1e-6


def test_standardizer_boundaries_span_corpus():
    corpus = corpus_of(3)
    std = train.Standardizer.fit(corpus, n_buckets=16)
    pitch = np.concatenate([b.pitch.values for b in corpus])
    assert std.pitch_edges[0] == pytest.approx(np.log(pitch.min()))
    assert std.pitch_edges[-1] == pytest.approx(np.log(pitch.max()))
    assert len(std.pitch_edges) == 15
    assert np.all(np.diff(std.energy_edges) > 0)


def test_standardizer_rejects_constant_channel():
    corpus = corpus_of(2)
    for b in corpus:
        b.motion.frames[:, 7] = 1.234
    with pytest.raises(ConfigError):
        train.Standardizer.fit(corpus, n_buckets=16)


def test_standardizer_apply_sets_buffers(tiny_model):
    corpus = corpus_of(3, n_mels=tiny_model.config.n_mels)
    # tiny model's motion_dim is 3; rebuild joint stats accordingly
    std = train.Standardizer(
        joint_mean=np.arange(tiny_model.config.joint_dim, dtype=np.float64),
        joint_std=np.ones(tiny_model.config.joint_dim) * 2,
        pitch_mean=150.0,
        pitch_std=30.0,
        energy_mean=1.0,
        energy_std=0.5,
        pitch_edges=np.linspace(4, 6, tiny_model.config.n_buckets - 1),
        energy_edges=np.linspace(0, 3, tiny_model.config.n_buckets - 1),
    )
    std.apply(tiny_model)
    x = torch.zeros(2, tiny_model.config.joint_dim)
    z = tiny_model.standardize_joint(x)
    assert torch.allclose(
        z, -torch.arange(tiny_model.config.joint_dim, dtype=torch.float32) / 2
    )
    back = tiny_model.unstandardize_joint(z)
    assert torch.allclose(back, x, atol=1e-6)


# ---- schedule ----


def bundles_for_model(model, n=3, seed=0, frames=24, tokens=5):
    rng = np.random.default_rng(seed)
    cfg = model.config
    out = []
    for i in range(n):
        out.append(
            features.FeatureBundle(
                tokens=rng.integers(2, cfg.vocab_size, size=tokens),
                mel=features.MelSpectrogram(
                    rng.standard_normal((frames, cfg.n_mels)).astype(np.float32), 86.1328125
                ),
                motion=features.MotionSequence(
                    rng.standard_normal((frames, 45)).astype(np.float32), 86.1328125
                ),
                pitch=features.PitchContour(100 + 50 * rng.random(frames), np.ones(frames, bool)),
                energy=features.EnergyContour(rng.random(frames) + 0.1),
                speaker=i % cfg.n_speakers,
            )
        )
    return out


@pytest.fixture
def tiny45_model():
    torch.manual_seed(0)
    config = net.ModelConfig(
        vocab_size=12, hidden_dim=8, encoder_layers=1, encoder_heads=2,
        prosody_width=8, duration_width=8, decoder_channels=8, n_buckets=4,
        n_mels=3, motion_dim=45, n_speakers=2,
    )
    return net.SpeechMotionModel(config)


def test_schedule_zero_pretrain_skips_cleanly(tiny45_model):
    corpus = bundles_for_model(tiny45_model)
    train.Standardizer.fit(corpus, 4).apply(tiny45_model)
    config = train.TrainConfig(pretrain_steps=0, finetune_steps=3, batch_size=2)
    metrics = train.run_schedule(tiny45_model, [], corpus, config)
    assert len(metrics) == 3
    assert all(m["stage"] == "finetune" for m in metrics)
    assert int(tiny45_model.trained_steps) == 3


def test_schedule_metrics_row_per_step(tiny45_model):
    corpus = bundles_for_model(tiny45_model)
    train.Standardizer.fit(corpus, 4).apply(tiny45_model)
    config = train.TrainConfig(pretrain_steps=2, finetune_steps=3, batch_size=2)
    metrics = train.run_schedule(tiny45_model, corpus, corpus, config)
    assert [m["step"] for m in metrics] == [1, 2, 3, 4, 5]
    assert [m["stage"] for m in metrics] == ["pretrain"] * 2 + ["finetune"] * 3
    assert all(set(("total", "wall_time")) <= set(m) for m in metrics)


def test_schedule_rejects_out_of_range_speaker(tiny45_model):
    corpus = bundles_for_model(tiny45_model)
    corpus[0].speaker = 9
    config = train.TrainConfig(finetune_steps=1)
    with pytest.raises(ConfigError):
        train.run_schedule(tiny45_model, [], corpus, config)


def test_schedule_rejects_empty_corpus_with_steps(tiny45_model):
    config = train.TrainConfig(pretrain_steps=1, finetune_steps=0)
    with pytest.raises(ConfigError):
        train.run_schedule(tiny45_model, [], [], config)


def test_checkpoint_resume_matches_uninterrupted(tiny45_model, tmp_path):
    corpus = bundles_for_model(tiny45_model)
    train.Standardizer.fit(corpus, 4).apply(tiny45_model)
    config = train.TrainConfig(learning_rate=1e-3, batch_size=2, seed=7)

    def step_with(model, optimizer, k):
        gen = torch.Generator().manual_seed(train._mix_seed(config.seed, "finetune", k))
        batch = train.collate(train._pick_batch(corpus, 2, gen), model)
        return train.training_step(model, batch, config, optimizer, gen)

    # Uninterrupted: two steps.
    model_a = tiny45_model
    opt_a = train.make_optimizer(model_a, config)
    step_with(model_a, opt_a, 0)
    expected = step_with(model_a, opt_a, 1)

    # Interrupted: one step, checkpoint, reload, one more step.
    torch.manual_seed(0)
    model_b = net.SpeechMotionModel(model_a.config)
    train.Standardizer.fit(corpus, 4).apply(model_b)
    opt_b = train.make_optimizer(model_b, config)
    step_with(model_b, opt_b, 0)
    net.save_checkpoint(model_b, tmp_path / "ckpt", step=1)
    model_c, _ = net.load_checkpoint(tmp_path / "ckpt")
    opt_c = train.make_optimizer(model_c, config)
    resumed = step_with(model_c, opt_c, 1)

    for name in ("total",) + train.LOSS_NAMES:
        assert abs(resumed[name] - expected[name]) < 1e-10, name


# ---- gradient checking ----


def test_linear_regression_standin_gradients_exact():
    torch.manual_seed(0)
    model = torch.nn.Linear(4, 1).double()
    x = torch.randn(12, 4, dtype=torch.float64)
    y = torch.randn(12, 1, dtype=torch.float64)

    def loss_fn():
        return ((model(x) - y) ** 2).mean()

    rel = train.max_grad_rel_error(loss_fn, model.parameters(), eps=1e-5)
    assert rel < 1e-8


def test_full_tiny_model_gradient_check_micro(tiny_model):
    # the acceptance suite runs the bigger tiny config; here a fast sanity run
    from speechmotion.verify import micro_model_config

    torch.manual_seed(0)
    model = net.SpeechMotionModel(micro_model_config())
    rel = train.check_gradients(model, eps=1e-5)
    assert rel < 1e-4


def test_metrics_log_roundtrip(tmp_path, tiny45_model):
    corpus = bundles_for_model(tiny45_model)
    train.Standardizer.fit(corpus, 4).apply(tiny45_model)
    config = train.TrainConfig(finetune_steps=2, batch_size=2)
    metrics = train.run_schedule(tiny45_model, [], corpus, config)
    train.write_metrics(metrics, tmp_path / "metrics.jsonl")
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    import json

    row = json.loads(lines[0])
    assert row["step"] == 1 and row["stage"] == "finetune"
