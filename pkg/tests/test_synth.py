import json

import numpy as np
import pytest
import torch

from speechmotion import net, synth, tensorfile
from speechmotion.errors import InvalidInputError
from speechmotion.synth import ProsodyControls, apply_controls, export_result, synthesize


@pytest.fixture
def model():
    torch.manual_seed(3)
    config = net.ModelConfig(
        vocab_size=50, hidden_dim=16, encoder_layers=1, encoder_heads=2,
        prosody_width=16, duration_width=16, decoder_channels=16, n_buckets=8,
        n_mels=6, motion_dim=45, n_speakers=2,
    )
    m = net.SpeechMotionModel(config)
    # realistic prosody statistics so control scaling crosses buckets
    with torch.no_grad():
        m.pitch_stats.copy_(torch.tensor([150.0, 20.0]))
        m.energy_stats.copy_(torch.tensor([1.0, 0.3]))
        m.pitch_edges.copy_(torch.linspace(np.log(60.0), np.log(400.0), 7))
        m.energy_edges.copy_(torch.linspace(0.1, 3.0, 7))
    return m


def quick(model, text="well hello there", **kw):
    kw.setdefault("nfe_joint", 6)
    kw.setdefault("nfe_duration", 3)
    kw.setdefault("allow_untrained", True)
    return synthesize(model, text, kw.pop("speaker", 0), **kw)


# ---- determinism and controls ----


def test_identity_controls_bit_identical(model):
    base = quick(model)
    with_controls = quick(model, controls=ProsodyControls(1.0, 1.0))
    assert np.array_equal(base.mel.frames, with_controls.mel.frames)
    assert np.array_equal(base.motion.frames, with_controls.motion.frames)
    assert np.array_equal(base.durations, with_controls.durations)


def test_same_seeds_bit_identical(model):
    a = quick(model)
    b = quick(model)
    assert np.array_equal(a.mel.frames, b.mel.frames)
    assert np.array_equal(a.motion.frames, b.motion.frames)
    assert np.array_equal(a.durations, b.durations)
    assert np.array_equal(a.token_pitch, b.token_pitch)


def test_different_decoder_seed_changes_output(model):
    a = quick(model, seed_decoder=1)
    b = quick(model, seed_decoder=2)
    assert not np.array_equal(a.mel.frames, b.mel.frames)


def test_pitch_scale_changes_mel_but_keeps_duration_seed(model):
    base = quick(model, seed_durations=5)
    scaled = quick(model, controls=ProsodyControls(pitch_scale=0.5), seed_durations=5)
    assert np.linalg.norm(base.mel.frames - scaled.mel.frames) > 0
    assert abs(int(base.durations.sum()) - int(scaled.durations.sum())) <= max(
        4, int(0.5 * base.durations.sum())
    )
    assert len(base.durations) == len(scaled.durations)


def test_pitch_scale_scales_reported_tokens(model):
    base = quick(model)
    scaled = quick(model, controls=ProsodyControls(pitch_scale=2.0))
    assert scaled.token_pitch == pytest.approx(2.0 * base.token_pitch, rel=1e-6)


def test_result_invariants(model):
    res = quick(model)
    assert res.mel.n_frames == res.motion.n_frames == int(res.durations.sum())
    assert (res.durations >= 1).all()


def test_durations_override_bypasses_sampler(model):
    override = np.array([3] * len(quick(model).durations))
    res = quick(model, durations_override=override)
    assert np.array_equal(res.durations, override)
    assert res.mel.n_frames == int(override.sum())


# ---- apply_controls ----


def test_apply_controls_identity():
    pitch = torch.tensor([100.0, 200.0])
    energy = torch.tensor([1.0, 2.0])
    p, e = apply_controls(pitch, energy, ProsodyControls(1.0, 1.0))
    assert torch.equal(p, pitch) and torch.equal(e, energy)


def test_apply_controls_scales_hz():
    p, e = apply_controls(np.array([100.0, 200.0]), np.array([1.0]), ProsodyControls(2.0, 1.0))
    assert p == pytest.approx([200.0, 400.0])


def test_nonpositive_scale_rejected():
    with pytest.raises(InvalidInputError):
        ProsodyControls(pitch_scale=0.0)
    with pytest.raises(InvalidInputError):
        ProsodyControls(energy_scale=-1.0)


# ---- input validation ----


def test_empty_text_rejected(model):
    with pytest.raises(InvalidInputError):
        quick(model, text="   ")
    with pytest.raises(InvalidInputError):
        quick(model, text="@@ %% ##")  # nothing tokenizable


def test_untrained_guard(model):
    with pytest.raises(InvalidInputError):
        synthesize(model, "hello", 0)


def test_trained_model_skips_guard(model):
    with torch.no_grad():
        model.trained_steps += 1
    synthesize(model, "hello", 0, nfe_joint=2, nfe_duration=2)


# ---- export ----


def test_export_roundtrip_and_format(model, tmp_path):
    res = quick(model)
    paths = export_result(res, tmp_path / "out")
    mel_back = tensorfile.load(paths["mel"])
    assert np.array_equal(mel_back, res.mel.frames)
    motion_back = tensorfile.load(paths["motion"])
    assert np.array_equal(motion_back, res.motion.frames)

    lines = (tmp_path / "out" / "motion.csv").read_text().strip().splitlines()
    assert len(lines) == res.motion.n_frames
    assert all(len(line.split(",")) == 46 for line in lines)
    t0 = float(lines[0].split(",")[0])
    t1 = float(lines[1].split(",")[0])
    assert t0 == 0.0
    assert abs((t1 - t0) - 1.0 / 86.13) < 1e-6

    meta = json.loads((tmp_path / "out" / "result.json").read_text())
    assert meta["durations"] == res.durations.tolist()
    assert meta["nfe_joint"] == res.nfe_joint
