import numpy as np
import pytest
import torch

from speechmotion import features, net, tokens
from speechmotion.cfm import ODESolverConfig
from speechmotion.errors import InvalidInputError
from speechmotion.net import (
    ModelConfig,
    SpeechMotionModel,
    length_regulate,
    load_checkpoint,
    save_checkpoint,
    speaker_one_hot,
    split_output,
)


def ids(text="hello there"):
    return torch.as_tensor(tokens.tokenize(text))


# ---- encoder ----


def test_encoder_shapes(tiny_model, tiny_config):
    token_ids = torch.as_tensor(np.array([2, 3, 4, 5, 6, 7, 8]))
    h, mu = tiny_model.encode_text(token_ids, speaker_one_hot(0, 2))
    assert h.shape == (7, tiny_config.hidden_dim)
    assert mu.shape == (7, tiny_config.joint_dim)
    assert tiny_config.joint_dim == tiny_config.n_mels + tiny_config.motion_dim


def test_speaker_changes_encoding(tiny_model):
    token_ids = torch.as_tensor(np.array([2, 3, 4]))
    h0, _ = tiny_model.encode_text(token_ids, speaker_one_hot(0, 2))
    h1, _ = tiny_model.encode_text(token_ids, speaker_one_hot(1, 2))
    assert float(torch.norm(h0 - h1)) > 0


def test_token_order_changes_encoding(tiny_model):
    fwd, _ = tiny_model.encode_text(torch.as_tensor(np.array([2, 3, 4])), speaker_one_hot(0, 2))
    rev, _ = tiny_model.encode_text(torch.as_tensor(np.array([4, 3, 2])), speaker_one_hot(0, 2))
    # positional encoding: even a palindrome-permuted input maps differently
    assert float(torch.norm(fwd - rev.flip(0))) > 0


def test_out_of_vocab_rejected(tiny_model):
    with pytest.raises(InvalidInputError):
        tiny_model.encode_text(torch.as_tensor(np.array([2, 99])), speaker_one_hot(0, 2))


def test_one_hot_validated(tiny_model):
    with pytest.raises(InvalidInputError):
        tiny_model.encode_text(torch.as_tensor(np.array([2, 3])), torch.tensor([0.5, 0.5]))
    with pytest.raises(InvalidInputError):
        speaker_one_hot(5, 2)


def test_mu_is_linear_projection_of_h(tiny_model):
    h, mu = tiny_model.encode_text(torch.as_tensor(np.array([2, 3, 4])), speaker_one_hot(0, 2))
    expected = h @ tiny_model.mu_proj.weight.T + tiny_model.mu_proj.bias
    assert torch.allclose(mu, expected, atol=1e-6)


# ---- prosody ----


def test_prosody_shapes(tiny_model):
    h, _ = tiny_model.encode_text(torch.as_tensor(np.array([2, 3, 4, 5])), speaker_one_hot(0, 2))
    pitch, energy = tiny_model.predict_prosody(h, speaker_one_hot(0, 2))
    assert pitch.shape == (4,)
    assert energy.shape == (4,)


def test_prosody_speaker_sensitivity(tiny_model):
    h, _ = tiny_model.encode_text(torch.as_tensor(np.array([2, 3, 4])), speaker_one_hot(0, 2))
    p0, e0 = tiny_model.predict_prosody(h, speaker_one_hot(0, 2))
    p1, e1 = tiny_model.predict_prosody(h, speaker_one_hot(1, 2))
    assert float(torch.norm(p0 - p1)) > 0
    assert float(torch.norm(e0 - e1)) > 0


def test_zero_weight_predictor_outputs_bias(tiny_model):
    with torch.no_grad():
        for p in tiny_model.pitch_predictor.parameters():
            p.zero_()
        tiny_model.pitch_predictor.out.bias.fill_(0.7)
    h, _ = tiny_model.encode_text(torch.as_tensor(np.array([2, 3, 4, 5, 6])), speaker_one_hot(0, 2))
    pitch, _ = tiny_model.predict_prosody(h, speaker_one_hot(0, 2))
    # neutral statistics (mean 0, std 1) leave the bias untouched
    assert torch.allclose(pitch, torch.full((5,), 0.7), atol=1e-7)


def test_bucketize_convention_matches_features(tiny_model, rng):
    edges = np.sort(rng.standard_normal(7))
    values = rng.standard_normal(200)
    torch_idx = torch.bucketize(torch.as_tensor(values), torch.as_tensor(edges), right=True)
    np_idx = features.bucketize(values, edges)
    assert np.array_equal(torch_idx.numpy(), np_idx)


def test_same_bucket_same_embedding_row(tiny_model):
    h = torch.zeros(2, tiny_model.config.hidden_dim)
    with torch.no_grad():
        tiny_model.pitch_edges.copy_(torch.tensor([np.log(100.0), np.log(200.0), np.log(300.0)]))
        tiny_model.energy_edges.copy_(torch.tensor([1.0, 2.0, 3.0]))
    # both pitches inside (100, 200), both energies inside (1, 2)
    out = tiny_model.embed_prosody(h, torch.tensor([120.0, 180.0]), torch.tensor([1.2, 1.9]))
    assert torch.equal(out[0], out[1])


def test_below_min_boundary_selects_row_zero(tiny_model):
    h = torch.zeros(1, tiny_model.config.hidden_dim)
    with torch.no_grad():
        tiny_model.pitch_edges.copy_(torch.tensor([np.log(100.0), np.log(200.0), np.log(300.0)]))
        tiny_model.energy_edges.copy_(torch.tensor([1.0, 2.0, 3.0]))
    out = tiny_model.embed_prosody(h, torch.tensor([50.0]), torch.tensor([0.5]))
    expected = tiny_model.pitch_emb.weight[0] + tiny_model.energy_emb.weight[0]
    assert torch.allclose(out[0], expected, atol=1e-7)


def test_scaling_across_boundary_changes_row(tiny_model):
    h = torch.zeros(1, tiny_model.config.hidden_dim)
    with torch.no_grad():
        tiny_model.pitch_edges.copy_(torch.tensor([np.log(100.0), np.log(200.0), np.log(300.0)]))
        tiny_model.energy_edges.copy_(torch.tensor([1.0, 2.0, 3.0]))
    lo = tiny_model.embed_prosody(h, torch.tensor([150.0]), torch.tensor([1.5]))
    hi = tiny_model.embed_prosody(h, torch.tensor([150.0 * 2]), torch.tensor([1.5]))
    assert not torch.equal(lo, hi)


# ---- durations ----


def test_sampled_durations_always_at_least_one(tiny_model):
    h, _ = tiny_model.encode_text(torch.as_tensor(np.array([2, 3, 4, 5, 6, 7, 8, 9])), speaker_one_hot(0, 2))
    hp = tiny_model.embed_prosody(h, torch.full((8,), 150.0), torch.ones(8))
    for seed in range(1000):
        d = tiny_model.sample_durations(
            hp, speaker_one_hot(0, 2), ODESolverConfig(nfe=2, seed=seed),
            torch.Generator().manual_seed(seed),
        )
        assert (d >= 1).all()


def test_duration_seed_contract(tiny_model):
    h, _ = tiny_model.encode_text(torch.as_tensor(np.array([2, 3, 4, 5])), speaker_one_hot(0, 2))
    hp = tiny_model.embed_prosody(h, torch.full((4,), 150.0), torch.ones(4))
    spk = speaker_one_hot(0, 2)
    same1 = tiny_model.sample_durations(hp, spk, ODESolverConfig(nfe=4, seed=5), torch.Generator().manual_seed(5))
    same2 = tiny_model.sample_durations(hp, spk, ODESolverConfig(nfe=4, seed=5), torch.Generator().manual_seed(5))
    assert torch.equal(same1, same2)
    draws = {
        tuple(
            tiny_model.sample_durations(
                hp, spk, ODESolverConfig(nfe=4, seed=s), torch.Generator().manual_seed(s)
            ).tolist()
        )
        for s in range(100)
    }
    assert len(draws) > 1


def test_duration_condition_speaker_sensitivity(tiny_model):
    hp = torch.randn(6, tiny_model.config.hidden_dim)
    c0 = tiny_model.duration_condition(hp, speaker_one_hot(0, 2))
    c1 = tiny_model.duration_condition(hp, speaker_one_hot(1, 2))
    assert float(torch.norm(c0 - c1)) > 0


# ---- length regulation ----


def test_length_regulate_repeats_rows():
    rows = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = length_regulate(rows, torch.tensor([2, 1]))
    assert torch.equal(out, torch.tensor([[1.0, 2.0], [1.0, 2.0], [3.0, 4.0]]))


def test_length_regulate_identity():
    rows = torch.randn(5, 3)
    assert torch.equal(length_regulate(rows, torch.ones(5, dtype=torch.long)), rows)


def test_length_regulate_matches_loop_oracle(rng):
    rows = torch.as_tensor(rng.standard_normal((6, 4)))
    durations = torch.as_tensor(rng.integers(1, 5, size=6))
    out = length_regulate(rows, durations)
    manual = torch.cat([rows[i : i + 1].repeat(int(durations[i]), 1) for i in range(6)])
    assert torch.equal(out, manual)
    assert out.shape[0] == int(durations.sum())


def test_length_regulate_rejects_zero_duration():
    with pytest.raises(InvalidInputError):
        length_regulate(torch.randn(2, 3), torch.tensor([1, 0]))


# ---- decoder ----


def test_decoder_output_shape_and_split():
    config = ModelConfig(
        hidden_dim=8, encoder_layers=1, encoder_heads=2, prosody_width=8,
        duration_width=8, decoder_channels=8, n_buckets=4,
        n_mels=80, motion_dim=45, n_speakers=1,
    )
    torch.manual_seed(0)
    model = SpeechMotionModel(config)
    reg = torch.randn(30, 8)
    out = model.decode_joint(reg, speaker_one_hot(0, 1), ODESolverConfig(nfe=2, seed=0),
                             torch.Generator().manual_seed(0))
    assert out.shape == (30, 125)
    mel, motion = split_output(out, 80)
    assert mel.frames.shape == (30, 80)
    assert motion.frames.shape == (30, 45)
    assert mel.frame_rate == pytest.approx(86.1328125)
    assert np.array_equal(np.concatenate([mel.frames, motion.frames], axis=1),
                          out.numpy().astype(np.float32))


def test_decoder_determinism(tiny_model):
    reg = torch.randn(13, tiny_model.config.hidden_dim)
    spk = speaker_one_hot(1, 2)
    a = tiny_model.decode_joint(reg, spk, ODESolverConfig(nfe=5, seed=9), torch.Generator().manual_seed(9))
    b = tiny_model.decode_joint(reg, spk, ODESolverConfig(nfe=5, seed=9), torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


def test_decoder_speaker_sensitivity(tiny_model):
    reg = torch.randn(12, tiny_model.config.hidden_dim)
    a = tiny_model.decode_joint(reg, speaker_one_hot(0, 2), ODESolverConfig(nfe=3, seed=1), torch.Generator().manual_seed(1))
    b = tiny_model.decode_joint(reg, speaker_one_hot(1, 2), ODESolverConfig(nfe=3, seed=1), torch.Generator().manual_seed(1))
    assert float(torch.norm(a - b)) > 0


def test_split_output_rejects_wrong_width():
    with pytest.raises(InvalidInputError):
        split_output(np.zeros((4, 100)), 80)


def test_ground_truth_durations_fix_output_length(tiny_model):
    token_ids = torch.as_tensor(np.array([2, 3, 4]))
    h, _ = tiny_model.encode_text(token_ids, speaker_one_hot(0, 2))
    hp = tiny_model.embed_prosody(h, torch.full((3,), 150.0), torch.ones(3))
    durations = torch.tensor([2, 5, 3])
    reg = length_regulate(hp, durations)
    out = tiny_model.decode_joint(reg, speaker_one_hot(0, 2), ODESolverConfig(nfe=2, seed=0),
                                  torch.Generator().manual_seed(0))
    assert out.shape[0] == int(durations.sum())


# ---- parameter count ----


def test_speaker_count_has_small_parameter_cost():
    base = SpeechMotionModel(ModelConfig(n_speakers=1)).parameter_count()
    multi = SpeechMotionModel(ModelConfig(n_speakers=16)).parameter_count()
    assert 0 < multi - base < 10_000


# ---- checkpoints ----


def test_checkpoint_roundtrip(tiny_model, tmp_path):
    with torch.no_grad():
        tiny_model.trained_steps += 17
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_model, path, step=17)
    loaded, step = load_checkpoint(path)
    assert step == 17
    assert int(loaded.trained_steps) == 17
    assert loaded.config == tiny_model.config
    for (name_a, a), (name_b, b) in zip(
        tiny_model.state_dict().items(), loaded.state_dict().items()
    ):
        assert name_a == name_b
        assert torch.equal(a.float(), b.float()), name_a


def test_checkpoint_rejects_truncation(tiny_model, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 16])
    with pytest.raises(InvalidInputError):
        load_checkpoint(path)


def test_checkpoint_rejects_wrong_format(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(InvalidInputError):
        load_checkpoint(path)
