import numpy as np
import pytest
import torch

from speechmotion import datapipe, net


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return net.ModelConfig(
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


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return net.SpeechMotionModel(tiny_config)


def toy_backends(target_chars=24, seconds_per_char=0.055, **mock_kwargs):
    """Mock backends scaled so utterances are ~1.5 s with tokens << frames."""
    settings = datapipe.MockBackendSettings(
        text_target_chars=target_chars, seconds_per_char=seconds_per_char, **mock_kwargs
    )
    return datapipe.default_mock_backends(settings)


def run_toy_pipeline(tmp_path, n_phrases, voices, seed, **mock_kwargs):
    config = datapipe.PipelineConfig(n_phrases=n_phrases, voices=voices, seed=seed)
    backends = toy_backends(**mock_kwargs)
    return datapipe.run_pipeline(config, backends, tmp_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
