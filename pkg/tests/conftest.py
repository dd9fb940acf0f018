""" Shared pytest fixtures.

Models here keep the real 257-bin STFT so they run on synthetic scenes, but use tiny layers so a
forward pass takes milliseconds.
"""
import numpy as np
import pytest

from cuside_array.config import (EncoderConfig, FbankConfig, MaskNetConfig, ModelConfig,
                                 SceneConfig, SimNetConfig, StftConfig, StreamConfig,
                                 TrainingConfig)
from cuside_array.corpus import fit_input_statistics, synthesize_utterances
from cuside_array.cuside import init_model_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def stft_config():
    return StftConfig()


@pytest.fixture(scope="session")
def small_model_config():
    return ModelConfig(
        fbank=FbankConfig(mel_bins=8),
        mask_net=MaskNetConfig(layers=1, hidden_per_direction=4, dropout=0.0),
        encoder=EncoderConfig(layers=1, hidden_per_direction=4, dropout=0.0),
        sim_net=SimNetConfig(layers=1, hidden=6, right_frames=10))


@pytest.fixture(scope="session")
def small_stream_config():
    """ 200 ms chunks, 200 ms left context, 100 ms right context. """
    return StreamConfig(chunk_ms=200, left_ctx_ms=200, right_ctx_ms=100)


@pytest.fixture(scope="session")
def small_training_config():
    return TrainingConfig.model_validate({
        "batch_size": 2, "max_steps": 3, "eval_every": 2, "warmup_steps": 1, "average_k": 2,
        "chunk": {"chunk_ms": 200, "left_ms": 200, "right_ms": 100, "jitter_low_ms": 150,
                  "jitter_high_ms": 250}})


@pytest.fixture(scope="session")
def scene_config():
    return SceneConfig(num_utterances=3, seed=5, snr_db=(5.0, 5.0), min_words=2, max_words=3)


@pytest.fixture(scope="session")
def utterances(scene_config, stft_config):
    """ Three synthetic 4-microphone utterances with ground-truth images. """
    return synthesize_utterances(scene_config, stft_config, count=3)


@pytest.fixture
def small_params(small_model_config, utterances):
    """ Freshly initialised parameters with feature statistics fitted on the fixture corpus. """
    params = init_model_params(small_model_config, seed=3)
    fit_input_statistics(params, utterances, small_model_config)
    return params
