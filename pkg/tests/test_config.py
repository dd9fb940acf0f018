""" Tests for loading, overriding and validating run configurations. """
import json

import pytest
from pydantic import ValidationError

from cuside_array.config import (ChunkConfig, ContextMode, RunConfig, StftConfig, StreamConfig,
                                 TrainingConfig, dump_config, load_config, merge_overrides)


def test_packaged_default_matches_model_defaults():
    """
    GIVEN the packaged default configuration
    WHEN it is loaded
    THEN it equals a RunConfig built from the model defaults
    """
    assert load_config() == RunConfig()


def test_packaged_toy_config_loads():
    config = load_config(name="toy_config.json")

    assert config.model.fbank.mel_bins == 40
    assert config.training.max_steps == 400


def test_load_config_from_file_round_trips(tmp_path):
    """
    GIVEN a configuration dumped to JSON
    WHEN it is read back from the file
    THEN the same configuration is returned
    """
    original = merge_overrides(RunConfig(), {"training.alpha": 0.5, "seed": 9})
    path = tmp_path / "run.json"
    path.write_text(dump_config(original), encoding="utf-8")

    assert load_config(path) == original


def test_load_config_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.json")


def test_merge_overrides_skips_none_and_revalidates():
    """
    GIVEN dotted overrides where one value is None
    WHEN they are merged
    THEN only the non-None value changes and invalid values are rejected
    """
    config = merge_overrides(RunConfig(), {"stream.right_ctx_mode": "real",
                                           "training.alpha": None})

    assert config.stream.right_ctx_mode is ContextMode.REAL
    assert config.training.alpha == RunConfig().training.alpha
    with pytest.raises(ValidationError):
        merge_overrides(RunConfig(), {"stream.chunk_ms": 405})


def test_stream_latency_counts_real_future_only():
    """
    GIVEN 400 ms chunks with 400 ms right context
    WHEN the right context is real, simulated or absent
    THEN only real future context adds to the algorithmic latency
    """
    latency = {mode: StreamConfig(right_ctx_mode=mode).algorithmic_latency_ms
               for mode in ContextMode}

    assert latency == {ContextMode.NONE: 400.0, ContextMode.REAL: 800.0,
                       ContextMode.SIMULATED: 400.0}


def test_stream_frames_follow_hop():
    config = StreamConfig(chunk_ms=200, left_ctx_ms=100, right_ctx_ms=50)
    assert (config.chunk_frames, config.left_frames, config.right_frames) == (20, 10, 5)


def test_chunk_jitter_must_bracket_chunk():
    with pytest.raises(ValidationError):
        ChunkConfig(chunk_ms=500)


def test_training_rejects_simulated_frontend():
    """
    GIVEN a front-end policy that draws simulated context
    WHEN a training configuration is built
    THEN validation fails
    """
    document = json.loads(TrainingConfig().model_dump_json())
    document["frontend_policy"]["probabilities"] = {"none": 0.5, "simulated": 0.5}

    with pytest.raises(ValidationError):
        TrainingConfig.model_validate(document)


def test_stft_window_longer_than_fft_rejected():
    with pytest.raises(ValidationError):
        StftConfig(window_size=600, fft_size=512)
