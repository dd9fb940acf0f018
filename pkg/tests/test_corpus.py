""" Tests for the toy corpus, dataset loading and feature statistics. """
import numpy as np
import pytest

from cuside_array.config import SceneConfig
from cuside_array.corpus import (fit_input_statistics, load_utterances, make_scene_specs,
                                 scene_geometry, split_utterances, synth_utterance, word_waveform)
from cuside_array.cuside import init_model_params
from cuside_array.errors import DatasetError
from cuside_array.scene import synth_dataset


def test_scene_specs_depend_only_on_seed_and_index(scene_config):
    """
    GIVEN the same scene configuration
    WHEN specs are built for indices 0..2 and separately from offset 1
    THEN the overlapping scenes are identical
    """
    full = make_scene_specs(scene_config, count=3)
    tail = make_scene_specs(scene_config, count=2, offset=1)

    assert [s.utterance_id for s in tail] == ["utt00001", "utt00002"]
    for a, b in zip(full[1:], tail):
        assert a.transcript == b.transcript
        assert a.seed == b.seed
        assert np.array_equal(a.source.samples, b.source.samples)


def test_scene_specs_respect_word_counts_and_separation(scene_config):
    specs = make_scene_specs(scene_config, count=10)

    for spec in specs:
        assert 2 <= len(spec.transcript) <= 3
        assert all(1 <= tok <= 9 for tok in spec.transcript)
        assert abs(spec.azimuth - spec.noise_azimuth) >= np.deg2rad(45.0) - 1e-12


def test_unknown_word_raises(rng):
    with pytest.raises(DatasetError):
        word_waveform(10, rng)


def test_utterance_has_silent_edges(rng):
    wave = synth_utterance([1, 2], rng)

    assert np.all(wave.samples[0, :2000] == 0.0)
    assert np.all(wave.samples[0, -2000:] == 0.0)
    assert np.max(np.abs(wave.samples)) < 1.0


def test_synthesized_utterances_carry_ground_truth(utterances, scene_config):
    """
    GIVEN the fixture corpus
    WHEN its items are inspected
    THEN each has a frame-major 4-microphone STFT and aligned speech and noise STFTs
    """
    assert len(utterances) == 3
    for utt in utterances:
        assert utt.spec.shape[1:] == (scene_config.num_mics, 257)
        assert utt.speech_spec.shape == utt.spec.shape
        assert np.allclose(utt.speech_spec + utt.noise_spec, utt.spec)


def test_load_utterances_matches_in_memory_corpus(tmp_path, scene_config, stft_config, utterances):
    """
    GIVEN the fixture scenes written to disk
    WHEN they are loaded back with a limit of two
    THEN ids and labels match and the spectra agree to 16-bit precision
    """
    synth_dataset(make_scene_specs(scene_config, count=3), tmp_path, scene_geometry(scene_config))

    loaded = load_utterances(tmp_path, stft_config, limit=2)

    assert [u.id for u in loaded] == [u.id for u in utterances[:2]]
    assert loaded[0].labels == utterances[0].labels
    assert np.max(np.abs(loaded[0].spec - utterances[0].spec)) < 1e-2


def test_load_utterances_empty_manifest_raises(tmp_path, stft_config):
    (tmp_path / "manifest.jsonl").write_text("", encoding="utf-8")
    with pytest.raises(DatasetError):
        load_utterances(tmp_path, stft_config)


def test_load_utterances_missing_directory_raises(tmp_path, stft_config):
    with pytest.raises(FileNotFoundError):
        load_utterances(tmp_path / "nowhere", stft_config)


@pytest.mark.parametrize("n, expected", [(10, (8, 1, 1)), (3, (1, 1, 1)), (2, (2, 0, 0)),
                                         (20, (16, 2, 2))])
def test_split_sizes(n, expected):
    train, valid, test = split_utterances(list(range(n)))
    assert (len(train), len(valid), len(test)) == expected


def test_split_without_test_part():
    train, valid, test = split_utterances(list(range(10)), 0.1, 0.0)
    assert (len(train), len(valid), len(test)) == (9, 1, 0)


def test_fit_input_statistics_sets_frozen_tensors(small_model_config, utterances):
    """
    GIVEN freshly initialised parameters
    WHEN input statistics are fitted on the corpus
    THEN the encoder mean is no longer zero and every std is at least the floor
    """
    params = init_model_params(small_model_config, seed=0)

    fit_input_statistics(params, utterances, small_model_config)

    assert not np.allclose(params["enc.input.mean"].value, 0.0)
    assert np.all(params["enc.input.std"].value >= 1e-3)
    assert np.all(params["mask.input.std"].value >= 1e-3)
    assert "enc.input.mean" in params.frozen


def test_fit_input_statistics_needs_data(small_model_config):
    with pytest.raises(DatasetError):
        fit_input_statistics(init_model_params(small_model_config), [], small_model_config)


def test_undirected_noise_scenes(scene_config):
    cfg = SceneConfig(**{**scene_config.model_dump(), "directional_noise": False})
    assert all(s.noise_azimuth is None for s in make_scene_specs(cfg, count=2))
