""" Toy spoken-word corpus and dataset loading.

Each of the nine non-blank tokens is a short harmonic chirp with its own frequency track;
an utterance strings two to five of them together with random pauses. The words are easy to
tell apart in clean conditions, so recognition errors come from the noise and from the
streaming constraints rather than from the acoustics of the vocabulary.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from cuside_array.asr import TokenSequence
from cuside_array.config import ModelConfig, SceneConfig, StftConfig
from cuside_array.errors import DatasetError
from cuside_array.neural import ModelParams
from cuside_array.scene import (ArrayGeometry, SceneSpec, SimulatedScene, load_scene_audio,
                                read_manifest, simulate_scene)
from cuside_array.signal import Waveform, log_magnitude, mel_filterbank, power_to_logfbank, stft

logger = logging.getLogger(__name__)

# (start Hz, end Hz) of each word's fundamental
WORD_TRACKS = [(300, 300), (500, 900), (900, 500), (1300, 1300), (700, 1600),
               (1800, 1100), (2200, 2200), (400, 2400), (2600, 1500)]
WORD_SECONDS = 0.24
PAUSE_SECONDS = (0.08, 0.2)
EDGE_SECONDS = 0.15
STD_FLOOR = 1e-3


class Utterance(BaseModel):
    """ One training or test item with its STFT computed once.

    Attributes:
        id: Utterance id.
        spec: complex mixture STFT, frame-major (frames, mics, bins).
        labels: Reference tokens.
        mixture: Time-domain mixture, kept for streaming and enhancement.
        speech_spec: Frame-major STFT of the speech image, when known.
        noise_spec: Frame-major STFT of the noise image, when known.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str
    spec: np.ndarray
    labels: TokenSequence
    mixture: Waveform | None = None
    speech_image: Waveform | None = None
    noise_image: Waveform | None = None
    speech_spec: np.ndarray | None = None
    noise_spec: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.spec.shape[0]


def word_waveform(token: int, rng: np.random.Generator, sample_rate: int = 16000) -> np.ndarray:
    """ One instance of word ``token`` (1..9) with small random pitch and length variation. """
    if not 1 <= token <= len(WORD_TRACKS):
        raise DatasetError(f"no acoustic pattern for token {token}")
    duration = WORD_SECONDS * rng.uniform(0.9, 1.1)
    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate
    f_start, f_end = (f * rng.uniform(0.97, 1.03) for f in WORD_TRACKS[token - 1])
    phase = 2 * np.pi * (f_start * t + (f_end - f_start) * t ** 2 / (2 * duration))
    tone = np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase)
    return 0.2 * tone * np.hanning(n)


def random_transcript(rng: np.random.Generator, vocab_size: int, min_words: int,
                      max_words: int) -> list[int]:
    count = int(rng.integers(min_words, max_words + 1))
    return [int(tok) for tok in rng.integers(1, min(vocab_size, len(WORD_TRACKS) + 1),
                                             size=count)]


def synth_utterance(tokens: list[int], rng: np.random.Generator,
                    sample_rate: int = 16000) -> Waveform:
    """ Words separated by random pauses, with silence at both ends. """
    edge = np.zeros(int(EDGE_SECONDS * sample_rate))
    pieces = [edge]
    for i, token in enumerate(tokens):
        if i:
            pieces.append(np.zeros(int(rng.uniform(*PAUSE_SECONDS) * sample_rate)))
        pieces.append(word_waveform(token, rng, sample_rate))
    pieces.append(edge)
    return Waveform(samples=np.concatenate(pieces), sample_rate=sample_rate)


def scene_geometry(cfg: SceneConfig) -> ArrayGeometry:
    return ArrayGeometry.linear(cfg.num_mics, cfg.mic_spacing_m, cfg.speed_of_sound)


def _noise_direction(rng: np.random.Generator, azimuth: float, min_sep: float) -> float:
    for _ in range(100):
        candidate = rng.uniform(0.0, np.pi)
        if abs(candidate - azimuth) >= min_sep:
            return float(candidate)
    return 0.0 if azimuth > np.pi / 2 else float(np.pi)


def make_scene_specs(cfg: SceneConfig, vocab_size: int = 10, sample_rate: int = 16000,
                     count: int | None = None, offset: int = 0) -> list[SceneSpec]:
    """ Deterministic scene descriptions; scene ``i`` depends only on ``(cfg.seed, i)``.

    Args:
        cfg: Dataset settings.
        vocab_size: Vocabulary size including the blank.
        sample_rate: Sampling rate of the sources.
        count: Number of scenes, ``cfg.num_utterances`` by default.
        offset: Index of the first scene.
    """
    count = cfg.num_utterances if count is None else count
    min_sep = np.deg2rad(cfg.min_separation_deg)
    specs = []
    for index in range(offset, offset + count):
        rng = np.random.default_rng([cfg.seed, index])
        tokens = random_transcript(rng, vocab_size, cfg.min_words, cfg.max_words)
        source = synth_utterance(tokens, rng, sample_rate)
        azimuth = float(rng.uniform(np.pi / 6, 5 * np.pi / 6))
        noise_azimuth = _noise_direction(rng, azimuth, min_sep) if cfg.directional_noise \
            else None
        specs.append(SceneSpec(
            source=source, azimuth=azimuth, noise_azimuth=noise_azimuth,
            uncorrelated_noise_db=cfg.uncorrelated_noise_db if cfg.directional_noise else None,
            snr_db=float(rng.uniform(*cfg.snr_db)), reference_channel=cfg.reference_channel,
            seed=int(rng.integers(2 ** 31)), utterance_id=f"utt{index:05d}",
            transcript=tokens))
    return specs


def utterance_from_scene(scene: SimulatedScene, stft_cfg: StftConfig) -> Utterance:
    """ Wraps an in-memory scene, keeping the ground-truth images. """
    return Utterance(
        id=scene.spec.utterance_id, spec=_frame_major(stft(scene.mixture, stft_cfg).data),
        labels=TokenSequence(ids=scene.spec.transcript), mixture=scene.mixture,
        speech_image=scene.speech_image, noise_image=scene.noise_image,
        speech_spec=_frame_major(stft(scene.speech_image, stft_cfg).data),
        noise_spec=_frame_major(stft(scene.noise_image, stft_cfg).data))


def synthesize_utterances(cfg: SceneConfig, stft_cfg: StftConfig, vocab_size: int = 10,
                          count: int | None = None, offset: int = 0) -> list[Utterance]:
    """ Simulates scenes in memory without touching the disk. """
    geom = scene_geometry(cfg)
    return [utterance_from_scene(simulate_scene(spec, geom), stft_cfg)
            for spec in make_scene_specs(cfg, vocab_size, stft_cfg.sample_rate, count, offset)]


def load_utterances(data_dir: str | Path, stft_cfg: StftConfig,
                    limit: int | None = None) -> list[Utterance]:
    """ Reads ``manifest.jsonl`` and the WAV files it names.

    Raises:
        FileNotFoundError: If the manifest or a WAV file is missing.
        DatasetError: If the manifest is malformed or empty.
    """
    data_dir = Path(data_dir)
    records = read_manifest(data_dir / "manifest.jsonl")
    if not records:
        raise DatasetError(f"{data_dir}: manifest lists no utterances")
    utterances = []
    for record in records[:limit]:
        mixture, speech, noise = load_scene_audio(record, data_dir)
        utterances.append(Utterance(
            id=record.id, spec=_frame_major(stft(mixture, stft_cfg).data),
            labels=TokenSequence.parse(record.transcript), mixture=mixture,
            speech_image=speech, noise_image=noise,
            speech_spec=_frame_major(stft(speech, stft_cfg).data),
            noise_spec=_frame_major(stft(noise, stft_cfg).data)))
    logger.info("loaded %d utterances from %s", len(utterances), data_dir)
    return utterances


def split_utterances(utterances: list[Utterance], valid_fraction: float = 0.1,
                     test_fraction: float = 0.1) -> tuple[list[Utterance], list[Utterance],
                                                          list[Utterance]]:
    """ Contiguous train/valid/test split; each requested part gets an item when possible. """
    n = len(utterances)
    n_test = max(1, int(round(n * test_fraction))) if n >= 3 and test_fraction > 0 else 0
    n_valid = max(1, int(round(n * valid_fraction))) if n >= 3 and valid_fraction > 0 else 0
    n_train = n - n_valid - n_test
    return (utterances[:n_train], utterances[n_train:n_train + n_valid],
            utterances[n_train + n_valid:])


def fit_input_statistics(params: ModelParams, utterances: list[Utterance],
                         cfg: ModelConfig) -> None:
    """ Sets the frozen mean/std of the mask-net and encoder inputs from training data.

    The encoder statistics come from the reference channel, which the enhanced features
    resemble closely enough for normalization.
    """
    if not utterances:
        raise DatasetError("cannot estimate feature statistics from no utterances")
    ref = cfg.mvdr.reference_channel
    reference = np.concatenate([u.spec[:, ref, :] for u in utterances], axis=0)
    fb = mel_filterbank(cfg.stft.num_bins, cfg.fbank.mel_bins, cfg.stft.sample_rate)
    fbank = power_to_logfbank(np.abs(reference) ** 2, fb, cfg.fbank.floor)
    updates = {"enc.input.mean": fbank.mean(axis=0),
               "enc.input.std": np.maximum(fbank.std(axis=0), STD_FLOOR)}
    if "mask.input.mean" in params:
        logmag = log_magnitude(reference)
        updates["mask.input.mean"] = logmag.mean(axis=0)
        updates["mask.input.std"] = np.maximum(logmag.std(axis=0), STD_FLOOR)
    params.set_values(updates)
    logger.info("feature statistics estimated from %d frames", reference.shape[0])


def _frame_major(data: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(data, (1, 0, 2)))
