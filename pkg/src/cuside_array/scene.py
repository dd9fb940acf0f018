""" Anechoic far-field microphone-array scenes.

A mono source reaches each microphone as a plane wave with a pure delay. Noise is either a
point source from another direction or spatially uncorrelated white noise, scaled so the
reference channel hits a target SNR. Every output is a pure function of the scene spec and its
seed.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import fft

from cuside_array.beamformer import TimeFrequencyMask
from cuside_array.errors import DatasetError, SceneError, ShapeError, ZeroPowerError
from cuside_array.signal import MultiChannelSpectrogram, Waveform, read_wav, write_wav

logger = logging.getLogger(__name__)

PEAK_LIMIT = 0.9


class ArrayGeometry(BaseModel):
    """ Microphone positions in metres and the speed of sound in m/s. """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mic_positions: np.ndarray
    speed_of_sound: float = Field(default=343.0, gt=0)

    @field_validator("mic_positions", mode="before")
    @classmethod
    def check_positions(cls, value) -> np.ndarray:
        positions = np.atleast_2d(np.asarray(value, dtype=np.float64))
        if positions.shape[0] < 1 or positions.shape[1] != 3:
            raise ValueError(f"mic_positions must be (M, 3), got {positions.shape}")
        if not np.all(np.isfinite(positions)):
            raise ValueError("mic_positions must be finite")
        gaps = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if np.any(gaps < 1e-9):
            raise ValueError("two microphones share a position")
        return positions

    @property
    def num_mics(self) -> int:
        return self.mic_positions.shape[0]

    @classmethod
    def linear(cls, num_mics: int = 4, spacing: float = 0.05,
               speed_of_sound: float = 343.0) -> ArrayGeometry:
        """ Uniform linear array along the x-axis, centred on the origin. """
        x = (np.arange(num_mics) - (num_mics - 1) / 2.0) * spacing
        positions = np.stack([x, np.zeros(num_mics), np.zeros(num_mics)], axis=1)
        return cls(mic_positions=positions, speed_of_sound=speed_of_sound)


class SceneSpec(BaseModel):
    """ Everything needed to synthesise one utterance.

    Attributes:
        source: Clean mono speech.
        azimuth: Source direction in radians, 0 along +x, pi/2 along +y.
        elevation: Source elevation in radians.
        noise: Mono noise signal; None draws white Gaussian noise from ``seed``.
        noise_azimuth: Direction of the noise point source; None makes the noise spatially
            uncorrelated across microphones.
        uncorrelated_noise_db: Level of extra per-microphone white noise relative to the
            directional noise, or None for none.
        snr_db: Target SNR at the reference channel.
        reference_channel: Channel the SNR refers to.
        seed: Seed for every random draw of this scene.
        utterance_id: Identifier used in file names and the manifest.
        transcript: Token ids of the utterance.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    source: Waveform
    azimuth: float = np.pi / 2
    elevation: float = 0.0
    noise: Waveform | None = None
    noise_azimuth: float | None = None
    uncorrelated_noise_db: float | None = None
    snr_db: float = 0.0
    reference_channel: int = Field(default=0, ge=0)
    seed: int = 0
    utterance_id: str = "utt"
    transcript: list[int] = []

    @model_validator(mode="after")
    def check_source(self) -> SceneSpec:
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.source.num_channels != 1 or self.source.num_samples == 0:
            raise ValueError("source must be a non-empty mono waveform")
        return self


class SimulatedScene(BaseModel):
    """ Mixture plus its exact speech and noise images, all (M, samples). """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mixture: Waveform
    speech_image: Waveform
    noise_image: Waveform
    spec: SceneSpec

    @model_validator(mode="after")
    def check_decomposition(self) -> SimulatedScene:
        residual = self.mixture.samples - self.speech_image.samples - self.noise_image.samples
        if np.max(np.abs(residual)) > 1e-9:
            raise ValueError("mixture must equal speech_image + noise_image")
        return self


class ManifestRecord(BaseModel):
    """ One line of ``manifest.jsonl``; paths are relative to the manifest's directory. """
    id: str
    mixture_path: str
    speech_path: str
    noise_path: str
    transcript: str
    snr_db: float
    azimuth: float
    seed: int
    noise_azimuth: float | None = None
    geometry: list[list[float]] = []

    @property
    def tokens(self) -> list[int]:
        return [int(tok) for tok in self.transcript.split()]


def steering_delays(geom: ArrayGeometry, azimuth: float, elevation: float = 0.0) -> np.ndarray:
    """ Per-microphone plane-wave delays in seconds relative to the array origin.

    ``delay_m = -(k . p_m) / c`` with ``k`` the unit vector pointing from the array towards
    the source, so microphones nearer the source receive the wave earlier (negative delay).
    """
    direction = np.array([np.cos(elevation) * np.cos(azimuth),
                          np.cos(elevation) * np.sin(azimuth),
                          np.sin(elevation)])
    return -(geom.mic_positions @ direction) / geom.speed_of_sound


def spatialize(source: Waveform, delays: np.ndarray, sr: int | None = None) -> Waveform:
    """ Delays a mono source once per microphone with a frequency-domain phase shift.

    The source is zero-padded past the largest shift before the FFT so the circular shift
    never wraps signal into the output.
    """
    if source.num_channels != 1:
        raise ShapeError(f"spatialize needs a mono source, got {source.num_channels} channels")
    sr = sr or source.sample_rate
    delays = np.asarray(delays, dtype=np.float64)
    n = source.num_samples
    max_shift = int(np.ceil(np.max(np.abs(delays)) * sr)) if delays.size else 0
    nfft = fft.next_fast_len(n + max_shift + 64)
    spectrum = fft.rfft(source.samples[0], n=nfft)
    freqs = fft.rfftfreq(nfft, d=1.0 / sr)
    shifted = spectrum[None, :] * np.exp(-2j * np.pi * freqs[None, :] * delays[:, None])
    return Waveform(samples=fft.irfft(shifted, n=nfft, axis=-1)[:, :n], sample_rate=sr)


def fit_length(wave: Waveform, length: int) -> Waveform:
    """ Trims or loops a signal to ``length`` samples. """
    if wave.num_samples >= length:
        return Waveform(samples=wave.samples[:, :length], sample_rate=wave.sample_rate)
    reps = -(-length // wave.num_samples)
    return Waveform(samples=np.tile(wave.samples, (1, reps))[:, :length],
                    sample_rate=wave.sample_rate)


def channel_power(wave: Waveform, channel: int) -> float:
    return float(np.mean(wave.samples[channel] ** 2))


def measure_snr(speech: Waveform, noise: Waveform, ref: int = 0) -> float:
    """ 10 log10 of the speech to noise power ratio at the reference channel. """
    return 10.0 * np.log10(channel_power(speech, ref) / channel_power(noise, ref))


def mix_at_snr(speech_image: Waveform, noise_image: Waveform, snr_db: float,
               ref: int = 0) -> tuple[Waveform, Waveform]:
    """ Scales the noise so the reference channel has the requested SNR, then adds.

    Args:
        speech_image: Multi-channel speech.
        noise_image: Multi-channel noise; trimmed or looped to the speech length.
        snr_db: Target SNR in dB.
        ref: Reference channel.

    Returns:
        tuple: (mixture, scaled noise).

    Raises:
        ShapeError: If channel counts differ.
        ZeroPowerError: If speech or noise is silent at the reference channel.
    """
    if speech_image.num_channels != noise_image.num_channels:
        raise ShapeError(f"speech has {speech_image.num_channels} channels, "
                         f"noise {noise_image.num_channels}")
    noise_image = fit_length(noise_image, speech_image.num_samples)
    p_speech = channel_power(speech_image, ref)
    p_noise = channel_power(noise_image, ref)
    if p_speech <= 0:
        raise ZeroPowerError(f"speech has zero power at reference channel {ref}")
    if p_noise <= 0:
        raise ZeroPowerError(f"noise has zero power at reference channel {ref}")
    scale = np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    scaled = Waveform(samples=noise_image.samples * scale, sample_rate=noise_image.sample_rate)
    mixture = Waveform(samples=speech_image.samples + scaled.samples,
                       sample_rate=speech_image.sample_rate)
    return mixture, scaled


def simulate_scene(spec: SceneSpec, geom: ArrayGeometry) -> SimulatedScene:
    """ Synthesises the mixture and ground-truth images for one scene.

    All three signals share one gain that keeps the mixture peak at or below 0.9, which
    leaves the SNR and the decomposition untouched.
    """
    if spec.reference_channel >= geom.num_mics:
        raise SceneError(f"reference channel {spec.reference_channel} but only "
                         f"{geom.num_mics} microphones")
    sr = spec.source.sample_rate
    n = spec.source.num_samples
    rng = np.random.default_rng(spec.seed)
    speech = spatialize(spec.source, steering_delays(geom, spec.azimuth, spec.elevation), sr)

    noise_src = spec.noise if spec.noise is not None else Waveform(
        samples=rng.standard_normal(n), sample_rate=sr)
    noise_src = fit_length(noise_src, n)
    if spec.noise_azimuth is None:
        noise = Waveform(samples=rng.standard_normal((geom.num_mics, n)), sample_rate=sr)
    else:
        noise = spatialize(noise_src, steering_delays(geom, spec.noise_azimuth), sr)
        if spec.uncorrelated_noise_db is not None:
            level = np.sqrt(channel_power(noise, spec.reference_channel)
                            * 10.0 ** (spec.uncorrelated_noise_db / 10.0))
            extra = level * rng.standard_normal((geom.num_mics, n))
            noise = Waveform(samples=noise.samples + extra, sample_rate=sr)

    mixture, noise = mix_at_snr(speech, noise, spec.snr_db, spec.reference_channel)
    peak = float(np.max(np.abs(np.concatenate(
        [mixture.samples, speech.samples, noise.samples], axis=0))))
    gain = PEAK_LIMIT / peak if peak > PEAK_LIMIT else 1.0
    speech = Waveform(samples=speech.samples * gain, sample_rate=sr)
    noise = Waveform(samples=noise.samples * gain, sample_rate=sr)
    mixture = Waveform(samples=speech.samples + noise.samples, sample_rate=sr)
    return SimulatedScene(mixture=mixture, speech_image=speech, noise_image=noise, spec=spec)


def oracle_irm(speech_spec: MultiChannelSpectrogram, noise_spec: MultiChannelSpectrogram,
               ref: int = 0) -> tuple[TimeFrequencyMask, TimeFrequencyMask]:
    """ Ideal ratio masks at the reference channel; a bin with neither speech nor noise gets 0.5.

    Raises:
        ShapeError: If the spectrograms are not aligned.
    """
    if speech_spec.data.shape != noise_spec.data.shape:
        raise ShapeError(f"speech {speech_spec.data.shape} vs noise {noise_spec.data.shape}")
    s_pow = np.abs(speech_spec.data[ref]) ** 2
    n_pow = np.abs(noise_spec.data[ref]) ** 2
    total = s_pow + n_pow
    speech_mask = np.divide(s_pow, total, out=np.full_like(s_pow, 0.5), where=total > 0)
    return (TimeFrequencyMask(values=speech_mask),
            TimeFrequencyMask(values=1.0 - speech_mask))


def synth_dataset(specs: list[SceneSpec], out_dir: str | Path,
                  geom: ArrayGeometry) -> list[ManifestRecord]:
    """ Writes mixture/speech/noise WAVs and ``manifest.jsonl`` for a list of scenes.

    Args:
        specs: Scenes to synthesise; each is deterministic given its seed.
        out_dir: Output directory, created if missing.
        geom: Array geometry shared by all scenes.

    Returns:
        list[ManifestRecord]: one record per scene, in order.

    Raises:
        OSError: If a file cannot be written; the note names the path.
    """
    out_dir = Path(out_dir)
    records = []
    for spec in specs:
        scene = simulate_scene(spec, geom)
        paths = {}
        for kind, wave in (("mixture", scene.mixture), ("speech", scene.speech_image),
                           ("noise", scene.noise_image)):
            relative = Path("wav") / f"{spec.utterance_id}_{kind}.wav"
            write_wav(out_dir / relative, wave)
            paths[f"{kind}_path"] = relative.as_posix()
        records.append(ManifestRecord(
            id=spec.utterance_id, transcript=" ".join(str(tok) for tok in spec.transcript),
            snr_db=spec.snr_db, azimuth=spec.azimuth, seed=spec.seed,
            noise_azimuth=spec.noise_azimuth, geometry=geom.mic_positions.tolist(), **paths))
    write_manifest(out_dir / "manifest.jsonl", records)
    logger.info("wrote %d scenes to %s", len(records), out_dir)
    return records


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """ Reads ``manifest.jsonl``.

    Raises:
        FileNotFoundError: If the manifest is missing.
        DatasetError: If a line is not a valid record.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.model_validate_json(line))
            except ValueError as err:
                raise DatasetError(f"{path}:{line_no}: invalid manifest record") from err
    return records


def load_scene_audio(record: ManifestRecord, root: str | Path) -> tuple[Waveform, Waveform,
                                                                        Waveform]:
    """ Reads (mixture, speech, noise) of a manifest record relative to ``root``. """
    root = Path(root)
    return (read_wav(root / record.mixture_path), read_wav(root / record.speech_path),
            read_wav(root / record.noise_path))
