""" Waveform I/O, STFT/iSTFT, mel filterbank and log-Fbank features.

Frame ``t`` covers samples ``[t * hop, t * hop + window_size)``. A signal whose length does not
land on a frame boundary is zero-padded at the end so the final partial frame is kept, giving
``ceil((len - window_size) / hop) + 1`` frames.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import fft
from scipy.io import wavfile

from cuside_array.config import StftConfig
from cuside_array.errors import (InputTooShortError, NotColaError, ShapeError, SignalError,
                                 WavFormatError)

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0


class Waveform(BaseModel):
    """ Multi-channel real signal.

    Attributes:
        samples: Array of shape (channels, samples); a 1-D input is read as one channel.
        sample_rate: Sampling rate in Hz.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray
    sample_rate: int = 16000

    @field_validator("samples", mode="before")
    @classmethod
    def as_channels_by_samples(cls, value) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.ndim == 1:
            array = array[None, :]
        if array.ndim != 2:
            raise ValueError(f"samples must be 1-D or 2-D, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("samples must be finite")
        return array

    @field_validator("sample_rate")
    @classmethod
    def positive_rate(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("sample_rate must be positive")
        return value

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, index: int) -> Waveform:
        return Waveform(samples=self.samples[index], sample_rate=self.sample_rate)


class MultiChannelSpectrogram(BaseModel):
    """ Complex STFT frames indexed [channel][frame][bin]. """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    config: StftConfig
    num_samples: int | None = None

    @field_validator("data", mode="before")
    @classmethod
    def as_complex(cls, value) -> np.ndarray:
        array = np.asarray(value, dtype=np.complex128)
        if array.ndim != 3:
            raise ValueError(f"spectrogram must be (channel, frame, bin), got {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("spectrogram values must be finite")
        return array

    @model_validator(mode="after")
    def bins_match(self) -> MultiChannelSpectrogram:
        if self.data.shape[2] != self.config.num_bins:
            raise ValueError(f"{self.data.shape[2]} bins, config expects {self.config.num_bins}")
        return self

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]


class FbankFeatures(BaseModel):
    """ Log mel filterbank features [frame][mel_bin]. """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    floor: float = 1e-10

    @model_validator(mode="after")
    def above_floor(self) -> FbankFeatures:
        if not np.all(np.isfinite(self.data)):
            raise ValueError("fbank values must be finite")
        if np.any(self.data < np.log(self.floor) - 1e-12):
            raise ValueError("fbank values below log(floor)")
        return self


def frame_count(num_samples: int, cfg: StftConfig) -> int:
    """ Number of STFT frames for a signal, counting the zero-padded final partial frame.

    Raises:
        InputTooShortError: If the signal is shorter than one window.
    """
    if num_samples < cfg.window_size:
        raise InputTooShortError(f"input too short: {num_samples} samples, "
                                 f"window needs {cfg.window_size}")
    return -(-(num_samples - cfg.window_size) // cfg.hop) + 1


def frame_signal(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """ Windowed frames of shape (channels, frames, window_size). """
    num_frames = frame_count(samples.shape[-1], cfg)
    padded_len = (num_frames - 1) * cfg.hop + cfg.window_size
    padded = np.pad(samples, ((0, 0), (0, padded_len - samples.shape[-1])))
    index = np.arange(cfg.window_size)[None, :] + cfg.hop * np.arange(num_frames)[:, None]
    return padded[:, index] * cfg.analysis_window()


def stft(wave: Waveform, cfg: StftConfig) -> MultiChannelSpectrogram:
    """ Short-time Fourier transform of every channel.

    Args:
        wave: Input signal.
        cfg: Frame geometry.

    Returns:
        MultiChannelSpectrogram: complex frames, ``cfg.num_bins`` bins per frame.

    Raises:
        InputTooShortError: If the signal is shorter than one window.
    """
    frames = frame_signal(wave.samples, cfg)
    spec = fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return MultiChannelSpectrogram(data=spec, config=cfg, num_samples=wave.num_samples)


def istft(spec: MultiChannelSpectrogram, length: int | None = None) -> Waveform:
    """ Weighted overlap-add inverse of ``stft``.

    Reconstruction is exact wherever the summed squared window is non-zero, i.e. everywhere
    except the outermost samples of a periodic window.

    Args:
        spec: Spectrogram produced with a COLA window/hop pair.
        length: Output length in samples; defaults to the length recorded by ``stft`` or the
            full padded length.

    Raises:
        NotColaError: If the window is not constant-overlap-add at the configured hop.
    """
    cfg = spec.config
    if not cfg.is_cola():
        raise NotColaError(f"{cfg.window} window of {cfg.window_size} samples is not COLA "
                           f"at hop {cfg.hop}")
    window = cfg.analysis_window()
    frames = fft.irfft(spec.data, n=cfg.fft_size, axis=-1)[..., :cfg.window_size] * window
    num_frames = spec.num_frames
    total = (num_frames - 1) * cfg.hop + cfg.window_size
    out = np.zeros((spec.num_channels, total))
    norm = np.zeros(total)
    for t in range(num_frames):
        start = t * cfg.hop
        out[:, start:start + cfg.window_size] += frames[:, t]
        norm[start:start + cfg.window_size] += window ** 2
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    length = length or spec.num_samples or total
    if length > total:
        out = np.pad(out, ((0, 0), (0, length - total)))
    return Waveform(samples=out[:, :length], sample_rate=cfg.sample_rate)


def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(num_bins: int, mel_bins: int, sample_rate: int) -> np.ndarray:
    """ Triangular mel filters spanning 0 Hz to Nyquist.

    A filter too narrow to touch any FFT bin gets unit weight on the bin nearest its center,
    so every row has a positive sum.

    Args:
        num_bins: FFT bins, ``fft_size // 2 + 1``.
        mel_bins: Number of filters.
        sample_rate: Sampling rate in Hz.

    Returns:
        np.ndarray: weights of shape (mel_bins, num_bins).

    Raises:
        SignalError: If ``mel_bins`` is below 1 or above ``num_bins``.
    """
    if mel_bins < 1 or mel_bins > num_bins:
        raise SignalError(f"mel_bins must be in [1, {num_bins}], got {mel_bins}")
    bin_freqs = np.linspace(0.0, sample_rate / 2.0, num_bins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    for m in np.flatnonzero(weights.sum(axis=1) <= 0):
        weights[m, np.argmin(np.abs(bin_freqs - center[m, 0]))] = 1.0
    return weights


def power_to_logfbank(power: np.ndarray, fb: np.ndarray, floor: float) -> np.ndarray:
    """ ``log(max(floor, power @ fb.T))`` for power of shape (frames, bins). """
    return np.log(np.maximum(floor, power @ fb.T))


def logfbank(spec: MultiChannelSpectrogram, channel: int, fb: np.ndarray,
             floor: float = 1e-10) -> FbankFeatures:
    """ Log mel filterbank features of one channel.

    Raises:
        ShapeError: If the channel index or filterbank width is wrong.
    """
    if not 0 <= channel < spec.num_channels:
        raise ShapeError(f"channel {channel} out of range for {spec.num_channels} channels")
    if fb.shape[1] != spec.data.shape[2]:
        raise ShapeError(f"filterbank has {fb.shape[1]} bins, spectrogram {spec.data.shape[2]}")
    power = np.abs(spec.data[channel]) ** 2
    return FbankFeatures(data=power_to_logfbank(power, fb, floor), floor=floor)


def log_magnitude(frames: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """ ``log(|X|^2 + floor)``, the mask estimator's input. """
    return np.log(np.abs(frames) ** 2 + floor)


def read_wav(path: str | Path, expected_rate: int | None = 16000) -> Waveform:
    """ Reads a 16-bit PCM WAV file.

    Args:
        path: File to read.
        expected_rate: Required sampling rate, or None to accept any.

    Returns:
        Waveform: samples scaled to [-1, 1), shape (channels, samples).

    Raises:
        FileNotFoundError: If the file does not exist.
        WavFormatError: If the encoding is not PCM16 or the rate differs.
    """
    try:
        rate, pcm = wavfile.read(str(path))
    except FileNotFoundError as err:
        err.add_note(f"while reading WAV {path}")
        raise
    except ValueError as err:
        raise WavFormatError(f"{path}: not a readable WAV file ({err})") from err
    if pcm.dtype != np.int16:
        raise WavFormatError(f"{path}: expected 16-bit PCM, found {pcm.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(f"{path}: expected {expected_rate} Hz, found {rate} Hz")
    samples = pcm.astype(np.float64) / PCM16_SCALE
    samples = samples.T if samples.ndim == 2 else samples
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path: str | Path, wave: Waveform) -> Path:
    """ Writes a Waveform as 16-bit PCM, creating parent directories.

    Raises:
        SignalError: If any sample lies outside [-1, 1].
        OSError: If the file cannot be written.
    """
    peak = float(np.max(np.abs(wave.samples))) if wave.num_samples else 0.0
    if peak > 1.0:
        raise SignalError(f"{path}: peak amplitude {peak:.3f} exceeds 1.0")
    pcm = np.clip(np.round(wave.samples * PCM16_SCALE), -PCM16_SCALE, PCM16_SCALE - 1)
    pcm = pcm.astype(np.int16)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(str(path), wave.sample_rate, pcm[0] if wave.num_channels == 1 else pcm.T)
    except OSError as err:
        err.add_note(f"while writing WAV {path}")
        raise
    return path
