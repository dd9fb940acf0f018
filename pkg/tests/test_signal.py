""" Tests for STFT, mel features and WAV I/O. """
import numpy as np
import pytest

from cuside_array.config import StftConfig
from cuside_array.errors import InputTooShortError, NotColaError, SignalError, WavFormatError
from cuside_array.signal import (PCM16_SCALE, MultiChannelSpectrogram, Waveform, frame_count,
                                 frame_signal, istft, logfbank, mel_filterbank, read_wav, stft,
                                 write_wav)


def test_frame_count_includes_partial_frame(stft_config):
    """
    GIVEN the default 480-sample window and 160-sample hop
    WHEN frame_count is called for exact and non-exact lengths
    THEN the final partial frame is counted
    """
    assert frame_count(480, stft_config) == 1
    assert frame_count(640, stft_config) == 2
    assert frame_count(641, stft_config) == 3
    assert frame_count(16000, stft_config) == 98


def test_stft_shape(stft_config, rng):
    """
    GIVEN one second of 3-channel noise
    WHEN stft is called
    THEN the result is (channels, frames, 257)
    """
    wave = Waveform(samples=rng.normal(size=(3, 16000)))

    spec = stft(wave, stft_config)

    assert spec.data.shape == (3, 98, 257)
    assert spec.num_samples == 16000


def test_stft_too_short_raises(stft_config):
    """
    GIVEN a signal shorter than one window
    WHEN stft is called
    THEN InputTooShortError is raised
    """
    with pytest.raises(InputTooShortError):
        stft(Waveform(samples=np.zeros(100)), stft_config)


def test_istft_round_trip_interior(stft_config, rng):
    """
    GIVEN a random 2-channel signal whose length is not on a frame boundary
    WHEN it goes through stft and istft
    THEN the interior samples are restored to 1e-6 relative RMS and the length is kept
    """
    wave = Waveform(samples=rng.normal(size=(2, 12345)))

    restored = istft(stft(wave, stft_config))

    interior = slice(stft_config.window_size, wave.num_samples - stft_config.window_size)
    error = np.sqrt(np.mean((restored.samples[:, interior] - wave.samples[:, interior]) ** 2))
    assert restored.num_samples == wave.num_samples
    assert error / np.sqrt(np.mean(wave.samples[:, interior] ** 2)) < 1e-6


def test_istft_rejects_non_cola_window(rng):
    """
    GIVEN a 512-sample Hann window at hop 160, which is not constant-overlap-add
    WHEN istft is called
    THEN NotColaError is raised
    """
    cfg = StftConfig(window_size=512, fft_size=512, hop=160)
    spec = stft(Waveform(samples=rng.normal(size=4000)), cfg)

    with pytest.raises(NotColaError):
        istft(spec)


def test_default_window_is_cola(stft_config):
    assert stft_config.is_cola()


def test_spectrogram_rejects_wrong_bin_count(stft_config):
    """
    GIVEN data with 100 bins
    WHEN a spectrogram is built for a 257-bin configuration
    THEN validation fails
    """
    with pytest.raises(ValueError):
        MultiChannelSpectrogram(data=np.zeros((1, 4, 100)), config=stft_config)


def test_mel_filterbank_rows_are_positive():
    """
    GIVEN more mel filters than the low-frequency bins can separate
    WHEN mel_filterbank is built
    THEN every filter still has positive weight and weights are non-negative
    """
    fb = mel_filterbank(257, 128, 16000)

    assert fb.shape == (128, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)


def test_mel_filterbank_rejects_too_many_filters():
    with pytest.raises(SignalError):
        mel_filterbank(9, 10, 16000)


def test_logfbank_of_silence_is_floor(stft_config):
    """
    GIVEN a silent signal
    WHEN log-Fbank features are computed
    THEN every value equals log(floor)
    """
    spec = stft(Waveform(samples=np.zeros(1600)), stft_config)
    fb = mel_filterbank(257, 40, 16000)

    feats = logfbank(spec, 0, fb, floor=1e-10)

    assert np.allclose(feats.data, np.log(1e-10))


def test_stft_is_linear(stft_config, rng):
    """
    GIVEN two random signals and two scalars
    WHEN the STFT of their weighted sum is taken
    THEN it equals the weighted sum of their STFTs
    """
    x = rng.normal(size=(2, 3000))
    y = rng.normal(size=(2, 3000))

    combined = stft(Waveform(samples=2.5 * x - 0.7 * y), stft_config).data
    separate = (2.5 * stft(Waveform(samples=x), stft_config).data
                - 0.7 * stft(Waveform(samples=y), stft_config).data)

    assert np.allclose(combined, separate, atol=1e-10)


def test_stft_keeps_half_of_a_conjugate_symmetric_spectrum(stft_config, rng):
    """
    GIVEN a real signal
    WHEN its windowed frames get a full 512-point FFT
    THEN bin k and bin 512 - k are conjugates, and stft returns bins 0..256 of it
    """
    wave = Waveform(samples=rng.normal(size=2000))
    n = stft_config.fft_size

    full = np.fft.fft(frame_signal(wave.samples, stft_config), n=n, axis=-1)

    k = np.arange(1, n // 2)
    assert np.allclose(full[..., n - k], np.conj(full[..., k]), atol=1e-10)
    assert np.allclose(full[..., [0, n // 2]].imag, 0.0, atol=1e-10)
    assert np.allclose(stft(wave, stft_config).data, full[..., :n // 2 + 1], atol=1e-10)


def test_stft_preserves_windowed_frame_energy(stft_config, rng):
    """
    GIVEN random windowed frames
    WHEN their energy is measured in time and over the one-sided spectrum
    THEN the two agree within 1e-6 relative
    """
    wave = Waveform(samples=rng.normal(size=(1, 4000)))
    n = stft_config.fft_size

    time_energy = np.sum(frame_signal(wave.samples, stft_config) ** 2, axis=-1)
    power = np.abs(stft(wave, stft_config).data) ** 2
    freq_energy = (power[..., 0] + power[..., -1] + 2 * power[..., 1:-1].sum(axis=-1)) / n

    assert np.allclose(freq_energy, time_energy, rtol=1e-6, atol=0)


def test_sinusoid_energy_sits_in_its_bin(stft_config):
    """
    GIVEN a sinusoid at the centre frequency of bin 40
    WHEN its STFT is taken
    THEN every frame peaks at bin 40 and at least 99 % of the energy is within three bins of it
    """
    n = stft_config.window_size + 20 * stft_config.hop
    t = np.arange(n) / stft_config.sample_rate
    freq = 40 * stft_config.sample_rate / stft_config.fft_size
    wave = Waveform(samples=np.sin(2 * np.pi * freq * t))

    power = np.abs(stft(wave, stft_config).data[0]) ** 2

    assert np.all(np.argmax(power, axis=1) == 40)
    assert np.all(power[:, 37:44].sum(axis=1) >= 0.99 * power.sum(axis=1))


def test_stft_of_zeros_is_zero(stft_config):
    spec = stft(Waveform(samples=np.zeros((2, 1000))), stft_config)

    assert np.array_equal(spec.data, np.zeros_like(spec.data))


def test_doubling_amplitude_adds_log_four(stft_config, rng):
    """
    GIVEN a noise signal well above the power floor
    WHEN its amplitude is doubled
    THEN every log-Fbank value rises by log(4)
    """
    wave = Waveform(samples=rng.normal(size=3000))
    fb = mel_filterbank(257, 40, 16000)

    base = logfbank(stft(wave, stft_config), 0, fb).data
    doubled = logfbank(stft(Waveform(samples=2 * wave.samples), stft_config), 0, fb).data

    assert np.allclose(doubled - base, np.log(4.0), atol=1e-9)


def test_wav_round_trip_within_quantisation(tmp_path, rng):
    """
    GIVEN a 2-channel waveform inside [-1, 1]
    WHEN it is written and read back as 16-bit PCM
    THEN samples differ by at most half a quantisation step
    """
    wave = Waveform(samples=rng.uniform(-0.9, 0.9, size=(2, 800)))

    path = write_wav(tmp_path / "a" / "x.wav", wave)
    back = read_wav(path)

    assert back.samples.shape == (2, 800)
    assert np.max(np.abs(back.samples - wave.samples)) <= 0.5 / 32768 + 1e-12


def test_wav_scale_matches_on_write_and_read(tmp_path):
    """
    GIVEN samples on the 16-bit grid, including -1.0, and a full-scale +1.0
    WHEN they are written and read back
    THEN grid values return exactly and +1.0 clips to the largest PCM code
    """
    grid = np.array([-1.0, -0.5, 0.0, 0.25, 1234 / PCM16_SCALE])
    wave = Waveform(samples=np.append(grid, 1.0))

    back = read_wav(write_wav(tmp_path / "grid.wav", wave)).samples[0]

    assert np.array_equal(back[:-1], grid)
    assert back[-1] == (PCM16_SCALE - 1) / PCM16_SCALE


def test_write_wav_rejects_clipping(tmp_path):
    with pytest.raises(SignalError):
        write_wav(tmp_path / "loud.wav", Waveform(samples=np.array([0.0, 1.5])))


def test_read_wav_wrong_rate_raises(tmp_path):
    """
    GIVEN an 8 kHz file
    WHEN it is read expecting 16 kHz
    THEN WavFormatError is raised
    """
    path = write_wav(tmp_path / "slow.wav", Waveform(samples=np.zeros(80), sample_rate=8000))

    with pytest.raises(WavFormatError):
        read_wav(path, expected_rate=16000)


def test_read_wav_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "missing.wav")
