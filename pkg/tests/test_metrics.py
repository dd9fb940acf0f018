""" Tests for SI-SDR, SNR and the matched-pair significance test. """
import numpy as np
import pytest

from cuside_array.errors import ShapeError
from cuside_array.metrics import matched_pair_test, output_snr, si_sdr, snr


def test_si_sdr_ignores_scale(rng):
    """
    GIVEN a reference and a noisy estimate
    WHEN the estimate is scaled by 3
    THEN SI-SDR is unchanged
    """
    reference = rng.normal(size=1000)
    estimate = reference + 0.1 * rng.normal(size=1000)

    assert si_sdr(reference, 3.0 * estimate) == pytest.approx(si_sdr(reference, estimate))


def test_si_sdr_of_known_mixture(rng):
    """
    GIVEN an estimate made of the reference plus an orthogonal error at one tenth its power
    WHEN SI-SDR is computed
    THEN it is 10 dB
    """
    reference = np.sin(np.arange(1000) * 2 * np.pi / 100)
    error = np.cos(np.arange(1000) * 2 * np.pi / 100)

    value = si_sdr(reference, reference + np.sqrt(0.1) * error)

    assert value == pytest.approx(10.0, abs=1e-6)


def test_snr_and_output_snr(rng):
    reference = rng.normal(size=500)

    assert snr(reference, 1.1 * reference) == pytest.approx(20.0, abs=1e-6)
    assert output_snr(np.ones(4), 0.1 * np.ones(4)) == pytest.approx(20.0, abs=1e-6)


def test_metric_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        si_sdr(np.ones(10), np.ones(9))


def test_matched_pair_test_detects_consistent_difference():
    """
    GIVEN 20 paired error counts where system b is always better
    WHEN the signed-rank test runs
    THEN the difference is significant
    """
    errors_a = [3 + i % 4 for i in range(20)]
    errors_b = [a - 1 - i % 3 for i, a in enumerate(errors_a)]

    result = matched_pair_test(errors_a, errors_b, "none", "simulated")

    assert result.num_pairs == 20
    assert result.significant


def test_matched_pair_test_identical_systems_is_undefined():
    result = matched_pair_test([1, 2, 3], [1, 2, 3])

    assert result.p_value is None
    assert not result.significant


def test_matched_pair_test_length_mismatch_raises():
    with pytest.raises(ShapeError):
        matched_pair_test([1, 2], [1])
