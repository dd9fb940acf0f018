""" Tests for mask-based spatial covariances, the MVDR filter and the mask network. """
import numpy as np
import pytest

from cuside_array.beamformer import (SpatialCovariance, apply_beamformer, beamform_power,
                                     enhance_chunk, estimate_scm, init_mask_net, mask_net_forward,
                                     mvdr_weights)
from cuside_array.config import MaskNetConfig, ModelConfig, MvdrConfig
from cuside_array.errors import NonFiniteError, ShapeError, SingularCovarianceError
from cuside_array.neural import ModelParams, Tensor, gradient_check, mul_const, total


def _complex(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def _rank_one(h: np.ndarray) -> SpatialCovariance:
    """ h h^H per bin for h of shape (bins, M). """
    return SpatialCovariance(matrices=np.einsum("km,kn->kmn", h, np.conj(h)))


def _identity(bins: int, mics: int) -> SpatialCovariance:
    return SpatialCovariance(matrices=np.tile(np.eye(mics, dtype=complex), (bins, 1, 1)))


def test_estimate_scm_is_hermitian_psd(rng):
    """
    GIVEN a random 4-microphone chunk and a random mask
    WHEN the spatial covariance is estimated
    THEN every bin is exactly Hermitian and positive semi-definite
    """
    chunk = _complex(rng, 20, 4, 9)

    scm = estimate_scm(chunk, rng.uniform(size=(20, 9)))

    assert scm.matrices.shape == (9, 4, 4)
    assert scm.is_psd()
    assert scm.fallback_bins == 0


def test_estimate_scm_ignores_invalid_frames(rng):
    """
    GIVEN a chunk whose first frames are padding filled with garbage
    WHEN the covariance is estimated with a valid mask
    THEN it equals the covariance of the valid frames alone
    """
    chunk = _complex(rng, 10, 2, 3)
    mask = rng.uniform(size=(10, 3))
    valid = np.arange(10) >= 4

    with_valid = estimate_scm(chunk, mask, valid)
    trimmed = estimate_scm(chunk[4:], mask[4:])

    assert np.allclose(with_valid.matrices, trimmed.matrices)


def test_all_zero_mask_falls_back_to_plain_average(rng):
    chunk = _complex(rng, 8, 2, 5)

    scm = estimate_scm(chunk, np.zeros((8, 5)))

    assert scm.fallback_bins == 5
    assert np.allclose(scm.matrices, estimate_scm(chunk, np.ones((8, 5))).matrices)


def test_estimate_scm_mask_shape_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        estimate_scm(_complex(rng, 8, 2, 5), np.ones((8, 4)))


def test_non_hermitian_covariance_rejected():
    with pytest.raises(ValueError):
        SpatialCovariance(matrices=np.array([[[1.0, 2.0], [0.0, 1.0]]], dtype=complex))


def test_mvdr_is_distortionless_for_rank_one_speech(rng):
    """
    GIVEN rank-one speech statistics h h^H and white noise
    WHEN the reference-channel MVDR filter is computed
    THEN w^H h equals the reference-channel transfer h_ref in every bin
    """
    h = _complex(rng, 6, 4)

    weights = mvdr_weights(_rank_one(h), _identity(6, 4), MvdrConfig())

    response = np.einsum("km,km->k", np.conj(weights.weights), h)
    assert np.allclose(response, h[:, 0], rtol=1e-5)


def test_single_microphone_filter_is_identity(rng):
    """
    GIVEN a one-microphone array
    WHEN the MVDR filter is computed
    THEN every weight is exactly 1
    """
    phi_s = estimate_scm(_complex(rng, 10, 1, 7), rng.uniform(0.1, 1.0, size=(10, 7)))
    phi_n = estimate_scm(_complex(rng, 10, 1, 7), rng.uniform(0.1, 1.0, size=(10, 7)))

    weights = mvdr_weights(phi_s, phi_n, MvdrConfig())

    assert np.array_equal(weights.weights, np.ones((7, 1), dtype=complex))


def test_silent_speech_bins_use_reference_channel(rng):
    h = _complex(rng, 4, 3)
    h[1] = 0.0

    weights = mvdr_weights(_rank_one(h), _identity(4, 3), MvdrConfig(reference_channel=2))

    assert weights.silent_bins == 1
    assert np.array_equal(weights.weights[1], [0, 0, 1])


def test_ill_conditioned_noise_raises():
    """
    GIVEN a noise covariance with condition number 1e14 and no loading
    WHEN the filter is computed
    THEN SingularCovarianceError names the bin
    """
    phi_n = SpatialCovariance(matrices=np.array([np.eye(2), np.diag([1.0, 1e-14])],
                                                dtype=complex))
    cfg = MvdrConfig(diagonal_loading=0.0, loading_floor=0.0)

    with pytest.raises(SingularCovarianceError) as err:
        mvdr_weights(_identity(2, 2), phi_n, cfg)

    assert err.value.bin_index == 1


def test_loading_floor_keeps_zero_noise_invertible(rng):
    """
    GIVEN rank-one speech statistics and an all-zero noise covariance
    WHEN the filter is computed with the default loading floor, and with no floor
    THEN the first is finite and distortionless, the second raises SingularCovarianceError
    """
    h = _complex(rng, 3, 2)
    zero_noise = SpatialCovariance(matrices=np.zeros((3, 2, 2), dtype=complex))

    weights = mvdr_weights(_rank_one(h), zero_noise, MvdrConfig())

    response = np.einsum("km,km->k", np.conj(weights.weights), h)
    assert np.all(np.isfinite(weights.weights))
    assert np.allclose(response, h[:, 0])
    with pytest.raises(SingularCovarianceError):
        mvdr_weights(_rank_one(h), zero_noise, MvdrConfig(loading_floor=0.0))


def test_estimate_scm_matches_direct_summation(rng):
    """
    GIVEN a random chunk and mask
    WHEN the covariance is estimated
    THEN each bin equals sum_t m x x^H / sum_t m summed frame by frame, within 1e-10
    """
    chunk = _complex(rng, 7, 3, 4)
    mask = rng.uniform(0.1, 1.0, size=(7, 4))

    scm = estimate_scm(chunk, mask)

    for k in range(4):
        expected = np.zeros((3, 3), dtype=complex)
        for t in range(7):
            x = chunk[t, :, k]
            expected += mask[t, k] * np.outer(x, np.conj(x))
        expected /= mask[:, k].sum()
        assert np.max(np.abs(scm.matrices[k] - expected)) <= 1e-10


def test_non_finite_chunk_raises(rng):
    chunk = _complex(rng, 6, 2, 3)
    chunk[2, 0, 1] = np.nan
    masks = [Tensor(np.full((6, 3), 0.5)) for _ in range(2)]
    with pytest.raises(NonFiniteError):
        beamform_power(chunk, *masks, chunk, MvdrConfig())


def test_reference_channel_out_of_range_raises(rng):
    with pytest.raises(ShapeError):
        mvdr_weights(_identity(3, 2), _identity(3, 2), MvdrConfig(reference_channel=2))


def test_apply_beamformer_shape_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        apply_beamformer(np.ones((4, 2)), _complex(rng, 3, 2, 5))


def test_beamform_power_gradient_matches_finite_differences(rng):
    """
    GIVEN random speech and noise masks over a small 3-microphone chunk
    WHEN the gradient of a weighted power through the closed-form MVDR is checked
    THEN the back-propagated adjoint agrees with finite differences
    """
    chunk = _complex(rng, 6, 3, 4)
    extended = np.concatenate([chunk, _complex(rng, 2, 3, 4)])
    speech = Tensor(rng.uniform(0.2, 0.8, size=(6, 4)), requires_grad=True)
    noise = Tensor(rng.uniform(0.2, 0.8, size=(6, 4)), requires_grad=True)
    weights = rng.normal(size=(8, 4))

    def build():
        power, _ = beamform_power(chunk, speech, noise, extended, MvdrConfig())
        return total(mul_const(power, weights))

    errors = gradient_check(build, {"speech": speech, "noise": noise})

    assert max(errors.values()) < 1e-3, errors


def test_mask_net_outputs_are_probabilities(rng):
    cfg = MaskNetConfig(layers=2, hidden_per_direction=3, dropout=0.0)
    params = ModelParams()
    init_mask_net(params, cfg, 5, rng)

    speech, noise = mask_net_forward(rng.normal(size=(7, 5)), params, cfg)

    assert speech.shape == noise.shape == (7, 5)
    assert np.all((speech.value > 0) & (speech.value < 1))


def test_mask_net_wrong_width_raises(rng):
    cfg = MaskNetConfig(layers=1, hidden_per_direction=2)
    params = ModelParams()
    init_mask_net(params, cfg, 5, rng)
    with pytest.raises(ShapeError):
        mask_net_forward(rng.normal(size=(7, 6)), params, cfg)


def test_reference_frontend_passes_channel_through(rng):
    chunk = _complex(rng, 5, 3, 4)
    cfg = ModelConfig(frontend="reference", mvdr=MvdrConfig(reference_channel=1))

    out = enhance_chunk(chunk, None, cfg)

    assert np.array_equal(out.enhanced, chunk[:, 1, :])


def test_enhance_chunk_with_oracle_masks(rng):
    """
    GIVEN a chunk of rank-one speech plus weak white noise and oracle masks
    WHEN it is enhanced
    THEN the output follows the reference-channel speech closely
    """
    h = _complex(rng, 4, 3)
    source = _complex(rng, 30, 4)
    speech = np.einsum("tk,km->tmk", source, h)
    noise = 0.01 * _complex(rng, 30, 3, 4)
    s_pow = np.abs(speech[:, 0, :]) ** 2
    n_pow = np.abs(noise[:, 0, :]) ** 2
    mask = s_pow / (s_pow + n_pow)

    out = enhance_chunk(speech + noise, None, ModelConfig(), masks=(mask, 1.0 - mask))

    error = np.sum(np.abs(out.enhanced - speech[:, 0, :]) ** 2)
    assert error / np.sum(s_pow) < 1e-2
    assert out.speech_mask is not None
