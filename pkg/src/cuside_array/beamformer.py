""" Mask-based MVDR front-end.

Arrays in this module are frame-major: a chunk is ``(frames, mics, bins)`` and masks are
``(frames, bins)``. The filter is the reference-channel MVDR

    w[k] = (Phi_N'^-1 Phi_S u) / trace(Phi_N'^-1 Phi_S)

with ``Phi_N' = Phi_N + (eps * trace(Phi_N) / M + floor) * I`` and ``u`` the one-hot
reference vector, so no steering vector needs to be estimated.
"""
from __future__ import annotations

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from cuside_array.config import MaskNetConfig, ModelConfig, MvdrConfig
from cuside_array.errors import NonFiniteError, ShapeError, SingularCovarianceError
from cuside_array.neural import (ModelParams, Tensor, blstm_forward, dropout, init_blstm,
                                 init_linear, linear, sigmoid)
from cuside_array.signal import MultiChannelSpectrogram, log_magnitude

logger = logging.getLogger(__name__)

SILENT_TRACE = 1e-20
PSD_TOLERANCE = 1e-8


class TimeFrequencyMask(BaseModel):
    """ Real weights in [0, 1] indexed [frame][bin]. """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def in_unit_range(cls, value) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError(f"mask must be (frame, bin), got shape {array.shape}")
        if np.any(~np.isfinite(array)) or np.any(array < 0) or np.any(array > 1):
            raise ValueError("mask values must lie in [0, 1]")
        return array

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class SpatialCovariance(BaseModel):
    """ Per-bin Hermitian M x M matrices.

    Attributes:
        matrices: complex array (bins, M, M).
        fallback_bins: bins whose mask summed to zero and were averaged unweighted.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrices: np.ndarray
    fallback_bins: int = 0

    @model_validator(mode="after")
    def hermitian(self) -> SpatialCovariance:
        m = self.matrices
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ValueError(f"covariance must be (bin, M, M), got {m.shape}")
        if not np.array_equal(m, np.conj(np.swapaxes(m, 1, 2))):
            raise ValueError("covariance matrices must be exactly Hermitian")
        return self

    @property
    def num_mics(self) -> int:
        return self.matrices.shape[1]

    def is_psd(self, tolerance: float = PSD_TOLERANCE) -> bool:
        """ Smallest eigenvalue of every bin is at least ``-tolerance * trace``. """
        eig = np.linalg.eigvalsh(self.matrices)
        trace = np.real(np.trace(self.matrices, axis1=1, axis2=2))
        return bool(np.all(eig.min(axis=1) >= -tolerance * np.maximum(trace, 0.0) - 1e-300))


class MvdrWeights(BaseModel):
    """ Filter per bin, (bins, M), plus the number of bins that fell back to the reference. """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray
    silent_bins: int = 0


class EnhancedChunk(BaseModel):
    """ Front-end output over a whole context-sensitive chunk.

    Attributes:
        enhanced: complex (frames, bins) single-channel spectrum, context frames included.
        weights: MVDR filter that produced it.
        core: positions of the core frames inside ``enhanced``.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    enhanced: np.ndarray
    weights: MvdrWeights
    speech_mask: TimeFrequencyMask | None = None
    noise_mask: TimeFrequencyMask | None = None
    core: slice = slice(None)
    fallback_bins: int = 0


def frame_major(spec: MultiChannelSpectrogram | np.ndarray) -> np.ndarray:
    """ (channels, frames, bins) to (frames, channels, bins). """
    data = spec.data if isinstance(spec, MultiChannelSpectrogram) else np.asarray(spec)
    return np.ascontiguousarray(np.transpose(data, (1, 0, 2)))


def hermitian(matrices: np.ndarray) -> np.ndarray:
    return 0.5 * (matrices + np.conj(np.swapaxes(matrices, -1, -2)))


def _check_chunk(chunk_spec: np.ndarray, mask_shape: tuple[int, ...] | None = None) -> None:
    if chunk_spec.ndim != 3:
        raise ShapeError(f"chunk must be (frame, mic, bin), got {chunk_spec.shape}")
    if mask_shape is not None and mask_shape != (chunk_spec.shape[0], chunk_spec.shape[2]):
        raise ShapeError(f"mask {mask_shape} does not match chunk {chunk_spec.shape}")


def _weighted_scm(chunk_spec: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray,
                                                                         np.ndarray]:
    """ Returns (matrices, per-bin weight sums, bins that fell back to unweighted averaging).

    ``weights`` is (frames, bins) and already zero on padded frames.
    """
    sums = weights.sum(axis=0)
    fallback = sums <= 0
    if np.any(fallback):
        present = (np.abs(chunk_spec).sum(axis=(1, 2)) > 0).astype(np.float64)
        present = present if present.sum() > 0 else np.ones(chunk_spec.shape[0])
        weights = weights.copy()
        weights[:, fallback] = present[:, None]
        sums = weights.sum(axis=0)
    phi = np.einsum("tk,tmk,tnk->kmn", weights, chunk_spec, np.conj(chunk_spec))
    return hermitian(phi / sums[:, None, None]), sums, fallback


def estimate_scm(chunk_spec: np.ndarray, mask: TimeFrequencyMask | np.ndarray,
                 valid: np.ndarray | None = None) -> SpatialCovariance:
    """ Mask-weighted spatial covariance per frequency bin.

    Args:
        chunk_spec: complex (frames, mics, bins).
        mask: (frames, bins) weights.
        valid: optional boolean (frames,); False frames are left out of the statistics.

    Returns:
        SpatialCovariance: ``sum_t m x x^H / sum_t m`` per bin. A bin whose mask sums to zero
        is averaged without weights and counted in ``fallback_bins``.

    Raises:
        ShapeError: If the mask does not match the chunk.
    """
    values = mask.values if isinstance(mask, TimeFrequencyMask) else np.asarray(mask, float)
    _check_chunk(chunk_spec, values.shape)
    if valid is not None:
        values = values * np.asarray(valid, dtype=np.float64)[:, None]
    matrices, _, fallback = _weighted_scm(chunk_spec, values)
    count = int(fallback.sum())
    if count:
        logger.warning("%d bins had an all-zero mask, used unweighted covariance", count)
    return SpatialCovariance(matrices=matrices, fallback_bins=count)


def _loaded_noise(phi_n: np.ndarray, cfg: MvdrConfig) -> np.ndarray:
    """ ``Phi_N + (eps * trace(Phi_N) / M + loading_floor) * I`` per bin.

    The relative term scales with the noise power; the absolute ``loading_floor`` keeps an
    all-zero noise covariance invertible, for example in a silent or zero-padded chunk.
    """
    m = phi_n.shape[-1]
    load = cfg.diagonal_loading * np.real(np.trace(phi_n, axis1=1, axis2=2)) / m
    return phi_n + (load + cfg.loading_floor)[:, None, None] * np.eye(m)


def _solve(phi_s: np.ndarray, phi_n: np.ndarray, cfg: MvdrConfig) -> dict[str, np.ndarray]:
    """ Closed-form MVDR with every intermediate the adjoint needs. """
    if not (np.all(np.isfinite(phi_s)) and np.all(np.isfinite(phi_n))):
        raise NonFiniteError("non-finite spatial covariance passed to the MVDR solver")
    num_mics = phi_n.shape[-1]
    if not 0 <= cfg.reference_channel < num_mics:
        raise ShapeError(f"reference channel {cfg.reference_channel} with {num_mics} mics")
    loaded = _loaded_noise(phi_n, cfg)
    condition = np.linalg.cond(loaded)
    bad = np.flatnonzero(~np.isfinite(condition) | (condition > cfg.max_condition))
    if bad.size:
        raise SingularCovarianceError(int(bad[0]), float(condition[bad[0]]))
    inverse = np.linalg.inv(loaded)
    gain = inverse @ phi_s
    trace = np.real(np.trace(gain, axis1=1, axis2=2))
    silent = np.abs(trace) <= SILENT_TRACE
    safe = np.where(silent, 1.0, trace)
    weights = gain[:, :, cfg.reference_channel] / safe[:, None]
    weights[silent] = 0.0
    weights[silent, cfg.reference_channel] = 1.0
    if not np.all(np.isfinite(weights)):
        raise NonFiniteError("MVDR weights are not finite")
    return {"inverse": inverse, "gain": gain, "trace": safe, "silent": silent,
            "weights": weights}


def mvdr_weights(phi_s: SpatialCovariance, phi_n: SpatialCovariance,
                 cfg: MvdrConfig) -> MvdrWeights:
    """ Reference-channel MVDR filter per bin.

    Bins where ``trace(Phi_N'^-1 Phi_S)`` vanishes have no speech to preserve; they get the
    one-hot reference filter and are counted in ``silent_bins``.

    Raises:
        ShapeError: If the covariances differ in shape or the reference channel is out of range.
        SingularCovarianceError: If a loaded noise covariance is ill-conditioned; names the bin.
        NonFiniteError: If any input or output is NaN or infinite.
    """
    if phi_s.matrices.shape != phi_n.matrices.shape:
        raise ShapeError(f"speech {phi_s.matrices.shape} vs noise {phi_n.matrices.shape}")
    solved = _solve(phi_s.matrices, phi_n.matrices, cfg)
    count = int(solved["silent"].sum())
    if count:
        logger.debug("%d silent bins use the reference channel", count)
    return MvdrWeights(weights=solved["weights"], silent_bins=count)


def apply_beamformer(weights: MvdrWeights | np.ndarray, chunk_spec: np.ndarray) -> np.ndarray:
    """ ``y[t, k] = w[k]^H x[t, :, k]`` for a (frames, mics, bins) chunk. """
    w = weights.weights if isinstance(weights, MvdrWeights) else np.asarray(weights)
    _check_chunk(chunk_spec)
    if w.shape != (chunk_spec.shape[2], chunk_spec.shape[1]):
        raise ShapeError(f"weights {w.shape} do not match chunk {chunk_spec.shape}")
    return np.einsum("km,tmk->tk", np.conj(w), chunk_spec)


def init_mask_net(params: ModelParams, cfg: MaskNetConfig, num_bins: int,
                  rng: np.random.Generator) -> None:
    """ Adds the BLSTM mask estimator and its frozen input statistics to ``params``. """
    d_in = num_bins
    for layer in range(cfg.layers):
        init_blstm(params, f"mask.l{layer}", d_in, cfg.hidden_per_direction, rng)
        d_in = 2 * cfg.hidden_per_direction
    init_linear(params, "mask.speech", d_in, num_bins, rng)
    init_linear(params, "mask.noise", d_in, num_bins, rng)
    params.add("mask.input.mean", np.zeros(num_bins), frozen=True)
    params.add("mask.input.std", np.ones(num_bins), frozen=True)


def mask_features(reference: np.ndarray, params: ModelParams) -> np.ndarray:
    """ Normalized log-magnitude of the reference channel, (frames, bins). """
    return ((log_magnitude(reference) - params["mask.input.mean"].value)
            / params["mask.input.std"].value)


def mask_net_forward(chunk_features: np.ndarray, params: ModelParams, cfg: MaskNetConfig,
                     train_mode: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """ Speech and noise masks for one chunk.

    The BLSTM runs from zero state over the chunk only.

    Args:
        chunk_features: (frames, bins) network input.
        params: Model parameters holding the ``mask.*`` tensors.
        cfg: Layer sizes and dropout.
        train_mode: Enables dropout, which then needs ``rng``.

    Returns:
        tuple: (speech mask, noise mask) as (frames, bins) tensors in (0, 1).

    Raises:
        ShapeError: If the feature width does not match the parameters.
    """
    expected = params["mask.l0.fw.w_x"].shape[0]
    if chunk_features.ndim != 2 or chunk_features.shape[1] != expected:
        raise ShapeError(f"mask net expects (frames, {expected}), got {chunk_features.shape}")
    h = Tensor(chunk_features)
    for layer in range(cfg.layers):
        h = blstm_forward(h, params, f"mask.l{layer}")
        h = dropout(h, cfg.dropout, rng, train_mode)
    speech = sigmoid(linear(h, params["mask.speech.w"], params["mask.speech.b"]))
    noise = sigmoid(linear(h, params["mask.noise.w"], params["mask.noise.b"]))
    return speech, noise


def beamform_power(stats_spec: np.ndarray, speech_mask: Tensor, noise_mask: Tensor,
                   apply_spec: np.ndarray, cfg: MvdrConfig,
                   valid: np.ndarray | None = None) -> tuple[Tensor, MvdrWeights]:
    """ Differentiable mask-to-power MVDR: ``|w(masks)^H x|^2`` over ``apply_spec``.

    Covariances are estimated from ``stats_spec`` under the two masks; the filter is then applied
    to ``apply_spec``, which may hold more frames (real future context) than the statistics.
    The backward pass is the exact adjoint of the closed-form filter.

    Args:
        stats_spec: complex (frames, mics, bins) chunk the masks describe.
        speech_mask: (frames, bins) tensor.
        noise_mask: (frames, bins) tensor.
        apply_spec: complex (frames', mics, bins) frames to filter.
        cfg: MVDR settings.
        valid: boolean (frames,); padded frames are excluded from the statistics.

    Returns:
        tuple: (power tensor (frames', bins), the filter used).
    """
    _check_chunk(stats_spec, speech_mask.shape)
    _check_chunk(apply_spec)
    if noise_mask.shape != speech_mask.shape:
        raise ShapeError(f"speech mask {speech_mask.shape} vs noise mask {noise_mask.shape}")
    keep = np.ones(stats_spec.shape[0]) if valid is None else np.asarray(valid, np.float64)
    ms = speech_mask.value * keep[:, None]
    mn = noise_mask.value * keep[:, None]
    phi_s, sum_s, fb_s = _weighted_scm(stats_spec, ms)
    phi_n, sum_n, fb_n = _weighted_scm(stats_spec, mn)
    solved = _solve(phi_s, phi_n, cfg)
    w = solved["weights"]
    y = np.einsum("km,tmk->tk", np.conj(w), apply_spec)
    power = np.abs(y) ** 2
    num_mics = stats_spec.shape[1]

    def backward(g):
        # v = dL/dconj(w) per bin
        v = np.einsum("tk,tk,tmk->km", g, np.conj(y), apply_spec)
        u = np.zeros(num_mics)
        u[cfg.reference_channel] = 1.0
        vw = np.einsum("km,km->k", np.conj(v), w)
        b = (u[None, :, None] * np.conj(v)[:, None, :] - vw[:, None, None] * np.eye(num_mics))
        b = b / solved["trace"][:, None, None]
        b[solved["silent"]] = 0.0
        c_s = b @ solved["inverse"]
        c_a = -solved["gain"] @ c_s
        c_n = c_a + (cfg.diagonal_loading / num_mics) * np.trace(
            c_a, axis1=1, axis2=2)[:, None, None] * np.eye(num_mics)
        grads = []
        for c, phi, sums, fallback in ((c_s, phi_s, sum_s, fb_s), (c_n, phi_n, sum_n, fb_n)):
            quad = np.einsum("tmk,kmn,tnk->tk", np.conj(stats_spec), c, stats_spec)
            base = np.einsum("kmn,knm->k", phi, c)
            grad = 2.0 * np.real(quad - base[None, :]) / sums[None, :]
            grad[:, fallback] = 0.0
            grads.append(grad * keep[:, None])
        return tuple(grads)

    out = Tensor.from_op(power, (speech_mask, noise_mask), backward, "mvdr_power")
    return out, MvdrWeights(weights=w, silent_bins=int(solved["silent"].sum()))


def reference_power(apply_spec: np.ndarray, reference_channel: int = 0) -> Tensor:
    """ Power of the reference channel, the single-channel baseline front-end. """
    _check_chunk(apply_spec)
    return Tensor(np.abs(apply_spec[:, reference_channel, :]) ** 2)


def one_hot_weights(num_bins: int, num_mics: int, reference_channel: int = 0) -> MvdrWeights:
    w = np.zeros((num_bins, num_mics), dtype=np.complex128)
    w[:, reference_channel] = 1.0
    return MvdrWeights(weights=w)


def enhance_chunk(chunk_spec: np.ndarray, params: ModelParams | None, cfg: ModelConfig,
                  valid: np.ndarray | None = None, core: slice = slice(None),
                  masks: tuple[np.ndarray, np.ndarray] | None = None) -> EnhancedChunk:
    """ Mask estimation, covariances, MVDR and filtering over one context-sensitive chunk.

    Args:
        chunk_spec: complex (frames, mics, bins), context frames included.
        params: Model parameters; unused when ``masks`` is given.
        cfg: Model configuration.
        valid: boolean (frames,) marking real (non-padded) frames.
        core: Core positions inside the chunk, passed through to the result.
        masks: Optional (speech, noise) arrays that replace the mask network (oracle masks).

    Returns:
        EnhancedChunk: all frames of the chunk, filtered.
    """
    _check_chunk(chunk_spec)
    num_frames, num_mics, num_bins = chunk_spec.shape
    ref = cfg.mvdr.reference_channel
    if cfg.frontend == "reference":
        return EnhancedChunk(enhanced=chunk_spec[:, ref, :].copy(), core=core,
                             weights=one_hot_weights(num_bins, num_mics, ref))
    if masks is None:
        speech_t, noise_t = mask_net_forward(mask_features(chunk_spec[:, ref, :], params),
                                             params, cfg.mask_net)
        speech, noise = speech_t.value, noise_t.value
    else:
        speech, noise = (np.asarray(m, dtype=np.float64) for m in masks)
        if speech.shape != (num_frames, num_bins) or noise.shape != speech.shape:
            raise ShapeError(f"oracle masks {speech.shape}/{noise.shape} vs chunk "
                             f"{chunk_spec.shape}")
    phi_s = estimate_scm(chunk_spec, speech, valid)
    phi_n = estimate_scm(chunk_spec, noise, valid)
    weights = mvdr_weights(phi_s, phi_n, cfg.mvdr)
    return EnhancedChunk(enhanced=apply_beamformer(weights, chunk_spec), weights=weights,
                         speech_mask=TimeFrequencyMask(values=speech),
                         noise_mask=TimeFrequencyMask(values=noise), core=core,
                         fallback_bins=phi_s.fallback_bins + phi_n.fallback_bins)
