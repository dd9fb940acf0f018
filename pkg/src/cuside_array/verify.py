""" Registered oracle and invariant checks run by ``cuside-array verify``.

Each check draws its own random instances from a seeded generator, compares the package against
an independent oracle (exhaustive enumeration, finite differences, closed-form identities) and
raises ``VerificationError`` when the comparison fails. ``run_checks`` can perturb one named
check to confirm that failures are detected.
"""
from __future__ import annotations

import itertools
import logging
import time
from typing import Callable

import numpy as np
from pydantic import BaseModel
from scipy.special import logsumexp

from cuside_array.asr import TokenSequence, collapse, ctc_loss, ctc_loss_op, encoder_forward
from cuside_array.beamformer import (SpatialCovariance, apply_beamformer, beamform_power,
                                     estimate_scm, hermitian, mask_net_forward, mvdr_weights)
from cuside_array.chunking import extract_chunk, plan_chunks, stitch_cores
from cuside_array.config import (EncoderConfig, FbankConfig, MaskNetConfig, ModelConfig,
                                 MvdrConfig, SimNetConfig, StftConfig)
from cuside_array.cuside import init_model_params, simulate_future
from cuside_array.errors import CusideError, VerificationError
from cuside_array.neural import (ModelParams, Tensor, add, blstm_forward, gradient_check,
                                 gru_sequence, init_blstm, l1_loss, linear, log_softmax, mul_const,
                                 sigmoid, tanh, total)
from cuside_array.signal import Waveform, istft, stft

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-3
CTC_TOLERANCE = 1e-6

CheckFn = Callable[[np.random.Generator, float], str]
CHECKS: dict[str, CheckFn] = {}


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str
    seconds: float


def register(name: str) -> Callable[[CheckFn], CheckFn]:
    """ Adds a check to the registry under ``name``. """
    def decorator(fn: CheckFn) -> CheckFn:
        if name in CHECKS:
            raise KeyError(f"check {name} registered twice")
        CHECKS[name] = fn
        return fn
    return decorator


def tiny_model_config(vocab_size: int = 3) -> ModelConfig:
    """ A model small enough for finite differences over every parameter. """
    return ModelConfig(
        vocab_size=vocab_size, stft=StftConfig(fft_size=16, window_size=16, hop=8),
        fbank=FbankConfig(mel_bins=4),
        mask_net=MaskNetConfig(layers=1, hidden_per_direction=2, dropout=0.0),
        encoder=EncoderConfig(layers=1, hidden_per_direction=2, dropout=0.0),
        sim_net=SimNetConfig(layers=1, hidden=3, right_frames=2))


def brute_force_ctc(logits: np.ndarray, labels: TokenSequence) -> float:
    """ CTC loss by enumerating every frame path; exponential in the number of frames. """
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    num_frames, vocab = logp.shape
    scores = [logp[np.arange(num_frames), path].sum()
              for path in itertools.product(range(vocab), repeat=num_frames)
              if collapse(path) == labels.ids]
    return float(-logsumexp(scores)) if scores else float("inf")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise VerificationError(message)


def _weigher(shape: tuple[int, ...], rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """ Random linear functional, so that every output entry reaches the loss. """
    weights = rng.normal(size=shape)
    return lambda value: total(mul_const(value, weights))


def _check_gradients(name: str, loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                     perturb: float) -> str:
    errors = gradient_check(loss_fn, tensors)
    worst = max(errors.values()) + perturb
    _require(worst <= GRADIENT_TOLERANCE,
             f"{name}: relative gradient error {worst:.2e} > {GRADIENT_TOLERANCE}")
    return f"{len(tensors)} tensors, worst relative error {worst:.1e}"


@register("ctc_brute_force")
def check_ctc_brute_force(rng: np.random.Generator, perturb: float,
                          instances: int = 500) -> str:
    """ Dynamic-programming CTC against exhaustive path enumeration. """
    checked = 0
    worst = 0.0
    while checked < instances:
        num_frames = int(rng.integers(1, 7))
        vocab = int(rng.integers(2, 4))
        labels = TokenSequence(ids=[int(i) for i in rng.integers(1, vocab,
                                                                 size=rng.integers(0, 4))])
        logits = rng.normal(scale=2.0, size=(num_frames, vocab))
        expected = brute_force_ctc(logits, labels)
        if not np.isfinite(expected):
            continue
        loss, _ = ctc_loss(logits, labels)
        loss *= 1.0 + perturb
        worst = max(worst, abs(loss - expected) / max(abs(expected), 1e-12))
        checked += 1
    _require(worst <= CTC_TOLERANCE, f"CTC differs from enumeration by {worst:.2e} relative")
    return f"{checked} instances, worst relative error {worst:.1e}"


@register("ctc_gradient")
def check_ctc_gradient(rng: np.random.Generator, perturb: float, instances: int = 20) -> str:
    worst = 0.0
    for _ in range(instances):
        labels = TokenSequence(ids=[int(i) for i in rng.integers(1, 4, size=rng.integers(1, 4))])
        logits = Tensor(rng.normal(size=(int(rng.integers(6, 10)), 4)), requires_grad=True)
        errors = gradient_check(lambda: ctc_loss_op(logits, labels), {"logits": logits})
        worst = max(worst, errors["logits"])
    worst += perturb
    _require(worst <= GRADIENT_TOLERANCE, f"CTC gradient error {worst:.2e}")
    return f"{instances} instances, worst relative error {worst:.1e}"


@register("layer_gradients")
def check_layer_gradients(rng: np.random.Generator, perturb: float) -> str:
    """ Linear, sigmoid, tanh, log-softmax, GRU, BLSTM and L1 loss against finite differences. """
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    weigh = _weigher((4, 5), rng)
    details = [
        _check_gradients("linear", lambda: weigh(linear(x, w, b)), {"x": x, "w": w, "b": b},
                         perturb),
        _check_gradients("sigmoid", lambda: weigh(sigmoid(linear(x, w, b))), {"x": x}, perturb),
        _check_gradients("tanh", lambda: weigh(tanh(linear(x, w, b))), {"w": w}, perturb),
        _check_gradients("log_softmax", lambda: weigh(log_softmax(linear(x, w, b))),
                         {"x": x, "b": b}, perturb),
    ]
    hidden = 2
    h0 = Tensor(rng.normal(size=hidden), requires_grad=True)
    gru = {"w_x": Tensor(rng.normal(scale=0.5, size=(3, 3 * hidden)), requires_grad=True),
           "w_h": Tensor(rng.normal(scale=0.5, size=(hidden, 3 * hidden)), requires_grad=True),
           "b_x": Tensor(rng.normal(scale=0.1, size=3 * hidden), requires_grad=True),
           "b_h": Tensor(rng.normal(scale=0.1, size=3 * hidden), requires_grad=True)}
    weigh_gru = _weigher((4, hidden), rng)
    details.append(_check_gradients(
        "gru", lambda: weigh_gru(gru_sequence(x, h0, gru["w_x"], gru["w_h"], gru["b_x"],
                                              gru["b_h"])),
        {"x": x, "h0": h0, **gru}, perturb))
    params = ModelParams()
    init_blstm(params, "blstm", 3, hidden, rng)
    weigh_blstm = _weigher((4, 2 * hidden), rng)
    details.append(_check_gradients(
        "blstm", lambda: weigh_blstm(blstm_forward(x, params, "blstm")),
        {"x": x, **dict(params.items())}, perturb))
    target = rng.normal(size=(4, 5))
    mask = np.array([[True], [False], [True], [True]])
    details.append(_check_gradients(
        "l1_loss", lambda: l1_loss(linear(x, w, b), target, mask), {"w": w, "b": b}, perturb))
    return "; ".join(details)


@register("network_gradients")
def check_network_gradients(rng: np.random.Generator, perturb: float) -> str:
    """ Mask network, encoder and simulator of a tiny model against finite differences. """
    cfg = tiny_model_config()
    params = init_model_params(cfg, seed=int(rng.integers(2 ** 31)))
    frames = 5
    features = rng.normal(size=(frames, cfg.stft.num_bins))
    weigh_speech = _weigher((frames, cfg.stft.num_bins), rng)
    weigh_noise = _weigher((frames, cfg.stft.num_bins), rng)

    def mask_loss() -> Tensor:
        speech, noise = mask_net_forward(features, params, cfg.mask_net)
        return add(weigh_speech(speech), weigh_noise(noise))

    fbank = rng.normal(size=(frames, cfg.fbank.mel_bins))
    weigh_enc = _weigher((frames, cfg.vocab_size), rng)
    weigh_sim = _weigher((cfg.sim_net.right_frames, cfg.fbank.mel_bins), rng)
    trainable = params.trainable()
    return "; ".join([
        _check_gradients("mask_net", mask_loss,
                         {n: t for n, t in trainable.items() if n.startswith("mask.")}, perturb),
        _check_gradients("encoder", lambda: weigh_enc(encoder_forward(fbank, params,
                                                                      cfg.encoder)),
                         {n: t for n, t in trainable.items() if n.startswith("enc.")}, perturb),
        _check_gradients("simulator",
                         lambda: weigh_sim(simulate_future(fbank, None, params, cfg.sim_net)[0]),
                         {n: t for n, t in trainable.items() if n.startswith("sim.")}, perturb),
    ])


@register("mvdr_gradient")
def check_mvdr_gradient(rng: np.random.Generator, perturb: float) -> str:
    """ Back-propagation through the closed-form MVDR filter. """
    frames, mics, bins = 6, 3, 2
    spec = rng.normal(size=(frames, mics, bins)) + 1j * rng.normal(size=(frames, mics, bins))
    speech = Tensor(rng.uniform(0.1, 0.9, size=(frames, bins)), requires_grad=True)
    noise = Tensor(rng.uniform(0.1, 0.9, size=(frames, bins)), requires_grad=True)
    weigh = _weigher((frames, bins), rng)
    return _check_gradients(
        "mvdr", lambda: weigh(beamform_power(spec, speech, noise, spec, MvdrConfig())[0]),
        {"speech_mask": speech, "noise_mask": noise}, perturb)


@register("mvdr_single_mic")
def check_mvdr_single_mic(rng: np.random.Generator, perturb: float, bins: int = 257) -> str:
    """ With one microphone the filter is exactly one in every bin. """
    phi_s = SpatialCovariance(matrices=rng.uniform(0.0, 2.0, size=(bins, 1, 1)) + 0j)
    phi_n = SpatialCovariance(matrices=rng.uniform(1e-3, 2.0, size=(bins, 1, 1)) + 0j)
    weights = mvdr_weights(phi_s, phi_n, MvdrConfig()).weights + perturb
    _require(np.array_equal(weights, np.ones((bins, 1))), "M=1 filter is not the identity")
    return f"{bins} bins exactly one"


@register("mvdr_distortionless")
def check_mvdr_distortionless(rng: np.random.Generator, perturb: float, bins: int = 64,
                              mics: int = 4, frames: int = 50) -> str:
    """ Rank-one speech with white noise: the output is the reference channel's clean signal. """
    steering = rng.normal(size=(bins, mics)) + 1j * rng.normal(size=(bins, mics))
    power = rng.uniform(0.5, 2.0, size=bins)
    phi_s = hermitian(power[:, None, None] * np.einsum("km,kn->kmn", steering,
                                                        np.conj(steering)))
    phi_n = np.broadcast_to(np.eye(mics, dtype=np.complex128), (bins, mics, mics)).copy()
    weights = mvdr_weights(SpatialCovariance(matrices=phi_s), SpatialCovariance(matrices=phi_n),
                           MvdrConfig())
    source = rng.normal(size=(frames, bins)) + 1j * rng.normal(size=(frames, bins))
    clean = source[:, None, :] * steering.T[None, :, :]
    out = apply_beamformer(weights, clean) * (1.0 + perturb)
    error = float(np.max(np.abs(out - clean[:, 0, :])) / np.max(np.abs(clean[:, 0, :])))
    _require(error <= 1e-8, f"distortionless error {error:.2e}")
    return f"{bins} bins, max relative error {error:.1e}"


@register("scm_hermitian_psd")
def check_scm_psd(rng: np.random.Generator, perturb: float, instances: int = 1000) -> str:
    """ Mask-weighted covariances have no eigenvalue below ``-1e-8 * trace``. """
    worst = 0.0
    for _ in range(instances):
        frames, mics, bins = (int(rng.integers(1, 12)), int(rng.integers(1, 5)),
                              int(rng.integers(1, 6)))
        chunk = rng.normal(size=(frames, mics, bins)) + 1j * rng.normal(size=(frames, mics, bins))
        mask = rng.uniform(size=(frames, bins)) * (rng.uniform(size=(frames, bins)) > 0.3)
        matrices = estimate_scm(chunk, mask).matrices
        trace = np.real(np.trace(matrices, axis1=1, axis2=2))
        lowest = np.linalg.eigvalsh(matrices).min(axis=1)
        worst = max(worst, float(np.max(-lowest / np.maximum(trace, 1e-300))))
    worst += perturb
    _require(worst <= 1e-8, f"covariance eigenvalue at {-worst:.2e} of its trace")
    return f"{instances} covariances Hermitian and PSD"


@register("stft_roundtrip")
def check_stft_roundtrip(rng: np.random.Generator, perturb: float) -> str:
    cfg = StftConfig()
    wave = Waveform(samples=rng.normal(size=(2, 16000)), sample_rate=cfg.sample_rate)
    out = istft(stft(wave, cfg), length=wave.num_samples).samples * (1.0 + perturb)
    interior = slice(cfg.window_size, wave.num_samples - cfg.window_size)
    error = float(np.sqrt(np.mean((out[:, interior] - wave.samples[:, interior]) ** 2))
                  / np.sqrt(np.mean(wave.samples[:, interior] ** 2)))
    _require(error <= 1e-6, f"round-trip RMS error {error:.2e}")
    return f"interior relative RMS error {error:.1e}"


@register("chunk_coverage")
def check_chunk_coverage(rng: np.random.Generator, perturb: float, plans: int = 1000) -> str:
    """ Cores tile the utterance and stitching extracted cores restores it. """
    for i in range(plans):
        total_frames = int(rng.integers(1, 300))
        plan = plan_chunks(total_frames, int(rng.integers(1, 60)), int(rng.integers(0, 90)),
                           int(rng.integers(0, 60)))
        frames = rng.normal(size=(total_frames, 3))
        stitched = stitch_cores([extract_chunk(frames, d) for d in plan], plan) + perturb
        _require(np.array_equal(stitched, frames), f"plan {i}: stitched cores differ")
        _require(plan.descriptors[0].core_start == 0 and
                 plan.descriptors[-1].core_end == total_frames, f"plan {i}: cores do not tile")
    return f"{plans} plans"


def run_checks(names: list[str] | None = None, seed: int = 0,
               fault: str | None = None) -> list[CheckResult]:
    """ Runs registered checks in registration order.

    Args:
        names: Checks to run; all of them when None.
        seed: Seed of every check's generator.
        fault: Name of a check to perturb so that it must fail.

    Raises:
        KeyError: If a name is not registered.
    """
    selected = list(CHECKS) if names is None else names
    for name in [*selected, *([fault] if fault else [])]:
        if name not in CHECKS:
            raise KeyError(f"unknown check {name}; known: {', '.join(CHECKS)}")
    results = []
    for name in selected:
        started = time.perf_counter()
        try:
            detail = CHECKS[name](np.random.default_rng(seed), 1e-2 if name == fault else 0.0)
        except CusideError as err:
            passed, detail = False, f"{type(err).__name__}: {err}"
        else:
            passed = True
        result = CheckResult(name=name, passed=passed, detail=detail,
                             seconds=time.perf_counter() - started)
        (logger.info if passed else logger.error)("%s %s: %s", name,
                                                  "passed" if passed else "FAILED", detail)
        results.append(result)
    return results
