""" Enhancement metrics and the matched-pair significance test. """
from __future__ import annotations

import numpy as np
from pydantic import BaseModel
from scipy import stats

from cuside_array.errors import ShapeError

EPS = 1e-12


def _pair(reference, estimate) -> tuple[np.ndarray, np.ndarray]:
    reference = np.asarray(reference, dtype=np.float64).ravel()
    estimate = np.asarray(estimate, dtype=np.float64).ravel()
    if reference.shape != estimate.shape:
        raise ShapeError(f"reference {reference.shape} vs estimate {estimate.shape}")
    return reference, estimate


def si_sdr(reference, estimate, zero_mean: bool = True) -> float:
    """ Scale-invariant signal-to-distortion ratio in dB.

    The estimate is split into its projection on the reference (target) and the rest (error);
    the result is ``10 log10(|target|^2 / |error|^2)``.
    """
    reference, estimate = _pair(reference, estimate)
    if zero_mean:
        reference = reference - reference.mean()
        estimate = estimate - estimate.mean()
    scale = np.dot(estimate, reference) / (np.dot(reference, reference) + EPS)
    target = scale * reference
    error = estimate - target
    return float(10.0 * np.log10((np.dot(target, target) + EPS) / (np.dot(error, error) + EPS)))


def snr(reference, estimate) -> float:
    """ Plain SNR in dB treating ``estimate - reference`` as noise. """
    reference, estimate = _pair(reference, estimate)
    noise = estimate - reference
    return float(10.0 * np.log10((np.dot(reference, reference) + EPS)
                                 / (np.dot(noise, noise) + EPS)))


def output_snr(weights_speech: np.ndarray, weights_noise: np.ndarray) -> float:
    """ SNR of a linear filter's output given its speech and noise outputs. """
    s = np.asarray(weights_speech)
    n = np.asarray(weights_noise)
    return float(10.0 * np.log10((np.sum(np.abs(s) ** 2) + EPS) / (np.sum(np.abs(n) ** 2) + EPS)))


class PairedTest(BaseModel):
    """ Wilcoxon signed-rank comparison of per-utterance errors under two systems. """
    system_a: str
    system_b: str
    num_pairs: int
    statistic: float | None = None
    p_value: float | None = None

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value < 0.05


def matched_pair_test(errors_a: list[float], errors_b: list[float], system_a: str = "a",
                      system_b: str = "b") -> PairedTest:
    """ Two-sided Wilcoxon signed-rank test; undefined (None) when every difference is zero. """
    if len(errors_a) != len(errors_b):
        raise ShapeError(f"{len(errors_a)} vs {len(errors_b)} paired errors")
    diffs = np.asarray(errors_a, dtype=np.float64) - np.asarray(errors_b, dtype=np.float64)
    if diffs.size == 0 or np.all(diffs == 0):
        return PairedTest(system_a=system_a, system_b=system_b, num_pairs=int(diffs.size))
    result = stats.wilcoxon(errors_a, errors_b)
    return PairedTest(system_a=system_a, system_b=system_b, num_pairs=int(diffs.size),
                      statistic=float(result.statistic), p_value=float(result.pvalue))
